use crate::engine::{ParamId, Padding, Shape4};
use crate::error::{Error, Result};

use super::config::{Arch, ModelConfig, UNetConfig, LEVELS};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

/// Index of a value produced while running the graph. Slot 0 is the input
/// batch; layer `i` writes slot `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Encoder(usize),
    Downsample(usize),
    Bottleneck,
    Decoder(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
    pub act: Option<Activation>,
}

/// Parameters of one pooling-mixer MetaFormer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayer {
    pub width: usize,
    pub ratio: usize,
    pub kernel: usize,
    pub eps: f64,
    pub subtract_input: bool,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

/// Spatial pyramid pooling: per bin, adaptive average pool, 1x1 projection,
/// Swish, nearest up-sample; concat with the input and fuse back with a 3x3
/// conv + Swish.
#[derive(Debug, Clone, PartialEq)]
pub struct SppLayer {
    pub width: usize,
    pub branch_width: usize,
    pub bins: Vec<usize>,
    pub branches: Vec<(ParamId, ParamId)>,
    pub fuse: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    MetaFormer(BlockLayer),
    MaxPool { k: usize, stride: usize },
    Upsample2x,
    /// Channel concat of `inputs[0]` and the skip tensor `inputs[1]`.
    Concat,
    Spp(SppLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub section: Section,
    pub kind: LayerKind,
    pub inputs: Vec<Slot>,
}

/// Long skip connection between an encoder level and a decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipPair {
    pub level: usize,
    /// Slot holding the encoder output of this level.
    pub encoder: Slot,
    /// Slot of the concat layer consuming it.
    pub decoder: Slot,
    pub encoder_channels: usize,
}

/// A network as an ordered list of layers over named parameters.
///
/// The graph holds no parameter values; see [`super::Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: Arch,
    params: Vec<ParamSpec>,
    layers: Vec<Layer>,
    skips: Vec<SkipPair>,
    encoder_outputs: Vec<Slot>,
}

impl ModelGraph {
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn skips(&self) -> &[SkipPair] {
        &self.skips
    }

    /// Output slot of each encoder level, before down-sampling.
    pub fn encoder_outputs(&self) -> &[Slot] {
        &self.encoder_outputs
    }

    pub fn output_slot(&self) -> Slot {
        Slot(self.layers.len())
    }

    /// Name -> shape listing, one parameter per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {}\n", p.name, dims.join("x")));
        }
        out
    }

    pub fn count_metaformer_blocks(&self, pred: impl Fn(Section) -> bool) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::MetaFormer(_)) && pred(l.section))
            .count()
    }

    /// Check an input shape against the graph and return every slot's shape.
    pub fn infer_shapes(&self, input: Shape4) -> Result<Vec<Shape4>> {
        let div = 1 << (LEVELS - 1);
        if input.c != self.arch.in_channels() {
            return Err(Error::shapes(
                "forward",
                format!("input {input}"),
                format!("{} input channels", self.arch.in_channels()),
            ));
        }
        if !input.h.is_multiple_of(div) || !input.w.is_multiple_of(div) {
            return Err(Error::NotDivisible {
                op: "forward (spatial dims must be divisible by 16)",
                input,
                divisor: div,
            });
        }
        let mut shapes = vec![input];
        for layer in &self.layers {
            let ins: Vec<Shape4> = layer.inputs.iter().map(|s| shapes[s.0]).collect();
            shapes.push(layer.output_shape(&ins)?);
        }
        Ok(shapes)
    }

    pub fn mfennet(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::default();
        let mut x = Slot(0);
        let mut cin = config.in_channels;
        let mut enc = Vec::new();
        for (level, (&c, &blocks)) in config
            .stage_widths
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let sec = Section::Encoder(level);
            x = b.conv(&format!("enc{level}.embed"), sec, x, cin, c, 3, Padding::same(1), None);
            for i in 0..blocks {
                x = b.block(&format!("enc{level}.block{i}"), sec, x, c, config);
            }
            enc.push(x);
            cin = c;
            if level + 1 < LEVELS {
                x = b.layer(
                    &format!("enc{level}.pool"),
                    Section::Downsample(level),
                    LayerKind::MaxPool { k: 2, stride: 2 },
                    vec![x],
                );
            }
        }
        x = b.spp("spp", x, config.bottleneck_width(), &config.spp_bins);
        let mut skips = Vec::new();
        for level in (0..LEVELS - 1).rev() {
            let c = config.stage_widths[level];
            let sec = Section::Decoder(level);
            let name = format!("dec{level}");
            x = b.layer(&format!("{name}.up"), sec, LayerKind::Upsample2x, vec![x]);
            x = b.layer(&format!("{name}.cat"), sec, LayerKind::Concat, vec![x, enc[level]]);
            skips.push(SkipPair {
                level,
                encoder: enc[level],
                decoder: x,
                encoder_channels: c,
            });
            let act = Some(Activation::Swish);
            x = b.conv(&format!("{name}.conv1"), sec, x, cin + c, c, 3, Padding::same(1), act);
            x = b.conv(&format!("{name}.conv2"), sec, x, c, c, 3, Padding::same(1), act);
            cin = c;
        }
        b.conv("head", Section::Head, x, cin, config.out_channels, 1, Padding::ZERO, None);
        Ok(b.finish(Arch::MfenNet(config.clone()), skips, enc))
    }

    /// Reference U-Net: two 3x3 conv + ReLU per level, 2x2 max pooling, and
    /// on the way up a nearest 2x up-sample followed by a 2x2 conv halving the
    /// channels before the skip concat.
    pub fn unet(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::default();
        let relu = Some(Activation::Relu);
        let mut x = Slot(0);
        let mut cin = config.in_channels;
        let mut enc = Vec::new();
        for (level, &c) in config.widths.iter().enumerate() {
            let sec = Section::Encoder(level);
            x = b.conv(&format!("enc{level}.conv1"), sec, x, cin, c, 3, Padding::same(1), relu);
            x = b.conv(&format!("enc{level}.conv2"), sec, x, c, c, 3, Padding::same(1), relu);
            enc.push(x);
            cin = c;
            if level + 1 < LEVELS {
                x = b.layer(
                    &format!("enc{level}.pool"),
                    Section::Downsample(level),
                    LayerKind::MaxPool { k: 2, stride: 2 },
                    vec![x],
                );
            }
        }
        let mut skips = Vec::new();
        for level in (0..LEVELS - 1).rev() {
            let c = config.widths[level];
            let sec = Section::Decoder(level);
            let name = format!("dec{level}");
            let half = cin / 2;
            x = b.layer(&format!("{name}.up"), sec, LayerKind::Upsample2x, vec![x]);
            let pad = Padding {
                top: 0,
                left: 0,
                bottom: 1,
                right: 1,
            };
            x = b.conv(&format!("{name}.upconv"), sec, x, cin, half, 2, pad, None);
            x = b.layer(&format!("{name}.cat"), sec, LayerKind::Concat, vec![x, enc[level]]);
            skips.push(SkipPair {
                level,
                encoder: enc[level],
                decoder: x,
                encoder_channels: c,
            });
            x = b.conv(&format!("{name}.conv1"), sec, x, half + c, c, 3, Padding::same(1), relu);
            x = b.conv(&format!("{name}.conv2"), sec, x, c, c, 3, Padding::same(1), relu);
            cin = c;
        }
        b.conv("head", Section::Head, x, cin, config.out_channels, 1, Padding::ZERO, None);
        Ok(b.finish(Arch::UNet(config.clone()), skips, enc))
    }

    pub fn build(arch: &Arch) -> Result<Self> {
        match arch {
            Arch::MfenNet(c) => Self::mfennet(c),
            Arch::UNet(c) => Self::unet(c),
        }
    }
}

impl Layer {
    pub fn output_shape(&self, ins: &[Shape4]) -> Result<Shape4> {
        let x = ins[0];
        match &self.kind {
            LayerKind::Conv(c) => {
                let geom = crate::engine::ConvGeom::new([c.cout, c.cin, c.k, c.k], c.stride, c.pad);
                geom.output_shape(x)
            }
            LayerKind::MetaFormer(b) => {
                if x.c != b.width {
                    return Err(Error::shapes(
                        "metaformer_block",
                        format!("input {x}"),
                        format!("block width {}", b.width),
                    ));
                }
                Ok(x)
            }
            LayerKind::MaxPool { k, stride } => {
                if !x.h.is_multiple_of(*stride) || !x.w.is_multiple_of(*stride) {
                    return Err(Error::NotDivisible {
                        op: "max_pool2d",
                        input: x,
                        divisor: *stride,
                    });
                }
                if x.h < *k || x.w < *k {
                    return Err(Error::EmptyOutput { op: "max_pool2d", input: x });
                }
                Ok(x.with_hw((x.h - k) / stride + 1, (x.w - k) / stride + 1))
            }
            LayerKind::Upsample2x => Ok(x.with_hw(2 * x.h, 2 * x.w)),
            LayerKind::Concat => {
                let s = ins[1];
                if s.n != x.n || s.h != x.h || s.w != x.w {
                    return Err(Error::shapes("concat_channels", x, s));
                }
                Ok(x.with_c(x.c + s.c))
            }
            LayerKind::Spp(spp) => {
                if x.c != spp.width {
                    return Err(Error::shapes(
                        "spp",
                        format!("input {x}"),
                        format!("width {}", spp.width),
                    ));
                }
                if let Some(&b) = spp.bins.iter().find(|&&b| b > x.h || b > x.w) {
                    return Err(Error::InvalidArgument(format!(
                        "spp: bin {b} exceeds the {}x{} bottleneck",
                        x.h, x.w
                    )));
                }
                Ok(x)
            }
        }
    }
}

#[derive(Default)]
struct Builder {
    params: Vec<ParamSpec>,
    layers: Vec<Layer>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.params.push(ParamSpec { name, shape, init });
        ParamId(self.params.len() - 1)
    }

    fn layer(&mut self, name: &str, section: Section, kind: LayerKind, inputs: Vec<Slot>) -> Slot {
        self.layers.push(Layer {
            name: name.to_string(),
            section,
            kind,
            inputs,
        });
        Slot(self.layers.len())
    }

    fn conv_params(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (ParamId, ParamId) {
        let fan_in = cin * k * k;
        let w = self.param(format!("{name}.weight"), vec![cout, cin, k, k], Init::Uniform { fan_in });
        let b = self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        (w, b)
    }

    fn norm_params(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.param(format!("{name}.gamma"), vec![c], Init::Ones);
        let b = self.param(format!("{name}.beta"), vec![c], Init::Zeros);
        (g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        section: Section,
        x: Slot,
        cin: usize,
        cout: usize,
        k: usize,
        pad: Padding,
        act: Option<Activation>,
    ) -> Slot {
        let (weight, bias) = self.conv_params(name, cin, cout, k);
        let kind = LayerKind::Conv(ConvLayer {
            weight,
            bias: Some(bias),
            cin,
            cout,
            k,
            stride: 1,
            pad,
            act,
        });
        self.layer(name, section, kind, vec![x])
    }

    fn block(&mut self, name: &str, section: Section, x: Slot, c: usize, cfg: &ModelConfig) -> Slot {
        let hidden = c * cfg.ffn_ratio;
        let norm1 = self.norm_params(&format!("{name}.norm1"), c);
        let norm2 = self.norm_params(&format!("{name}.norm2"), c);
        let fc1 = self.conv_params(&format!("{name}.ffn.fc1"), c, hidden, 1);
        let fc2 = self.conv_params(&format!("{name}.ffn.fc2"), hidden, c, 1);
        let kind = LayerKind::MetaFormer(BlockLayer {
            width: c,
            ratio: cfg.ffn_ratio,
            kernel: cfg.mixer_kernel,
            eps: cfg.norm_eps,
            subtract_input: cfg.mixer_subtract_input,
            norm1,
            norm2,
            fc1,
            fc2,
        });
        self.layer(name, section, kind, vec![x])
    }

    fn spp(&mut self, name: &str, x: Slot, c: usize, bins: &[usize]) -> Slot {
        let branch_width = c / bins.len();
        let branches = bins
            .iter()
            .enumerate()
            .map(|(i, _)| self.conv_params(&format!("{name}.branch{i}"), c, branch_width, 1))
            .collect();
        let fuse = self.conv_params(&format!("{name}.fuse"), 2 * c, c, 3);
        let kind = LayerKind::Spp(SppLayer {
            width: c,
            branch_width,
            bins: bins.to_vec(),
            branches,
            fuse,
        });
        self.layer(name, Section::Bottleneck, kind, vec![x])
    }

    fn finish(self, arch: Arch, skips: Vec<SkipPair>, encoder_outputs: Vec<Slot>) -> ModelGraph {
        ModelGraph {
            arch,
            params: self.params,
            layers: self.layers,
            skips,
            encoder_outputs,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn param_names_are_unique_and_referenced() {
        for graph in [
            ModelGraph::mfennet(&ModelConfig::default()).unwrap(),
            ModelGraph::unet(&UNetConfig::default()).unwrap(),
        ] {
            let names: HashSet<_> = graph.params().iter().map(|p| &p.name).collect();
            assert_eq!(names.len(), graph.params().len());
            let mut used = vec![0usize; graph.params().len()];
            for l in graph.layers() {
                let ids: Vec<ParamId> = match &l.kind {
                    LayerKind::Conv(c) => [Some(c.weight), c.bias].into_iter().flatten().collect(),
                    LayerKind::MetaFormer(b) => vec![
                        b.norm1.0, b.norm1.1, b.norm2.0, b.norm2.1, b.fc1.0, b.fc1.1, b.fc2.0,
                        b.fc2.1,
                    ],
                    LayerKind::Spp(s) => s
                        .branches
                        .iter()
                        .flat_map(|&(w, b)| [w, b])
                        .chain([s.fuse.0, s.fuse.1])
                        .collect(),
                    _ => vec![],
                };
                ids.into_iter().for_each(|id| used[id.index()] += 1);
            }
            assert!(used.iter().all(|&u| u == 1), "{used:?}");
        }
    }

    #[test]
    fn skip_pairs_match_spatially() {
        let graph = ModelGraph::mfennet(&ModelConfig::default()).unwrap();
        let shapes = graph.infer_shapes(Shape4::new(1, 3, 64, 64));
        // default bins [1,2,3,6] do not fit a 4x4 bottleneck
        assert!(shapes.is_err());
        let cfg = ModelConfig {
            spp_bins: vec![1, 2],
            ..Default::default()
        };
        let graph = ModelGraph::mfennet(&cfg).unwrap();
        let shapes = graph.infer_shapes(Shape4::new(1, 3, 64, 64)).unwrap();
        assert_eq!(graph.skips().len(), 4);
        for s in graph.skips() {
            let e = shapes[s.encoder.0];
            let d = shapes[s.decoder.0];
            assert_eq!((e.h, e.w), (d.h, d.w));
            assert_eq!(e.c, s.encoder_channels);
        }
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let graph = ModelGraph::mfennet(&ModelConfig::default()).unwrap();
        let err = graph.infer_shapes(Shape4::new(1, 3, 100, 96)).unwrap_err();
        assert!(err.to_string().contains("divisible by 16"), "{err}");
    }
}
