//! MFEnNet and the reference U-Net.
//!
//! A [`ModelGraph`] is the architecture (layers, parameter names and shapes);
//! a [`Model`] pairs it with parameter values.

mod blocks;
mod config;
mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{metaformer_block, spp, spp_concat};
pub use config::{
    Arch, ModelConfig, UNetConfig, LEVELS, TUNED_BLOCKS_PER_STAGE, UNIFORM_BLOCKS_PER_STAGE,
};
pub use graph::{
    Activation, BlockLayer, ConvLayer, Init, Layer, LayerKind, ModelGraph, ParamSpec, Section,
    SkipPair, Slot, SppLayer,
};

use crate::engine::{ParamStore, ParamTensor, Scalar, Tape, Tensor4, Var};
use crate::error::{Error, Result};

/// Values produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Every graph slot, indexed like [`Slot`].
    pub slots: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    graph: ModelGraph,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters, seeded.
    pub fn new(graph: ModelGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in graph.params() {
            let name = spec.name.clone();
            let shape = spec.shape.clone();
            match spec.init {
                Init::Uniform { fan_in } => {
                    params.insert_uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                }
                Init::Zeros => params.insert_const(name, shape, T::zero()),
                Init::Ones => params.insert_const(name, shape, T::one()),
            }
            .expect("graph parameter specs are valid");
        }
        Model { graph, params }
    }

    /// Pair a graph with existing parameters; names, order and shapes must
    /// match.
    pub fn from_parts(graph: ModelGraph, params: ParamStore<T>) -> Result<Self> {
        check_params(&graph, params.iter())?;
        Ok(Model { graph, params })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelGraph, ParamStore<T>) {
        (self.graph, self.params)
    }

    /// Same graph and values in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            graph: self.graph.clone(),
            params: self.params.cast(),
        }
    }

    /// Run the whole graph on `x` (a batch `n x in_channels x H x W`, `H` and
    /// `W` divisible by 16).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        forward_with(&self.graph, &self.params, tape, x)
    }

    /// Logits for a batch, without keeping the tape.
    pub fn predict(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.logits).clone())
    }

    fn run_section(
        &self,
        tape: &mut Tape<T>,
        section: Section,
        mut x: Var,
        skip: Option<Var>,
    ) -> Result<Var> {
        let mut ran = false;
        for layer in self.graph.layers().iter().filter(|l| l.section == section) {
            let inputs = match (&layer.kind, skip) {
                (LayerKind::Concat, Some(s)) => vec![x, s],
                (LayerKind::Concat, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "{section:?} needs a skip input"
                    )))
                }
                _ => vec![x],
            };
            x = run_layer(&self.params, tape, layer, &inputs)?;
            ran = true;
        }
        if !ran {
            return Err(Error::InvalidArgument(format!("graph has no {section:?} layers")));
        }
        Ok(x)
    }

    /// Embedding conv followed by the level's MetaFormer blocks.
    pub fn encoder_stage(&self, tape: &mut Tape<T>, x: Var, level: usize) -> Result<Var> {
        self.run_section(tape, Section::Encoder(level), x, None)
    }

    /// Up-sample `x`, concat `skip`, then the level's convolutions.
    pub fn decoder_stage(&self, tape: &mut Tape<T>, x: Var, skip: Var, level: usize) -> Result<Var> {
        let up = tape.value(x).shape();
        let s = tape.value(skip).shape();
        if 2 * up.h != s.h || 2 * up.w != s.w {
            return Err(Error::shapes("decoder_stage", format!("x {up} (x2 upsampled)"), format!("skip {s}")));
        }
        self.run_section(tape, Section::Decoder(level), x, Some(skip))
    }
}

fn run_layer<T: Scalar>(store: &ParamStore<T>, tape: &mut Tape<T>, layer: &Layer, inputs: &[Var]) -> Result<Var> {
    let x = inputs[0];
    match &layer.kind {
        LayerKind::Conv(c) => {
            let y = tape.conv2d_padded(store, x, c.weight, c.bias, c.stride, c.pad)?;
            Ok(match c.act {
                Some(Activation::Swish) => tape.swish(y),
                Some(Activation::Relu) => tape.relu(y),
                None => y,
            })
        }
        LayerKind::MetaFormer(b) => metaformer_block(tape, store, x, b),
        LayerKind::MaxPool { k, stride } => tape.max_pool2d(x, *k, *stride),
        LayerKind::Upsample2x => Ok(tape.upsample2x(x)),
        LayerKind::Concat => tape.concat(x, inputs[1]),
        LayerKind::Spp(s) => spp(tape, store, x, s),
    }
}

/// Forward pass of `graph` with parameters held outside a [`Model`], e.g. by
/// a gradient checker perturbing them in place.
pub fn forward_with<T: Scalar>(
    graph: &ModelGraph,
    params: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: Var,
) -> Result<Forward> {
    graph.infer_shapes(tape.value(x).shape())?;
    let mut slots = vec![x];
    for layer in graph.layers() {
        let inputs: Vec<Var> = layer.inputs.iter().map(|s| slots[s.0]).collect();
        slots.push(run_layer(params, tape, layer, &inputs)?);
    }
    Ok(Forward {
        logits: *slots.last().unwrap(),
        slots,
    })
}

pub(crate) fn check_params<'a, T: Scalar + 'a>(
    graph: &ModelGraph,
    params: impl Iterator<Item = &'a ParamTensor<T>>,
) -> Result<()> {
    let mut specs = graph.params().iter();
    for p in params {
        let Some(spec) = specs.next() else {
            return Err(Error::UnknownParameter(p.name.clone()));
        };
        if spec.name != p.name {
            return Err(match graph.params().iter().any(|s| s.name == p.name) {
                true => Error::InvalidArgument(format!(
                    "parameter `{}` out of order (expected `{}`)",
                    p.name, spec.name
                )),
                false => Error::UnknownParameter(p.name.clone()),
            });
        }
        if spec.shape != p.shape {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                expected: spec.shape.clone(),
                found: p.shape.clone(),
            });
        }
    }
    if let Some(missing) = specs.next() {
        return Err(Error::MissingParameter(missing.name.clone()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape4;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_widths: vec![4, 8, 8, 16, 16],
            blocks_per_stage: vec![1, 1, 1, 1, 1],
            spp_bins: vec![1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn forward_shape_at_desk_scale() {
        let model = Model::<f32>::new(ModelGraph::mfennet(&small()).unwrap(), 0);
        let y = model.predict(&Tensor4::full(Shape4::new(2, 3, 32, 32), 0.5)).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 1, 32, 32));
        assert!(y.is_finite());
    }

    #[test]
    fn zeroed_branches_make_block_identity() {
        let model = Model::<f64>::new(ModelGraph::mfennet(&small()).unwrap(), 3);
        let (graph, mut params) = model.into_parts();
        let LayerKind::MetaFormer(block) = &graph.layers()[1].kind else {
            panic!("layer 1 is a block")
        };
        for id in [
            block.norm1.0, block.norm1.1, block.norm2.0, block.norm2.1, block.fc1.0, block.fc1.1,
            block.fc2.0, block.fc2.1,
        ] {
            params.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
        for subtract in [false, true] {
            let mut b = block.clone();
            b.subtract_input = subtract;
            let mut tape = Tape::new();
            let x = Tensor4::from_fn(Shape4::new(2, 4, 6, 6), |n, c, h, w| {
                ((n * 7 + c * 5 + h * 3 + w) % 13) as f64 * 0.37 - 2.0
            });
            let z = tape.input(x.clone());
            let y = metaformer_block(&mut tape, &params, z, &b).unwrap();
            assert_eq!(tape.value(y), &x);
        }
    }

    #[test]
    fn decoder_holds_no_metaformer_blocks() {
        for cfg in [ModelConfig::default(), small()] {
            let g = ModelGraph::mfennet(&cfg).unwrap();
            assert_eq!(g.count_metaformer_blocks(|s| matches!(s, Section::Decoder(_))), 0);
            let enc = g.count_metaformer_blocks(|s| matches!(s, Section::Encoder(_)));
            assert_eq!(enc, cfg.blocks_per_stage.iter().sum::<usize>());
        }
    }

    #[test]
    fn from_parts_rejects_foreign_params() {
        let a = Model::<f32>::new(ModelGraph::mfennet(&small()).unwrap(), 0);
        let other = ModelConfig {
            stage_widths: vec![4, 8, 8, 16, 32],
            ..small()
        };
        let g = ModelGraph::mfennet(&other).unwrap();
        let err = Model::from_parts(g, a.params().clone()).unwrap_err();
        assert!(matches!(err, Error::ParamShape { .. }), "{err}");
    }
}
