//! Analytic parameter and FLOP accounting over a [`ModelGraph`].
//!
//! Convolutions cost `K*K*Cin*Cout*Hout*Wout` multiply-accumulates plus one
//! add per output element for the bias. Normalization, activation, pooling
//! and residual adds cost one unit per output element and are reported in
//! their own rows. Up-sampling and concatenation are free.

use std::fmt::Write as _;

use crate::engine::{ConvGeom, OpCost, OpKind, Shape4};
use crate::error::{Error, Result};
use crate::model::{Arch, LayerKind, ModelConfig, ModelGraph, LEVELS};

/// Published complexity of a network at 256x256.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub params: f64,
    pub flops: f64,
}

pub const REFERENCE_MFENNET: Reference = Reference {
    params: 11.14e6,
    flops: 17.13e9,
};

pub const REFERENCE_UNET: Reference = Reference {
    params: 31.04e6,
    flops: 54.66e9,
};

/// How a multiply-accumulate is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    MacAsOne,
    MacAsTwo,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::MacAsOne => 1,
            Convention::MacAsTwo => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::MacAsOne => "MAC_AS_ONE",
            Convention::MacAsTwo => "MAC_AS_TWO",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mac_as_one" | "mac1" | "one" => Ok(Convention::MacAsOne),
            "mac_as_two" | "mac2" | "two" => Ok(Convention::MacAsTwo),
            _ => Err(Error::InvalidArgument(format!("unknown FLOP convention `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Conv,
    Norm,
    Activation,
    Pool,
    Residual,
}

impl RowKind {
    fn of(op: OpKind) -> Option<RowKind> {
        Some(match op {
            OpKind::Conv2d => RowKind::Conv,
            OpKind::LayerNorm => RowKind::Norm,
            OpKind::Swish | OpKind::Relu => RowKind::Activation,
            OpKind::MaxPool2d | OpKind::AvgPoolSame | OpKind::AdaptiveAvgPool => RowKind::Pool,
            OpKind::Add | OpKind::Sub => RowKind::Residual,
            OpKind::UpsampleNearest | OpKind::Concat | OpKind::BceWithLogits => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub kind: RowKind,
    pub params: u64,
    pub macs: u64,
    /// Bias adds for convolutions, element passes otherwise.
    pub units: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub arch: &'static str,
    pub input: Shape4,
    pub convention: Convention,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn conv_flops(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == RowKind::Conv)
            .map(|r| r.flops)
            .sum()
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// `name,params,flops` rows with a header and a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(out, "total,{},{}", self.total_params, self.total_flops);
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} @ {} ({})",
            self.arch,
            self.input,
            self.convention.name()
        );
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.flops);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}",
            "total", self.total_params, self.total_flops
        );
        let _ = writeln!(
            out,
            "Params (M) {:.2}  FLOPs (G) {:.2}  conv-only FLOPs (G) {:.2}",
            self.params_m(),
            self.flops_g(),
            self.conv_flops() as f64 / 1e9
        );
        out
    }

    /// Relative deltas `(params, flops)` against a reference.
    pub fn delta(&self, r: &Reference) -> (f64, f64) {
        (
            self.total_params as f64 / r.params - 1.0,
            self.total_flops as f64 / r.flops - 1.0,
        )
    }
}

/// Learnable element count; independent of input size.
pub fn count_params(graph: &ModelGraph) -> u64 {
    graph.params().iter().map(|p| p.numel() as u64).sum()
}

pub fn count_flops(graph: &ModelGraph, input: Shape4, convention: Convention) -> Result<u64> {
    Ok(report(graph, input, convention)?.total_flops)
}

struct Rows {
    rows: Vec<CostRow>,
    convention: Convention,
}

impl Rows {
    fn push(&mut self, name: String, kind: RowKind, params: u64, macs: u64, units: u64) {
        let flops = match kind {
            RowKind::Conv => self.convention.factor() * (macs + units),
            _ => units,
        };
        self.rows.push(CostRow {
            name,
            kind,
            params,
            macs,
            units,
            flops,
        });
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, out: Shape4, bias: bool) {
        let geom = ConvGeom::new([cout, cin, k, k], 1, Default::default());
        let macs = crate::engine::ops::conv2d_macs(&geom, out);
        let b = if bias { cout as u64 } else { 0 };
        let adds = if bias { out.numel() as u64 } else { 0 };
        self.push(name, RowKind::Conv, (cout * cin * k * k) as u64 + b, macs, adds);
    }
}

/// Per-layer rows in graph order.
pub fn report(graph: &ModelGraph, input: Shape4, convention: Convention) -> Result<CostReport> {
    let shapes = graph.infer_shapes(input)?;
    let mut rows = Rows {
        rows: Vec::new(),
        convention,
    };
    for (i, layer) in graph.layers().iter().enumerate() {
        let x = shapes[layer.inputs[0].0];
        let out = shapes[i + 1];
        let name = &layer.name;
        match &layer.kind {
            LayerKind::Conv(c) => {
                rows.conv(name.clone(), c.cin, c.cout, c.k, out, c.bias.is_some());
                if c.act.is_some() {
                    rows.push(format!("{name}.act"), RowKind::Activation, 0, 0, out.numel() as u64);
                }
            }
            LayerKind::MetaFormer(b) => {
                let e = x.numel() as u64;
                let c = b.width as u64;
                let hidden = b.width * b.ratio;
                rows.push(format!("{name}.norm1"), RowKind::Norm, 2 * c, 0, e);
                rows.push(format!("{name}.mixer"), RowKind::Pool, 0, 0, e);
                if b.subtract_input {
                    rows.push(format!("{name}.mixer.sub"), RowKind::Residual, 0, 0, e);
                }
                rows.push(format!("{name}.residual1"), RowKind::Residual, 0, 0, e);
                rows.push(format!("{name}.norm2"), RowKind::Norm, 2 * c, 0, e);
                rows.conv(format!("{name}.ffn.fc1"), b.width, hidden, 1, x.with_c(hidden), true);
                rows.push(
                    format!("{name}.ffn.act"),
                    RowKind::Activation,
                    0,
                    0,
                    x.with_c(hidden).numel() as u64,
                );
                rows.conv(format!("{name}.ffn.fc2"), hidden, b.width, 1, x, true);
                rows.push(format!("{name}.residual2"), RowKind::Residual, 0, 0, e);
            }
            LayerKind::MaxPool { .. } => {
                rows.push(name.clone(), RowKind::Pool, 0, 0, out.numel() as u64);
            }
            LayerKind::Upsample2x | LayerKind::Concat => {}
            LayerKind::Spp(s) => {
                for (j, &bins) in s.bins.iter().enumerate() {
                    let pooled = x.with_hw(bins, bins);
                    let proj = pooled.with_c(s.branch_width);
                    rows.push(
                        format!("{name}.branch{j}.pool"),
                        RowKind::Pool,
                        0,
                        0,
                        pooled.numel() as u64,
                    );
                    rows.conv(format!("{name}.branch{j}"), s.width, s.branch_width, 1, proj, true);
                    rows.push(
                        format!("{name}.branch{j}.act"),
                        RowKind::Activation,
                        0,
                        0,
                        proj.numel() as u64,
                    );
                }
                rows.conv(format!("{name}.fuse"), 2 * s.width, s.width, 3, out, true);
                rows.push(format!("{name}.fuse.act"), RowKind::Activation, 0, 0, out.numel() as u64);
            }
        }
    }
    let rows = rows.rows;
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        arch: graph.arch().name(),
        input,
        convention,
        rows,
        total_params,
        total_flops,
    })
}

/// `(macs, units)` per row kind from a report, for comparison with what a
/// tape actually executed.
pub fn totals_by_kind(rows: &[CostRow]) -> Vec<(RowKind, u64, u64)> {
    let kinds = [
        RowKind::Conv,
        RowKind::Norm,
        RowKind::Activation,
        RowKind::Pool,
        RowKind::Residual,
    ];
    kinds
        .into_iter()
        .map(|k| {
            let (m, u) = rows
                .iter()
                .filter(|r| r.kind == k)
                .fold((0, 0), |(m, u), r| (m + r.macs, u + r.units));
            (k, m, u)
        })
        .collect()
}

/// Same aggregation over executed tape ops.
pub fn executed_by_kind(costs: &[OpCost]) -> Vec<(RowKind, u64, u64)> {
    let mut out = totals_by_kind(&[]);
    for c in costs {
        if let Some(k) = RowKind::of(c.kind) {
            let e = out.iter_mut().find(|e| e.0 == k).unwrap();
            e.1 += c.macs;
            e.2 += c.units;
        }
    }
    out
}

/// Result of the encoder depth search.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub blocks_per_stage: Vec<usize>,
    pub params: u64,
    pub flops: u64,
    pub param_delta: f64,
    pub flop_delta: f64,
}

/// Exhaustively search encoder depths in `0..=max_depth` per level, keeping
/// everything else in `base`, minimising `|dParams| + |dFLOPs|` (relative)
/// against `target` at `input`. Ties keep the first candidate in
/// lexicographic order.
pub fn tune_depths(
    base: &ModelConfig,
    target: &Reference,
    input: Shape4,
    max_depth: usize,
) -> Result<Tuning> {
    let mut best: Option<(f64, Tuning)> = None;
    let mut depths = vec![0usize; LEVELS];
    loop {
        let cfg = base.clone().with_blocks(&depths);
        let graph = ModelGraph::mfennet(&cfg)?;
        let params = count_params(&graph);
        let flops = count_flops(&graph, input, Convention::MacAsOne)?;
        let dp = params as f64 / target.params - 1.0;
        let df = flops as f64 / target.flops - 1.0;
        let score = dp.abs() + df.abs();
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((
                score,
                Tuning {
                    blocks_per_stage: depths.clone(),
                    params,
                    flops,
                    param_delta: dp,
                    flop_delta: df,
                },
            ));
        }
        // odometer increment, last level fastest
        let mut i = LEVELS;
        loop {
            if i == 0 {
                return Ok(best.expect("at least one candidate").1);
            }
            i -= 1;
            depths[i] += 1;
            if depths[i] <= max_depth {
                break;
            }
            depths[i] = 0;
        }
    }
}

/// Canonical reference input, one 3-channel 256x256 image.
pub fn reference_input(arch: &Arch) -> Shape4 {
    Shape4::new(1, arch.in_channels(), 256, 256)
}
