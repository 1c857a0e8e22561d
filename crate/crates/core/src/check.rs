//! Finite-difference suites in `f64`: one per differentiable primitive plus
//! the full network.
//!
//! Each suite checks the objective `mean(w * out)` for a fixed random `w`, so
//! every output element contributes a distinct weight and the objective stays
//! on the unit scale the `1e-8` error floor assumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    bce_with_logits, gradcheck, GradcheckReport, OpKind, ParamId, ParamStore, ParamTensor, Shape4, Tape,
    Tensor4, Var,
};
use crate::error::Result;
use crate::model::{forward_with, Model, ModelConfig, ModelGraph};

/// Max relative error tolerated by the suites.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Spatial side of the per-op inputs; the network check uses the next
    /// multiple of 16.
    pub size: usize,
    pub seed: u64,
    pub probes_per_op: usize,
    pub model_probes: usize,
    /// Network under test; `None` uses the default widths and depths with a
    /// single 1x1 pyramid bin, which fits any input of side 16.
    pub model: Option<ModelConfig>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            size: 16,
            seed: 0,
            probes_per_op: 40,
            model_probes: 240,
            model: None,
        }
    }
}

/// Result of one suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    /// Op name, or `model` for the full network.
    pub name: String,
    pub report: GradcheckReport,
}

impl SuiteResult {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so kinks sit farther than `STEP` away.
fn away_from_zero(shape: Shape4, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect()
}

fn add(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
    store
        .insert(ParamTensor::new(name, shape, value).expect("consistent shape"))
        .expect("unique name")
}

fn add_tensor(store: &mut ParamStore<f64>, name: &str, shape: Shape4, value: Vec<f64>) -> ParamId {
    add(store, name, shape.dims().to_vec(), value)
}

type Build = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>;

/// Weighted-sum objective over whatever `build` records.
fn weighted_check(
    name: &str,
    store: &mut ParamStore<f64>,
    build: &Build,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SuiteResult> {
    let shape = {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        tape.value(out).shape()
    };
    let n = shape.numel() as f64;
    let w = Tensor4::from_vec(shape, random(shape, rng).into_iter().map(|v| v / n).collect())?;
    let report = gradcheck(
        store,
        |s, need_grad| {
            let mut tape = Tape::new();
            let out = build(&mut tape, s)?;
            let y = tape.value(out);
            let loss: f64 = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            if need_grad {
                tape.backward(out, w.clone(), s)?;
            }
            Ok(loss)
        },
        probes,
        STEP,
        rng,
    )?;
    Ok(SuiteResult {
        name: name.to_string(),
        report,
    })
}

fn op_suite(kind: OpKind, size: usize, probes: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut store = ParamStore::new();
    let s = Shape4::new(2, 3, size, size);
    let name = kind.name();
    let x = |st: &mut ParamStore<f64>, rng: &mut ChaCha8Rng| add_tensor(st, "x", s, random(s, rng));
    let build: Box<Build> = match kind {
        OpKind::Conv2d => {
            let xi = x(&mut store, rng);
            let w = add(&mut store, "weight", vec![4, 3, 3, 3], random(Shape4::new(4, 3, 3, 3), rng));
            let b = add(&mut store, "bias", vec![4], random(Shape4::new(1, 1, 1, 4), rng));
            let w2 = add(&mut store, "weight2", vec![2, 4, 3, 3], random(Shape4::new(2, 4, 3, 3), rng));
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                let y = t.conv2d(st, xv, w, Some(b), 1, 1)?;
                t.conv2d(st, y, w2, None, 2, 1)
            })
        }
        OpKind::MaxPool2d => {
            let side = size + size % 2;
            let s = Shape4::new(2, 3, side, side);
            let xi = add_tensor(&mut store, "x", s, distinct(s, rng));
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                t.max_pool2d(xv, 2, 2)
            })
        }
        OpKind::AvgPoolSame => {
            let xi = x(&mut store, rng);
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                t.avg_pool_same(xv, 3)
            })
        }
        OpKind::AdaptiveAvgPool => {
            let xi = x(&mut store, rng);
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                t.adaptive_avg_pool(xv, size.min(3))
            })
        }
        OpKind::LayerNorm => {
            let xi = x(&mut store, rng);
            let g = add(&mut store, "gamma", vec![3], random(Shape4::new(1, 1, 1, 3), rng));
            let b = add(&mut store, "beta", vec![3], random(Shape4::new(1, 1, 1, 3), rng));
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                t.layer_norm(st, xv, g, b, 1e-5)
            })
        }
        OpKind::Swish => {
            let xi = x(&mut store, rng);
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                Ok(t.swish(xv))
            })
        }
        OpKind::Relu => {
            let xi = add_tensor(&mut store, "x", s, away_from_zero(s, rng));
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                Ok(t.relu(xv))
            })
        }
        OpKind::UpsampleNearest => {
            let xi = x(&mut store, rng);
            Box::new(move |t, st| {
                let xv = t.param(st, xi);
                let up = t.upsample2x(xv);
                Ok(t.upsample_to(up, 3 * size, 3 * size))
            })
        }
        OpKind::Concat | OpKind::Add | OpKind::Sub => {
            let a = x(&mut store, rng);
            let b = add_tensor(&mut store, "y", s, random(s, rng));
            Box::new(move |t, st| {
                let (av, bv) = (t.param(st, a), t.param(st, b));
                match kind {
                    OpKind::Concat => t.concat(av, bv),
                    OpKind::Add => t.add(av, bv),
                    _ => t.sub(av, bv),
                }
            })
        }
        OpKind::BceWithLogits => return bce_suite(s, probes, rng),
    };
    weighted_check(name, &mut store, &*build, probes, rng)
}

/// Shuffled, well-separated values so no pooling window holds a near tie.
fn distinct(shape: Shape4, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0 - 1.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    v
}

fn bce_suite(s: Shape4, probes: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut store = ParamStore::new();
    let logits = add_tensor(&mut store, "logits", s, random(s, rng).iter().map(|v| 4.0 * v).collect());
    let target = Tensor4::from_fn(s.with_c(1), |_, _, _, _| rng.gen_range(0.0..1.0));
    let target = Tensor4::from_fn(s, |n, _, h, w| target.at(n, 0, h, w));
    let report = gradcheck(
        &mut store,
        |st, need_grad| {
            let x = st.get(logits).as_tensor();
            let (loss, grad) = bce_with_logits(&x, &target)?;
            if need_grad {
                for (d, g) in st.get_mut(logits).grad.iter_mut().zip(grad.data()) {
                    *d += g;
                }
            }
            Ok(loss)
        },
        probes,
        STEP,
        rng,
    )?;
    Ok(SuiteResult {
        name: OpKind::BceWithLogits.name().to_string(),
        report,
    })
}

/// Configuration checked by the full-network suite by default.
pub fn default_check_model() -> ModelConfig {
    ModelConfig {
        spp_bins: vec![1],
        ..ModelConfig::default()
    }
}

fn model_suite(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mc = cfg.model.clone().unwrap_or_else(default_check_model);
    let side = cfg.size.div_ceil(16).max(1) * 16;
    let graph = ModelGraph::mfennet(&mc)?;
    let (graph, mut store) = Model::<f64>::new(graph, cfg.seed).into_parts();
    let input = Tensor4::from_vec(Shape4::new(1, mc.in_channels, side, side), {
        let s = Shape4::new(1, mc.in_channels, side, side);
        (0..s.numel()).map(|_| rng.gen_range(0.0..1.0)).collect()
    })?;
    let build = move |t: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<Var> {
        let x = t.input(input.clone());
        Ok(forward_with(&graph, st, t, x)?.logits)
    };
    weighted_check("model", &mut store, &build, cfg.model_probes, rng)
}

/// The suite for one primitive.
pub fn run_op_suite(kind: OpKind, cfg: &SuiteConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    op_suite(kind, cfg.size.max(2), cfg.probes_per_op, &mut rng)
}

/// The full-network suite alone.
pub fn run_model_suite(cfg: &SuiteConfig) -> Result<SuiteResult> {
    model_suite(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Every primitive suite, then the network suite.
pub fn run_suites(cfg: &SuiteConfig) -> Result<Vec<SuiteResult>> {
    let mut out = OpKind::ALL
        .into_iter()
        .map(|kind| run_op_suite(kind, cfg))
        .collect::<Result<Vec<_>>>()?;
    out.push(run_model_suite(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::inject_backward_fault;

    #[test]
    fn every_op_passes_at_small_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in OpKind::ALL {
            let r = op_suite(kind, 6, 20, &mut rng).unwrap();
            assert!(r.passed(), "{} worst {:?}", r.name, r.report.worst());
        }
    }

    #[test]
    fn injected_fault_is_caught_by_its_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in OpKind::ALL {
            inject_backward_fault(Some(kind));
            let r = op_suite(kind, 4, 10, &mut rng);
            inject_backward_fault(None);
            let r = r.unwrap();
            assert!(!r.passed(), "{} not detected", r.name);
        }
    }
}
