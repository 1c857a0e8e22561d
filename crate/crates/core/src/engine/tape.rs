use std::cell::Cell;
use std::fmt;

use super::ops::{self, ConvGeom, NormCache, Padding};
use super::{ParamId, ParamStore, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Primitive kinds recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    MaxPool2d,
    AvgPoolSame,
    AdaptiveAvgPool,
    LayerNorm,
    Swish,
    Relu,
    UpsampleNearest,
    Concat,
    Add,
    Sub,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPoolSame,
        OpKind::AdaptiveAvgPool,
        OpKind::LayerNorm,
        OpKind::Swish,
        OpKind::Relu,
        OpKind::UpsampleNearest,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Sub,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::AvgPoolSame => "avgpool2d_samesize",
            OpKind::AdaptiveAvgPool => "adaptive_avgpool",
            OpKind::LayerNorm => "channel_layernorm",
            OpKind::Swish => "swish",
            OpKind::Relu => "relu",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Concat => "concat_channels",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupt the backward pass of `kind` on the current thread (gradients are
/// scaled by 1.5). Used to check that gradient checking detects broken ops.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

pub(crate) fn faulty(kind: OpKind) -> bool {
    FAULT.with(|f| f.get()) == Some(kind)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPoolSame {
        x: Var,
        k: usize,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        cache: NormCache<T>,
    },
    Swish {
        x: Var,
        sig: Tensor4<T>,
    },
    Relu {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Cost units recorded for one executed primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCost {
    pub kind: OpKind,
    /// Multiply-accumulates for convolutions, zero otherwise.
    pub macs: u64,
    /// Bias adds for convolutions, one unit per output element for
    /// normalization, activation, pooling and residual adds, zero for pure
    /// data movement.
    pub units: u64,
}

/// Reverse-mode autodiff tape over rank-4 tensors.
///
/// Parameter-consuming ops read values from a [`ParamStore`] at record time
/// and accumulate parameter gradients into the same store on
/// [`Tape::backward`]. Values recorded on the tape are never mutated.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    costs: Vec<OpCost>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of tape leaves created with [`Tape::leaf`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            costs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Executed primitives with their cost units, in execution order.
    pub fn costs(&self) -> &[OpCost] {
        &self.costs
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn cost(&mut self, kind: OpKind, macs: u64, units: u64) {
        self.costs.push(OpCost { kind, macs, units });
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A differentiable leaf whose gradient is returned by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A parameter used directly as a tensor value; its gradient flows into
    /// the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).as_tensor(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_padded(store, x, weight, bias, stride, Padding::same(padding))
    }

    pub fn conv2d_padded(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let w = store.get(weight);
        let dims: [usize; 4] = w.shape.as_slice().try_into().map_err(|_| {
            Error::InvalidArgument(format!("conv weight `{}` must be rank 4", w.name))
        })?;
        let geom = ConvGeom::new(dims, stride, pad);
        let b = match bias {
            Some(id) => {
                let b = store.get(id);
                if b.numel() != geom.cout {
                    return Err(Error::shapes(
                        "conv2d",
                        format!("bias `{}` {:?}", b.name, b.shape),
                        format!("weight `{}` {:?}", w.name, w.shape),
                    ));
                }
                Some(b.value.as_slice())
            }
            None => None,
        };
        let out = ops::conv2d_forward(self.value(x), &w.value, b, &geom)?;
        let os = out.shape();
        let bias_adds = if bias.is_some() { os.numel() as u64 } else { 0 };
        self.cost(OpKind::Conv2d, ops::conv2d_macs(&geom, os), bias_adds);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            true,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_forward(self.value(x), k, stride)?;
        self.cost(OpKind::MaxPool2d, 0, out.shape().numel() as u64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn avg_pool_same(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = ops::avg_pool_same_forward(self.value(x), k)?;
        self.cost(OpKind::AvgPoolSame, 0, out.shape().numel() as u64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPoolSame { x, k }, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let out = ops::adaptive_avg_pool_forward(self.value(x), bins)?;
        self.cost(OpKind::AdaptiveAvgPool, 0, out.shape().numel() as u64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::AdaptiveAvgPool { x }, rg))
    }

    pub fn layer_norm(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let (out, cache) = ops::layer_norm_forward(
            self.value(x),
            &store.get(gamma).value,
            &store.get(beta).value,
            eps,
        )?;
        self.cost(OpKind::LayerNorm, 0, out.shape().numel() as u64);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            true,
        ))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let (out, sig) = ops::swish_forward(self.value(x));
        self.cost(OpKind::Swish, 0, out.shape().numel() as u64);
        let rg = self.rg(x);
        self.push(out, Op::Swish { x, sig }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(self.value(x));
        self.cost(OpKind::Relu, 0, out.shape().numel() as u64);
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Nearest-neighbour 2x up-sampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.value(x).shape();
        self.upsample_to(x, 2 * s.h, 2 * s.w)
    }

    /// Nearest-neighbour resize to `h x w`.
    pub fn upsample_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = ops::upsample_nearest_forward(self.value(x), h, w);
        self.cost(OpKind::UpsampleNearest, 0, 0);
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        self.cost(OpKind::Concat, 0, 0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add_forward(self.value(a), self.value(b))?;
        self.cost(OpKind::Add, 0, out.shape().numel() as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub_forward(self.value(a), self.value(b))?;
        self.cost(OpKind::Sub, 0, out.shape().numel() as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Back-propagate `seed` (the gradient of the loss w.r.t. `root`).
    ///
    /// Parameter gradients are accumulated into `store`; gradients of
    /// [`Tape::leaf`] values are returned.
    pub fn backward(
        &self,
        root: Var,
        seed: Tensor4<T>,
        store: &mut ParamStore<T>,
    ) -> Result<Gradients<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shapes("backward", seed.shape(), self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let (lower, _) = grads.split_at_mut(i);
            if let Some(kind) = self.kind_of(&node.op) {
                if faulty(kind) {
                    g = g.map(|v| v * T::of(1.5));
                }
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (d, &v) in p.grad.iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    geom,
                } => {
                    let xv = self.value(*x);
                    if let Some(b) = bias {
                        ops::conv2d_backward_bias(&g, &mut store.get_mut(*b).grad);
                    }
                    let p = store.get_mut(*weight);
                    if self.rg(*x) {
                        let dx = slot(lower, *x, xv);
                        ops::conv2d_backward_input(xv.shape(), &p.value, geom, &g, dx);
                    }
                    ops::conv2d_backward_weight(xv, geom, &g, &mut p.grad);
                }
                Op::MaxPool2d { x, argmax } => {
                    let dx = slot(lower, *x, self.value(*x));
                    ops::max_pool2d_backward(argmax, &g, dx);
                }
                Op::AvgPoolSame { x, k } => {
                    let dx = slot(lower, *x, self.value(*x));
                    ops::avg_pool_same_backward(*k, &g, dx);
                }
                Op::AdaptiveAvgPool { x } => {
                    let dx = slot(lower, *x, self.value(*x));
                    ops::adaptive_avg_pool_backward(&g, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let gamma_v = store.get(*gamma).value.clone();
                    let mut dgamma = vec![T::zero(); gamma_v.len()];
                    let mut dbeta = vec![T::zero(); gamma_v.len()];
                    let dx = if self.rg(*x) {
                        Some(slot(lower, *x, self.value(*x)))
                    } else {
                        None
                    };
                    ops::layer_norm_backward(cache, &gamma_v, &g, dx, &mut dgamma, &mut dbeta);
                    accumulate(&mut store.get_mut(*gamma).grad, &dgamma);
                    accumulate(&mut store.get_mut(*beta).grad, &dbeta);
                }
                Op::Swish { x, sig } => {
                    let xv = self.value(*x);
                    ops::swish_backward(xv, sig, &g, slot(lower, *x, xv));
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    ops::relu_backward(xv, &g, slot(lower, *x, xv));
                }
                Op::Upsample { x } => {
                    ops::upsample_nearest_backward(&g, slot(lower, *x, self.value(*x)));
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape().c;
                    let (ra, rb) = (self.rg(*a), self.rg(*b));
                    if a == b {
                        let d = slot(lower, *a, self.value(*a));
                        ops::concat_backward(&g, ca, Some(d), None);
                        let d = slot(lower, *a, self.value(*a));
                        ops::concat_backward(&g, ca, None, Some(d));
                    } else {
                        let (da, db) = two_slots(lower, *a, *b, self.value(*a), self.value(*b));
                        ops::concat_backward(&g, ca, ra.then_some(da), rb.then_some(db));
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        if self.rg(*v) {
                            slot(lower, *v, self.value(*v)).add_assign(&g);
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.rg(*a) {
                        slot(lower, *a, self.value(*a)).add_assign(&g);
                    }
                    if self.rg(*b) {
                        let neg = g.map(|v| -v);
                        slot(lower, *b, self.value(*b)).add_assign(&neg);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn kind_of(&self, op: &Op<T>) -> Option<OpKind> {
        Some(match op {
            Op::Input | Op::Leaf | Op::Param(_) => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPoolSame { .. } => OpKind::AvgPoolSame,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Swish { .. } => OpKind::Swish,
            Op::Relu { .. } => OpKind::Relu,
            Op::Upsample { .. } => OpKind::UpsampleNearest,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
        })
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor4<T>>],
    v: Var,
    like: &Tensor4<T>,
) -> &'a mut Tensor4<T> {
    grads[v.0].get_or_insert_with(|| Tensor4::zeros(like.shape()))
}

fn two_slots<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor4<T>>],
    a: Var,
    b: Var,
    like_a: &Tensor4<T>,
    like_b: &Tensor4<T>,
) -> (&'a mut Tensor4<T>, &'a mut Tensor4<T>) {
    debug_assert_ne!(a, b);
    grads[a.0].get_or_insert_with(|| Tensor4::zeros(like_a.shape()));
    grads[b.0].get_or_insert_with(|| Tensor4::zeros(like_b.shape()));
    let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = grads.split_at_mut(hi);
    let first = left[lo].as_mut().unwrap();
    let second = right[0].as_mut().unwrap();
    if swap {
        (second, first)
    } else {
        (first, second)
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape4;

    #[test]
    fn add_of_same_var_doubles_gradient() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let x = tape.leaf(Tensor4::full(Shape4::new(1, 1, 2, 2), 3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape
            .backward(y, Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0), &mut store)
            .unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let mut store = ParamStore::new();
        let x = tape.input(Tensor4::full(Shape4::new(1, 1, 2, 2), 3.0));
        let y = tape.swish(x);
        let g = tape
            .backward(y, Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0), &mut store)
            .unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn concat_backward_through_tape_is_lossless() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let a = tape.leaf(Tensor4::zeros(Shape4::new(1, 2, 4, 4)));
        let b = tape.leaf(Tensor4::zeros(Shape4::new(1, 3, 4, 4)));
        let y = tape.concat(a, b).unwrap();
        let seed = Tensor4::from_fn(Shape4::new(1, 5, 4, 4), |_, c, h, w| (c * 16 + h * 4 + w) as f64);
        let g = tape.backward(y, seed.clone(), &mut store).unwrap();
        let a_grad = g.get(a).unwrap();
        let b_grad = g.get(b).unwrap();
        assert_eq!(a_grad.shape().c, 2);
        assert_eq!(ops::concat_forward(a_grad, b_grad).unwrap(), seed);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
