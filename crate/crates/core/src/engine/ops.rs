//! Forward and backward kernels.
//!
//! Every kernel is a pure function over NCHW buffers. Backward kernels
//! accumulate (`+=`) into the gradient buffers they are handed. Work is split
//! across batch items (or fixed-size output-row chunks) so that every output
//! element is produced by exactly one task with a fixed reduction order; the
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Zero padding on each side of a spatial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding::same(0);

    pub const fn same(p: usize) -> Self {
        Padding {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

/// Weight shape `[cout, cin, kh, kw]` plus stride and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn new(weight: [usize; 4], stride: usize, pad: Padding) -> Self {
        ConvGeom {
            cout: weight[0],
            cin: weight[1],
            kh: weight[2],
            kw: weight[3],
            stride,
            pad,
        }
    }

    /// Rows of the unfolded input, `cin * kh * kw`.
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::ZERO
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.cin {
            return Err(Error::shapes(
                "conv2d",
                format!("input {input}"),
                format!("weight {}x{}x{}x{}", self.cout, self.cin, self.kh, self.kw),
            ));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let ph = input.h + self.pad.top + self.pad.bottom;
        let pw = input.w + self.pad.left + self.pad.right;
        if ph < self.kh || pw < self.kw {
            return Err(Error::EmptyOutput { op: "conv2d", input });
        }
        Ok(Shape4::new(
            input.n,
            self.cout,
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }
}

/// Unfold one item into `cols`, whose rows are `ld` apart.
fn im2col<T: Scalar>(x: &[T], in_shape: Shape4, g: &ConvGeom, out: Shape4, cols: &mut [T], ld: usize) {
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let plane_out = out.plane();
    for ci in 0..g.cin {
        let xc = &x[ci * in_shape.plane()..(ci + 1) * in_shape.plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ld..row * ld + plane_out];
                let (ow0, ow1) = valid_cols(g, j, in_shape.w, out.w);
                for oh in 0..out.h {
                    let ih = (oh * g.stride + i) as isize - g.pad.top as isize;
                    let drow = &mut dst[oh * out.w..(oh + 1) * out.w];
                    if ih < 0 || ih >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * in_shape.w..(ih as usize + 1) * in_shape.w];
                    if g.stride == 1 {
                        drow[..ow0].fill(T::zero());
                        drow[ow1..].fill(T::zero());
                        if ow0 < ow1 {
                            let iw0 = ow0 + j - g.pad.left;
                            drow[ow0..ow1].copy_from_slice(&src[iw0..iw0 + (ow1 - ow0)]);
                        }
                        continue;
                    }
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad.left as isize;
                        *d = if iw < 0 || iw >= w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `j` lands inside the input.
fn valid_cols(g: &ConvGeom, j: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = g.pad.left.saturating_sub(j).min(out_w);
    let hi = (in_w + g.pad.left).saturating_sub(j).min(out_w).max(lo);
    (lo, hi)
}

fn col2im_add<T: Scalar>(cols: &[T], in_shape: Shape4, g: &ConvGeom, out: Shape4, dx: &mut [T], ld: usize) {
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let plane_out = out.plane();
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * in_shape.plane()..(ci + 1) * in_shape.plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * ld..row * ld + plane_out];
                for oh in 0..out.h {
                    let ih = (oh * g.stride + i) as isize - g.pad.top as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let drow = &mut dxc[ih as usize * in_shape.w..(ih as usize + 1) * in_shape.w];
                    if g.stride == 1 {
                        let (ow0, ow1) = valid_cols(g, j, in_shape.w, out.w);
                        let iw0 = ow0 + j - g.pad.left.min(ow0 + j);
                        let srow = &src[oh * out.w + ow0..oh * out.w + ow1];
                        for (d, &v) in drow[iw0..iw0 + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                        continue;
                    }
                    for ow in 0..out.w {
                        let iw = (ow * g.stride + j) as isize - g.pad.left as isize;
                        if iw >= 0 && iw < w {
                            drow[iw as usize] += src[oh * out.w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Multiply-accumulate count of one convolution.
pub fn conv2d_macs(g: &ConvGeom, out: Shape4) -> u64 {
    (g.patch() * g.cout) as u64 * (out.n * out.plane()) as u64
}

/// Batch items per GEMM: small planes are packed side by side so each GEMM
/// has at least this many columns.
const MIN_GEMM_COLS: usize = 256;

fn items_per_gemm(n: usize, hw: usize) -> usize {
    MIN_GEMM_COLS.div_ceil(hw.max(1)).clamp(1, n.max(1))
}

/// Copy items `[n0, n0 + items)` of `t` into a `c x (items * hw)` matrix.
fn gather_items<T: Scalar>(t: &Tensor4<T>, n0: usize, items: usize, dst: &mut [T]) {
    let s = t.shape();
    let ld = items * s.plane();
    for i in 0..items {
        for (c, row) in t.item(n0 + i).chunks(s.plane()).enumerate() {
            dst[c * ld + i * s.plane()..][..s.plane()].copy_from_slice(row);
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Result<Tensor4<T>> {
    let out_shape = g.output_shape(x.shape())?;
    assert_eq!(weight.len(), g.cout * g.patch(), "conv2d weight buffer");
    if let Some(b) = bias {
        assert_eq!(b.len(), g.cout, "conv2d bias buffer");
    }
    let in_shape = x.shape();
    let k = g.patch();
    let hw = out_shape.plane();
    let per = items_per_gemm(in_shape.n, hw);
    let mut out = Tensor4::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.item() * per)
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |(cols, prod): &mut (Vec<T>, Vec<T>), (chunk, dst)| {
                let n0 = chunk * per;
                let items = dst.len() / out_shape.item();
                let ld = items * hw;
                let cols: &[T] = if items == 1 && g.is_pointwise() {
                    x.item(n0)
                } else {
                    cols.resize(k * ld, T::zero());
                    for i in 0..items {
                        im2col(x.item(n0 + i), in_shape, g, out_shape, &mut cols[i * hw..], ld);
                    }
                    cols
                };
                let target: &mut [T] = if items == 1 {
                    dst
                } else {
                    prod.resize(g.cout * ld, T::zero());
                    prod
                };
                T::gemm(
                    g.cout,
                    k,
                    ld,
                    T::one(),
                    weight,
                    (k as isize, 1),
                    cols,
                    (ld as isize, 1),
                    T::zero(),
                    target,
                    (ld as isize, 1),
                );
                if items > 1 {
                    for (i, item) in dst.chunks_mut(out_shape.item()).enumerate() {
                        for (co, row) in item.chunks_mut(hw).enumerate() {
                            row.copy_from_slice(&prod[co * ld + i * hw..][..hw]);
                        }
                    }
                }
                if let Some(b) = bias {
                    for item in dst.chunks_mut(out_shape.item()) {
                        for (co, row) in item.chunks_mut(hw).enumerate() {
                            row.iter_mut().for_each(|v| *v += b[co]);
                        }
                    }
                }
            },
        );
    Ok(out)
}

/// Accumulate `dL/dx` into `dx`.
pub fn conv2d_backward_input<T: Scalar>(
    in_shape: Shape4,
    weight: &[T],
    g: &ConvGeom,
    gout: &Tensor4<T>,
    dx: &mut Tensor4<T>,
) {
    let out_shape = gout.shape();
    let k = g.patch();
    let hw = out_shape.plane();
    let per = items_per_gemm(in_shape.n, hw);
    dx.data_mut()
        .par_chunks_mut(in_shape.item() * per)
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |(gathered, dcols): &mut (Vec<T>, Vec<T>), (chunk, dxs)| {
                let n0 = chunk * per;
                let items = dxs.len() / in_shape.item();
                let ld = items * hw;
                if items == 1 && g.is_pointwise() {
                    T::gemm(
                        k,
                        g.cout,
                        hw,
                        T::one(),
                        weight,
                        (1, k as isize),
                        gout.item(n0),
                        (hw as isize, 1),
                        T::one(),
                        dxs,
                        (hw as isize, 1),
                    );
                    return;
                }
                let go: &[T] = if items == 1 {
                    gout.item(n0)
                } else {
                    gathered.resize(g.cout * ld, T::zero());
                    gather_items(gout, n0, items, gathered);
                    gathered
                };
                dcols.resize(k * ld, T::zero());
                T::gemm(
                    k,
                    g.cout,
                    ld,
                    T::one(),
                    weight,
                    (1, k as isize),
                    go,
                    (ld as isize, 1),
                    T::zero(),
                    dcols,
                    (ld as isize, 1),
                );
                for (i, dxi) in dxs.chunks_mut(in_shape.item()).enumerate() {
                    col2im_add(&dcols[i * hw..], in_shape, g, out_shape, dxi, ld);
                }
            },
        );
}

/// Accumulate `dL/dW` into `dw` (`[cout, cin, kh, kw]` row-major).
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor4<T>,
    g: &ConvGeom,
    gout: &Tensor4<T>,
    dw: &mut [T],
) {
    let in_shape = x.shape();
    let out_shape = gout.shape();
    let k = g.patch();
    let hw = out_shape.plane();
    let per = items_per_gemm(in_shape.n, hw);
    let (mut cols, mut gathered) = (Vec::new(), Vec::new());
    let mut n0 = 0;
    while n0 < in_shape.n {
        let items = per.min(in_shape.n - n0);
        let ld = items * hw;
        let c: &[T] = if items == 1 && g.is_pointwise() {
            x.item(n0)
        } else {
            cols.resize(k * ld, T::zero());
            for i in 0..items {
                im2col(x.item(n0 + i), in_shape, g, out_shape, &mut cols[i * hw..], ld);
            }
            &cols
        };
        let go: &[T] = if items == 1 {
            gout.item(n0)
        } else {
            gathered.resize(g.cout * ld, T::zero());
            gather_items(gout, n0, items, &mut gathered);
            &gathered
        };
        // Each dW element's sum runs over the same column order however rows
        // are split, so the split can follow the thread count.
        let rows_per = g.cout.div_ceil(rayon::current_num_threads()).max(1);
        dw.par_chunks_mut(rows_per * k)
            .enumerate()
            .for_each(|(chunk, dst)| {
                let row0 = chunk * rows_per;
                let rows = dst.len() / k;
                T::gemm(
                    rows,
                    ld,
                    k,
                    T::one(),
                    &go[row0 * ld..],
                    (ld as isize, 1),
                    c,
                    (1, ld as isize),
                    T::one(),
                    dst,
                    (k as isize, 1),
                );
            });
        n0 += items;
    }
}

/// Accumulate `dL/db` into `db`.
pub fn conv2d_backward_bias<T: Scalar>(gout: &Tensor4<T>, db: &mut [T]) {
    let s = gout.shape();
    for n in 0..s.n {
        for (co, row) in gout.item(n).chunks(s.plane()).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
}

/// Max pooling; returns the output and the flat input index of each window's
/// maximum (first occurrence in row-major window order wins).
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("max_pool2d: k and stride must be >= 1".into()));
    }
    if !s.h.is_multiple_of(stride) || !s.w.is_multiple_of(stride) {
        return Err(Error::NotDivisible {
            op: "max_pool2d",
            input: s,
            divisor: stride,
        });
    }
    if s.h < k || s.w < k {
        return Err(Error::EmptyOutput { op: "max_pool2d", input: s });
    }
    let out_shape = s.with_hw((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oh in 0..out_shape.h {
            for ow in 0..out_shape.w {
                let mut best = base + oh * stride * s.w + ow * stride;
                let mut best_v = x.data()[best];
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oh * stride + i) * s.w + ow * stride + j;
                        let v = x.data()[idx];
                        if v > best_v {
                            best_v = v;
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(argmax: &[usize], gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    let dxd = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(gout.data()) {
        dxd[idx] += g;
    }
}

/// In-bounds window `[lo, hi)` of a centred `k`-tap stride-1 kernel at `i`.
#[inline]
fn same_window(i: usize, k: usize, len: usize) -> (usize, usize) {
    let r = k / 2;
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Window sums along rows, then along columns, of one `h x w` plane.
fn box_sum<T: Scalar>(src: &[T], dst: &mut [T], tmp: &mut [T], k: usize, h: usize, w: usize) {
    for (row, out) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        for (ow, o) in out.iter_mut().enumerate() {
            let (w0, w1) = same_window(ow, k, w);
            *o = row[w0..w1].iter().copied().sum();
        }
    }
    for (oh, out) in dst.chunks_exact_mut(w).enumerate() {
        let (h0, h1) = same_window(oh, k, h);
        out.copy_from_slice(&tmp[h0 * w..(h0 + 1) * w]);
        for ih in h0 + 1..h1 {
            for (o, &t) in out.iter_mut().zip(&tmp[ih * w..(ih + 1) * w]) {
                *o += t;
            }
        }
    }
}

/// In-bounds tap count of every output position.
fn same_counts<T: Scalar>(k: usize, h: usize, w: usize) -> Vec<T> {
    let span = |i, len| {
        let (a, b) = same_window(i, k, len);
        b - a
    };
    (0..h * w).map(|i| T::of((span(i / w, h) * span(i % w, w)) as f64)).collect()
}

fn check_odd(k: usize) -> Result<()> {
    match k % 2 {
        1 => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "avg_pool_same: kernel size must be odd, got {k}"
        ))),
    }
}

/// Stride-1 average pooling with `(k-1)/2` padding whose divisor counts only
/// in-bounds taps. Output shape equals input shape.
pub fn avg_pool_same_forward<T: Scalar>(x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    check_odd(k)?;
    let s = x.shape();
    let counts = same_counts::<T>(k, s.h, s.w);
    let mut out = Tensor4::zeros(s);
    out.data_mut()
        .par_chunks_mut(s.plane())
        .zip(x.data().par_chunks(s.plane()))
        .for_each_init(
            || (vec![T::zero(); s.plane()], vec![T::zero(); s.plane()]),
            |(shifted, tmp), (dst, src)| {
                // Offsets from one anchor keep constant planes exact.
                let anchor = src[0];
                for (d, &v) in shifted.iter_mut().zip(src) {
                    *d = v - anchor;
                }
                box_sum(shifted, dst, tmp, k, s.h, s.w);
                for (d, &c) in dst.iter_mut().zip(&counts) {
                    *d = anchor + *d / c;
                }
            },
        );
    Ok(out)
}

pub fn avg_pool_same_backward<T: Scalar>(k: usize, gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    let s = gout.shape();
    let counts = same_counts::<T>(k, s.h, s.w);
    dx.data_mut()
        .par_chunks_mut(s.plane())
        .zip(gout.data().par_chunks(s.plane()))
        .for_each_init(
            || (vec![T::zero(); s.plane()], vec![T::zero(); s.plane()], vec![T::zero(); s.plane()]),
            |(share, tmp, sum), (dst, g)| {
                for ((d, &v), &c) in share.iter_mut().zip(g).zip(&counts) {
                    *d = v / c;
                }
                box_sum(share, sum, tmp, k, s.h, s.w);
                for (d, &v) in dst.iter_mut().zip(sum.iter()) {
                    *d += v;
                }
            },
        );
}

/// Region `[lo, hi)` of adaptive bin `i` out of `bins` over `len` pixels.
#[inline]
pub fn adaptive_region(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let lo = i * len / bins;
    let hi = ((i + 1) * len).div_ceil(bins);
    (lo, hi)
}

/// Adaptive average pooling to `bins x bins`.
pub fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor4<T>, bins: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if bins == 0 || bins > s.h || bins > s.w {
        return Err(Error::InvalidArgument(format!(
            "adaptive_avg_pool: {bins} bins do not fit spatial size {}x{}",
            s.h, s.w
        )));
    }
    let out_shape = s.with_hw(bins, bins);
    let mut out = Vec::with_capacity(out_shape.numel());
    for p in 0..s.n * s.c {
        let src = &x.data()[p * s.plane()..(p + 1) * s.plane()];
        for bh in 0..bins {
            let (h0, h1) = adaptive_region(bh, bins, s.h);
            for bw in 0..bins {
                let (w0, w1) = adaptive_region(bw, bins, s.w);
                let anchor = src[h0 * s.w + w0];
                let mut acc = T::zero();
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += src[ih * s.w + iw] - anchor;
                    }
                }
                out.push(anchor + acc / T::of(((h1 - h0) * (w1 - w0)) as f64));
            }
        }
    }
    Tensor4::from_vec(out_shape, out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    let s = dx.shape();
    let bins = gout.shape().h;
    let dxd = dx.data_mut();
    for p in 0..s.n * s.c {
        let dst = &mut dxd[p * s.plane()..(p + 1) * s.plane()];
        let g = &gout.data()[p * bins * bins..(p + 1) * bins * bins];
        for bh in 0..bins {
            let (h0, h1) = adaptive_region(bh, bins, s.h);
            for bw in 0..bins {
                let (w0, w1) = adaptive_region(bw, bins, s.w);
                let share = g[bh * bins + bw] / T::of(((h1 - h0) * (w1 - w0)) as f64);
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        dst[ih * s.w + iw] += share;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour resize to `out_h x out_w` (`src = floor(dst * in / out)`).
pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Tensor4<T> {
    let s = x.shape();
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Tensor4::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.plane())
        .enumerate()
        .for_each(|(p, dst)| {
            let src = &x.data()[p * s.plane()..(p + 1) * s.plane()];
            for oh in 0..out_h {
                let ih = oh * s.h / out_h;
                for ow in 0..out_w {
                    dst[oh * out_w + ow] = src[ih * s.w + ow * s.w / out_w];
                }
            }
        });
    out
}

pub fn upsample_nearest_backward<T: Scalar>(gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    let s = dx.shape();
    let o = gout.shape();
    dx.data_mut()
        .par_chunks_mut(s.plane())
        .enumerate()
        .for_each(|(p, dst)| {
            let g = &gout.data()[p * o.plane()..(p + 1) * o.plane()];
            for oh in 0..o.h {
                let ih = oh * s.h / o.h;
                for ow in 0..o.w {
                    dst[ih * s.w + ow * s.w / o.w] += g[oh * o.w + ow];
                }
            }
        });
}

/// Per-position statistics saved by [`layer_norm_forward`].
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization across channels at every `(n, h, w)` position.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, NormCache<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shapes(
            "channel_layernorm",
            format!("input {s}"),
            format!("gamma[{}] beta[{}]", gamma.len(), beta.len()),
        ));
    }
    let eps = T::of(eps);
    let c_inv = T::one() / T::of(s.c as f64);
    let hw = s.plane();
    let mut out = Tensor4::zeros(s);
    let mut xhat = vec![T::zero(); s.numel()];
    let mut rstd = vec![T::zero(); s.n * hw];
    out.data_mut()
        .par_chunks_mut(s.item())
        .zip(xhat.par_chunks_mut(s.item()))
        .zip(rstd.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(n, ((y, xh), rs))| {
            let xi = x.item(n);
            let mut mean = vec![T::zero(); hw];
            for plane in xi.chunks(hw) {
                for (m, &v) in mean.iter_mut().zip(plane) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= c_inv);
            let mut var = vec![T::zero(); hw];
            for plane in xi.chunks(hw) {
                for ((acc, &v), &m) in var.iter_mut().zip(plane).zip(&mean) {
                    let d = v - m;
                    *acc += d * d;
                }
            }
            for (r, &v) in rs.iter_mut().zip(&var) {
                *r = T::one() / (v * c_inv + eps).sqrt();
            }
            for c in 0..s.c {
                let src = &xi[c * hw..(c + 1) * hw];
                let xh_c = &mut xh[c * hw..(c + 1) * hw];
                let y_c = &mut y[c * hw..(c + 1) * hw];
                for i in 0..hw {
                    let v = (src[i] - mean[i]) * rs[i];
                    xh_c[i] = v;
                    y_c[i] = gamma[c] * v + beta[c];
                }
            }
        });
    Ok((out, NormCache { xhat, rstd }))
}

/// Accumulates into `dx` (if given), `dgamma` and `dbeta`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    gout: &Tensor4<T>,
    dx: Option<&mut Tensor4<T>>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let s = gout.shape();
    let hw = s.plane();
    for n in 0..s.n {
        let go = gout.item(n);
        let xh = &cache.xhat[n * s.item()..(n + 1) * s.item()];
        for c in 0..s.c {
            let g = &go[c * hw..(c + 1) * hw];
            let x = &xh[c * hw..(c + 1) * hw];
            dgamma[c] += g.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
            dbeta[c] += g.iter().copied().sum::<T>();
        }
    }
    let Some(dx) = dx else { return };
    let c_inv = T::one() / T::of(s.c as f64);
    dx.data_mut()
        .par_chunks_mut(s.item())
        .enumerate()
        .for_each(|(n, dxi)| {
            let go = gout.item(n);
            let xh = &cache.xhat[n * s.item()..(n + 1) * s.item()];
            let rs = &cache.rstd[n * hw..(n + 1) * hw];
            let mut mean_g = vec![T::zero(); hw];
            let mut mean_gx = vec![T::zero(); hw];
            for c in 0..s.c {
                for i in 0..hw {
                    let gh = go[c * hw + i] * gamma[c];
                    mean_g[i] += gh;
                    mean_gx[i] += gh * xh[c * hw + i];
                }
            }
            for i in 0..hw {
                mean_g[i] *= c_inv;
                mean_gx[i] *= c_inv;
            }
            for c in 0..s.c {
                for i in 0..hw {
                    let gh = go[c * hw + i] * gamma[c];
                    dxi[c * hw + i] += rs[i] * (gh - mean_g[i] - xh[c * hw + i] * mean_gx[i]);
                }
            }
        });
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`, also returning `sigmoid(x)` for the backward pass.
pub fn swish_forward<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let mut sig = Tensor4::zeros(x.shape());
    T::sigmoid_slice(x.data(), sig.data_mut());
    let mut out = x.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(sig.data()) {
        *o *= s;
    }
    (out, sig)
}

pub fn swish_backward<T: Scalar>(x: &Tensor4<T>, sig: &Tensor4<T>, gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    for (((d, &x), &s), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(sig.data()).zip(gout.data()) {
        *d += g * s * (T::one() + x * (T::one() - s));
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, gout: &Tensor4<T>, dx: &mut Tensor4<T>) {
    for ((d, &x), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(gout.data()) {
        if x > T::zero() {
            *d += g;
        }
    }
}

/// Concatenate along channels, `a` first.
pub fn concat_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shapes("concat_channels", sa, sb));
    }
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor4::from_vec(sa.with_c(sa.c + sb.c), data)
}

/// Route a concat gradient back into its two inputs; `a_channels` is the
/// channel count of the first input.
pub fn concat_backward<T: Scalar>(
    gout: &Tensor4<T>,
    a_channels: usize,
    mut da: Option<&mut Tensor4<T>>,
    mut db: Option<&mut Tensor4<T>>,
) {
    let s = gout.shape();
    let split = a_channels * s.plane();
    for n in 0..s.n {
        let (ga, gb) = gout.item(n).split_at(split);
        if let Some(da) = da.as_deref_mut() {
            let dst = &mut da.data_mut()[n * split..(n + 1) * split];
            dst.iter_mut().zip(ga).for_each(|(x, &y)| *x += y);
        }
        if let Some(db) = db.as_deref_mut() {
            let len = gb.len();
            let dst = &mut db.data_mut()[n * len..(n + 1) * len];
            dst.iter_mut().zip(gb).for_each(|(x, &y)| *x += y);
        }
    }
}

pub fn add_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn sub_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("sub", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *x -= y;
    }
    Ok(out)
}

/// Mean binary cross-entropy on logits and `d loss / d logits`.
///
/// Uses `max(x, 0) - x*t + ln(1 + exp(-|x|))`; the sum is accumulated in
/// `f64` in element order.
pub fn bce_with_logits<T: Scalar>(
    logits: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(f64, Tensor4<T>)> {
    if logits.shape() != target.shape() {
        return Err(Error::shapes("bce_with_logits", logits.shape(), target.shape()));
    }
    if let Some(bad) = target
        .data()
        .iter()
        .find(|t| !(**t >= T::zero() && **t <= T::one()))
    {
        return Err(Error::InvalidArgument(format!(
            "bce_with_logits: target value {bad} outside [0, 1]"
        )));
    }
    let count = logits.shape().numel() as f64;
    let mut total = 0.0f64;
    let inv = T::of(1.0 / count);
    let mut grad = Tensor4::zeros(logits.shape());
    for ((g, &x), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        let xf = x.as_f64();
        let tf = t.as_f64();
        total += xf.max(0.0) - xf * tf + (-xf.abs()).exp().ln_1p();
        *g = (sigmoid(x) - t) * inv;
    }
    if super::tape::faulty(super::OpKind::BceWithLogits) {
        grad = grad.map(|v| v * T::of(1.5));
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_overlapping_taps() {
        let x = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0f64);
        let g = ConvGeom::new([1, 1, 3, 3], 1, Padding::same(1));
        let y = conv2d_forward(&x, &[1.0; 9], Some(&[0.0]), &g).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = Tensor4::from_fn(Shape4::new(2, 1, 4, 5), |n, _, h, w| (n + 3 * h + 7 * w) as f64 * 0.1);
        let g = ConvGeom::new([1, 1, 1, 1], 1, Padding::ZERO);
        let y = conv2d_forward(&x, &[1.0], Some(&[0.0]), &g).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_output_dims_and_errors() {
        let g = ConvGeom::new([8, 3, 3, 3], 2, Padding::same(1));
        assert_eq!(
            g.output_shape(Shape4::new(1, 3, 9, 8)).unwrap(),
            Shape4::new(1, 8, 5, 4)
        );
        let err = g.output_shape(Shape4::new(1, 4, 9, 8)).unwrap_err().to_string();
        assert!(err.contains("1x4x9x8") && err.contains("8x3x3x3"), "{err}");
        let g = ConvGeom::new([1, 1, 5, 5], 1, Padding::ZERO);
        assert!(matches!(
            g.output_shape(Shape4::new(1, 1, 3, 3)),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor4::from_fn(Shape4::new(2, 3, 5, 6), |n, c, h, w| {
            ((n * 31 + c * 17 + h * 7 + w * 3) % 11) as f64 - 5.0
        });
        let wt: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let b = [0.5, -1.0, 2.0, 0.0];
        let g = ConvGeom::new([4, 3, 3, 3], 2, Padding { top: 1, left: 0, bottom: 1, right: 2 });
        let y = conv2d_forward(&x, &wt, Some(&b), &g).unwrap();
        let os = y.shape();
        for n in 0..2 {
            for co in 0..4 {
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    let ih = (oh * 2 + i) as isize - 1;
                                    let iw = (ow * 2 + j) as isize;
                                    if (0..5).contains(&ih) && iw < 6 {
                                        acc += wt[((co * 3 + ci) * 3 + i) * 3 + j]
                                            * x.at(n, ci, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        assert_eq!(y.at(n, co, oh, ow), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn batched_conv_backward_matches_item_by_item() {
        for geom in [
            ConvGeom::new([5, 3, 3, 3], 1, Padding::same(1)),
            ConvGeom::new([5, 3, 1, 1], 1, Padding::ZERO),
        ] {
            let x = Tensor4::from_fn(Shape4::new(3, 3, 4, 3), |n, c, h, w| ((n * 5 + c * 3 + h * 2 + w) % 7) as f64 - 3.0);
            let wt: Vec<f64> = (0..5 * geom.patch()).map(|i| ((i * 11) % 5) as f64 - 2.0).collect();
            let gout = Tensor4::from_fn(geom.output_shape(x.shape()).unwrap(), |n, c, h, w| ((n + c * 2 + h + w * 3) % 5) as f64 - 2.0);
            let mut dx = Tensor4::zeros(x.shape());
            let mut dw = vec![0.0; wt.len()];
            conv2d_backward_input(x.shape(), &wt, &geom, &gout, &mut dx);
            conv2d_backward_weight(&x, &geom, &gout, &mut dw);
            let mut dw_items = vec![0.0; wt.len()];
            for n in 0..3 {
                let xi = x.slice_item(n);
                let mut dxi = Tensor4::zeros(xi.shape());
                conv2d_backward_input(xi.shape(), &wt, &geom, &gout.slice_item(n), &mut dxi);
                conv2d_backward_weight(&xi, &geom, &gout.slice_item(n), &mut dw_items);
                assert_eq!(dxi.data(), dx.item(n));
            }
            assert_eq!(dw, dw_items);
        }
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad_to_argmax() {
        let x = t(Shape4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let mut dx = Tensor4::zeros(x.shape());
        max_pool2d_backward(&arg, &Tensor4::full(y.shape(), 1.0), &mut dx);
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first_element() {
        let x = Tensor4::full(Shape4::new(1, 2, 4, 4), 3.25f64);
        let (y, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
        assert_eq!(&arg[..2], &[0, 2]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 5, 4));
        assert!(matches!(
            max_pool2d_forward(&x, 2, 2),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn avgpool_border_divisor_excludes_padding() {
        let x = t(Shape4::new(1, 1, 1, 3), &[0.0, 3.0, 0.0]);
        let y = avg_pool_same_forward(&x, 3).unwrap();
        assert_eq!(y.data(), &[1.5, 1.0, 1.5]);
        let one = t(Shape4::new(1, 1, 1, 1), &[0.37]);
        assert_eq!(avg_pool_same_forward(&one, 3).unwrap(), one);
        assert!(avg_pool_same_forward(&x, 2).is_err());
    }

    #[test]
    fn avgpool_constant_is_bit_exact() {
        for c in [0.1f32, 1.0 / 3.0, -7.77, 1e-30] {
            let x = Tensor4::full(Shape4::new(2, 3, 5, 7), c);
            assert_eq!(avg_pool_same_forward(&x, 3).unwrap(), x);
            assert_eq!(avg_pool_same_forward(&x, 5).unwrap(), x);
        }
    }

    #[test]
    fn layernorm_two_channels_normalize_to_unit() {
        let x = t(Shape4::new(1, 2, 1, 1), &[1.0, 3.0]);
        let (y, _) = layer_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layernorm_zero_variance_and_affine_collapse() {
        let x = Tensor4::full(Shape4::new(1, 4, 2, 2), 2.5f64);
        let (y, _) = layer_norm_forward(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
        let x = Tensor4::from_fn(Shape4::new(1, 3, 2, 2), |_, c, h, w| (c * 5 + h + w) as f64);
        let (y, _) = layer_norm_forward(&x, &[0.0; 3], &[0.25, -1.0, 4.0], 1e-5).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(y.at(0, 0, h, w), 0.25);
                assert_eq!(y.at(0, 1, h, w), -1.0);
                assert_eq!(y.at(0, 2, h, w), 4.0);
            }
        }
        let c1 = Tensor4::full(Shape4::new(1, 1, 1, 1), 9.0f64);
        let (y, _) = layer_norm_forward(&c1, &[1.0], &[0.0], 1e-5).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn swish_values() {
        let x = t(Shape4::new(1, 1, 1, 3), &[0.0, 1.0, -80.0]);
        let (y, sig) = swish_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_578_630_005).abs() < 1e-6);
        assert!(y.data()[2].is_finite() && y.data()[2] <= 0.0);
        let mut dx = Tensor4::zeros(x.shape());
        swish_backward(&x, &sig, &Tensor4::full(x.shape(), 1.0), &mut dx);
        assert_eq!(dx.data()[0], 0.5);
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let x = t(Shape4::new(1, 1, 1, 1), &[2.5]);
        let y = upsample_nearest_forward(&x, 2, 2);
        assert_eq!(y.data(), &[2.5; 4]);
        let mut dx = Tensor4::zeros(x.shape());
        upsample_nearest_backward(&Tensor4::full(y.shape(), 1.0), &mut dx);
        assert_eq!(dx.data(), &[4.0]);
    }

    #[test]
    fn concat_orders_a_first_and_rejects_spatial_mismatch() {
        let a = Tensor4::full(Shape4::new(1, 2, 4, 4), 1.0f64);
        let b = Tensor4::full(Shape4::new(1, 3, 4, 4), 2.0f64);
        let y = concat_forward(&a, &b).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 5, 4, 4));
        assert_eq!(y.at(0, 0, 3, 3), 1.0);
        assert_eq!(y.at(0, 2, 0, 0), 2.0);
        let bad = Tensor4::full(Shape4::new(1, 3, 4, 2), 2.0f64);
        let err = concat_forward(&a, &bad).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x4x2"), "{err}");
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let g = Tensor4::from_fn(Shape4::new(2, 5, 2, 3), |n, c, h, w| (n * 100 + c * 10 + h * 3 + w) as f64);
        let mut da = Tensor4::zeros(Shape4::new(2, 2, 2, 3));
        let mut db = Tensor4::zeros(Shape4::new(2, 3, 2, 3));
        concat_backward(&g, 2, Some(&mut da), Some(&mut db));
        assert_eq!(concat_forward(&da, &db).unwrap(), g);
    }

    #[test]
    fn bce_reference_values() {
        let s = Shape4::new(1, 1, 2, 2);
        let (loss, grad) = bce_with_logits(&Tensor4::zeros(s), &t(s, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad.data()[1], -0.125);
        let one = Shape4::new(1, 1, 1, 1);
        let (loss, _) = bce_with_logits(&t(one, &[20.0]), &t(one, &[1.0])).unwrap();
        assert!(loss < 1e-8);
        let (_, g) = bce_with_logits(&t(one, &[0.0]), &t(one, &[1.0])).unwrap();
        assert_eq!(g.data()[0], -0.5);
        assert!(bce_with_logits(&t(one, &[0.0]), &t(one, &[1.5])).is_err());
    }

    #[test]
    fn adaptive_regions_cover_and_single_bin_is_global_mean() {
        for len in 1..20 {
            for bins in 1..=len {
                let mut covered = vec![0; len];
                for i in 0..bins {
                    let (lo, hi) = adaptive_region(i, bins, len);
                    assert!(lo < hi);
                    (lo..hi).for_each(|p| covered[p] += 1);
                }
                assert!(covered.iter().all(|&c| c >= 1));
            }
        }
        let x = Tensor4::from_fn(Shape4::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f64);
        let y = adaptive_avg_pool_forward(&x, 1).unwrap();
        assert_eq!(y.data(), &[7.5]);
    }
}
