use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the engine.
///
/// `f32` is used for training, `f64` for gradient checking.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are
    /// `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Element-wise logistic function.
    fn sigmoid_slice(src: &[Self], dst: &mut [Self]) {
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = super::ops::sigmoid(x);
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path $(, $extra:item)*) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;
            $($extra)*

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                assert!(a.len() >= span(m, k, a_strides), "gemm: a too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: b too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: c too short");
                // SAFETY: every index reachable through the given strides was
                // bounds-checked above; `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

/// `exp(x)` for `x <= 0`, within about two ulp; written branch-free so the
/// slice loops vectorize.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let k = x * std::f32::consts::LOG2_E + ROUND;
    let n = k - ROUND;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    // the low mantissa bits of `k` hold `n`
    e * f32::from_bits(k.to_bits().wrapping_add(127) << 23)
}

impl_scalar!(
    f32,
    "f32",
    matrixmultiply::sgemm,
    fn sigmoid_slice(src: &[f32], dst: &mut [f32]) {
        for (d, &x) in dst.iter_mut().zip(src) {
            let e = exp_nonpositive(-x.abs());
            let t = 1.0 / (1.0 + e);
            let lo = e * t;
            *d = if x >= 0.0 { t } else { lo };
        }
    }
);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sigmoid_tracks_the_exact_one() {
        let xs: Vec<f32> = (-2000..=2000).map(|i| i as f32 * 0.05).chain([-1e30, -90.0, 90.0, 1e30]).collect();
        let mut fast = vec![0.0; xs.len()];
        f32::sigmoid_slice(&xs, &mut fast);
        for (&x, &f) in xs.iter().zip(&fast) {
            let exact = 1.0 / (1.0 + (-(x as f64)).exp());
            let err = (f as f64 - exact).abs() / exact.max(1e-30);
            assert!(err < 1e-6 || exact < 1e-37, "x {x}: {f} vs {exact}");
        }
    }

    #[test]
    fn gemm_matches_naive_with_transposed_b() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let bt: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // stored 4x3, used as 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &bt, (1, 3), 1.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * bt[j * 3 + p]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}
