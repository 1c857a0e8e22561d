use crate::engine::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Binarization threshold on `sigmoid(logit)`.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel counts for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.predicted + self.truth - self.intersection
    }

    /// `1.0` when both masks are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }

    /// `1.0` when both masks are empty.
    pub fn dice(&self) -> f64 {
        match self.predicted + self.truth {
            0 => 1.0,
            s => 2.0 * self.intersection as f64 / s as f64,
        }
    }
}

/// Logit cut-off equivalent to `sigmoid(x) > threshold`.
fn logit_cut(threshold: f64) -> f64 {
    (threshold / (1.0 - threshold)).ln()
}

/// Per-item overlaps; a pixel is predicted foreground when
/// `sigmoid(logit) > threshold`.
pub fn overlaps<T: Scalar>(logits: &Tensor4<T>, gt: &Tensor4<T>, threshold: f64) -> Result<Vec<Overlap>> {
    if logits.shape() != gt.shape() {
        return Err(Error::shapes("iou/dice", logits.shape(), gt.shape()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0,1), got {threshold}"
        )));
    }
    let cut = logit_cut(threshold);
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let mut o = Overlap::default();
            for (&p, &g) in logits.item(n).iter().zip(gt.item(n)) {
                let truth = match g.as_f64() {
                    1.0 => true,
                    0.0 => false,
                    v => {
                        return Err(Error::InvalidArgument(format!(
                            "ground-truth mask must be binary, found {v}"
                        )))
                    }
                };
                let pred = p.as_f64() > cut;
                o.intersection += (pred && truth) as usize;
                o.predicted += pred as usize;
                o.truth += truth as usize;
            }
            Ok(o)
        })
        .collect()
}

/// Mean per-item IoU.
pub fn iou<T: Scalar>(logits: &Tensor4<T>, gt: &Tensor4<T>, threshold: f64) -> Result<f64> {
    let o = overlaps(logits, gt, threshold)?;
    Ok(o.iter().map(Overlap::iou).sum::<f64>() / o.len() as f64)
}

/// Mean per-item Dice.
pub fn dice<T: Scalar>(logits: &Tensor4<T>, gt: &Tensor4<T>, threshold: f64) -> Result<f64> {
    let o = overlaps(logits, gt, threshold)?;
    Ok(o.iter().map(Overlap::dice).sum::<f64>() / o.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape4;

    fn halves() -> (Tensor4<f32>, Tensor4<f32>) {
        let s = Shape4::new(1, 1, 4, 4);
        let pred = Tensor4::from_fn(s, |_, _, _, x| if x < 2 { 9.0 } else { -9.0 });
        let gt = Tensor4::from_fn(s, |_, _, y, _| (y < 2) as u8 as f32);
        (pred, gt)
    }

    #[test]
    fn half_overlap() {
        let (p, g) = halves();
        assert_eq!(iou(&p, &g, 0.5).unwrap(), 4.0 / 12.0);
        assert_eq!(dice(&p, &g, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn both_empty_is_perfect() {
        let z = Tensor4::<f32>::full(Shape4::new(2, 1, 3, 3), -5.0);
        let g = Tensor4::zeros(z.shape());
        assert_eq!(iou(&z, &g, 0.5).unwrap(), 1.0);
        assert_eq!(dice(&z, &g, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn rejects_shape_mismatch_and_soft_truth() {
        let (p, _) = halves();
        assert!(iou(&p, &Tensor4::zeros(Shape4::new(1, 1, 4, 3)), 0.5).is_err());
        assert!(iou(&p, &Tensor4::full(p.shape(), 0.5), 0.5).is_err());
    }

    #[test]
    fn threshold_moves_the_cut() {
        let p = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![0.1f32, 1.5]).unwrap();
        let g = Tensor4::from_vec(p.shape(), vec![0.0, 1.0]).unwrap();
        assert_eq!(iou(&p, &g, 0.5).unwrap(), 0.5);
        assert_eq!(iou(&p, &g, 0.7).unwrap(), 1.0);
    }
}
