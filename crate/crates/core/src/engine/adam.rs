use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Adam optimizer state (bias-corrected).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken so far.
    pub t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        let s = AdamState {
            lr,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }

    /// Apply one update to every parameter and zero the gradients.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for p in store.iter_mut() {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                let m = b1 * p.m[i] + one_b1 * g;
                let v = b2 * p.v[i] + one_b2 * g * g;
                p.m[i] = m;
                p.v[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(crate::engine::ParamTensor::new("p", vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(&[1.0, -2.0, 0.5]);
        let id = s.id("p").unwrap();
        s.get_mut(id).grad.copy_from_slice(&[3.0, -0.25, 1e-3]);
        let mut adam = AdamState {
            lr: 1e-3,
            eps: 1e-12,
            ..Default::default()
        };
        adam.step(&mut s);
        let p = s.get(id);
        for (after, (before, sign)) in p.value.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((after - (before - 1e-3 * sign)).abs() < 1e-9, "{after}");
        }
        assert!(p.grad.iter().all(|&g| g == 0.0));
        assert!(p.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_grad_leaves_params_but_counts_step() {
        let mut s = store(&[1.0, 2.0]);
        let mut adam = AdamState::default();
        adam.step(&mut s);
        assert_eq!(adam.t, 1);
        assert_eq!(s.get(s.id("p").unwrap()).value, vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(AdamState::new(-1.0).is_err());
        let bad = AdamState {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
