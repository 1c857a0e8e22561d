use rand::Rng;

use super::ParamStore;
use crate::error::{Error, Result};

/// One compared gradient entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences
/// `(f(x + h) - f(x - h)) / 2h` on randomly probed parameter entries.
///
/// `loss` evaluates the scalar objective on the current parameter values; when
/// its flag is `true` it must also accumulate gradients into the store.
/// Probes are spread round-robin over the parameters, at a random entry of
/// each.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    probe_count: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    if store.is_empty() {
        return Err(Error::InvalidArgument("gradcheck: no parameters".into()));
    }
    store.zero_grad();
    let base = loss(store, true)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "gradcheck at unperturbed parameters".into(),
        });
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let ids: Vec<_> = store.ids().collect();
    let offset = rng.gen_range(0..ids.len());
    let mut probes = Vec::with_capacity(probe_count);
    for k in 0..probe_count {
        let id = ids[(offset + k) % ids.len()];
        let index = rng.gen_range(0..store.get(id).numel());
        let original = store.get(id).value[index];

        store.get_mut(id).value[index] = original + h;
        let plus = loss(store, false)?;
        store.get_mut(id).value[index] = original - h;
        let minus = loss(store, false)?;
        store.get_mut(id).value[index] = original;

        let name = store.get(id).name.clone();
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("gradcheck probe {name}[{index}]"),
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id.index()][index];
        probes.push(Probe {
            param: name,
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradcheckReport { probes })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::ParamTensor;

    #[test]
    fn quadratic_loss_matches_to_roundoff() {
        let mut store = ParamStore::new();
        let vals: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.2).collect();
        store.insert(ParamTensor::new("x", vec![10], vals).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = gradcheck(
            &mut store,
            |s, grad| {
                let p = s.get_mut(s.id("x").unwrap());
                if grad {
                    for (g, &v) in p.grad.iter_mut().zip(&p.value) {
                        *g += v;
                    }
                }
                Ok(0.5 * p.value.iter().map(|v| v * v).sum::<f64>())
            },
            20,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.probes.len(), 20);
        assert!(report.max_rel_error() < 1e-9, "{:?}", report.worst());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut store = ParamStore::new();
        store.insert(ParamTensor::new("enc.w", vec![1], vec![0.0]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = gradcheck(
            &mut store,
            |s, _| {
                let v = s.get(s.id("enc.w").unwrap()).value[0];
                Ok(if v > 0.0 { f64::NAN } else { v })
            },
            1,
            1e-5,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("enc.w[0]"), "{err}");
    }
}
