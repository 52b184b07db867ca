//! Central finite-difference verification of adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so that gradients that are
    /// both essentially zero do not report huge relative errors.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples_per_param: 24,
            seed: 7,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the tape's gradients of `f` against central differences
/// `(f(w + eps) - f(w - eps)) / 2eps` on sampled coordinates of `params`.
///
/// `f` must be deterministic. Parameter values are restored on return.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    config: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(EngineError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for &id in params {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= config.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, config.samples_per_param).into_vec()
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let original = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = original + config.eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[c] = original - config.eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * config.eps);

            let denom = analytic.abs().max(numeric.abs()).max(config.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), c));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.7)).unwrap();
        let report = grad_check(&mut store, &[w], GradCheckConfig::default(), |t| {
            let p = t.param(w)?;
            t.scale(p, 3.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(store.value(w).item(), 0.7);
    }
}
