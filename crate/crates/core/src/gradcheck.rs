//! Central finite-difference check of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

/// Below this magnitude both gradients are compared by absolute error.
pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Compares the gradient slots of `params` against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every scalar entry.
/// Parameter values are restored before returning.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &mut ParamStore, eps: f64) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_fn(params);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_fn(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(params.grad(id).data()[i], numeric);
            report.entries += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(store: &ParamStore) -> f64 {
        store.slots().iter().map(|s| s.value.sq_norm()).sum()
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let mut s = ParamStore::new();
        let id = s.insert("theta", Tensor::vector(vec![0.3, -1.2, 2.5]));
        let g = Tensor::vector(s.get(id).data().iter().map(|v| 2.0 * v).collect());
        s.accumulate(id, &g);
        let r = finite_diff_check(quadratic, &mut s, 1e-6);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.entries, 3);
        assert_eq!(s.get(id).data(), &[0.3, -1.2, 2.5]);
    }

    #[test]
    fn stationary_point_uses_absolute_error() {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::vector(vec![0.0, 0.0]));
        let r = finite_diff_check(quadratic, &mut s, 1e-6);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut s = ParamStore::new();
        let id = s.insert("theta", Tensor::vector(vec![1.0]));
        s.accumulate(id, &Tensor::vector(vec![3.0]));
        let r = finite_diff_check(quadratic, &mut s, 1e-6);
        assert!(r.max_rel_error > 0.3);
        assert_eq!(r.worst, Some(("theta".to_string(), 0)));
    }
}
