//! Finite-difference gradient verification.
//!
//! The checker treats the loss as a black-box function of a parameter
//! store, so it exercises the full forward/backward stack exactly as
//! training does. Central differences are used; comparisons are made in
//! relative terms with an absolute floor for near-zero entries.

use ndarray::ArrayD;

use super::layers::{ParamId, ParamStore};

/// One compared coordinate: analytic vs numeric partial derivative.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` must be a pure function of the parameter store (no running-state
/// updates). `coords` lists `(param, flat_index)` pairs to probe; `grads`
/// holds the analytic gradient per parameter in store order, with `None`
/// meaning zero.
pub fn check_param_grads(
    params: &mut ParamStore,
    grads: &[Option<ArrayD<f64>>],
    coords: &[(usize, usize)],
    eps: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel = 0.0f64;
    for &(pi, idx) in coords {
        let orig = params.array(ParamId(pi)).as_slice().unwrap()[idx];
        params.array_mut(ParamId(pi)).as_slice_mut().unwrap()[idx] = orig + eps;
        let lp = loss(params);
        params.array_mut(ParamId(pi)).as_slice_mut().unwrap()[idx] = orig - eps;
        let lm = loss(params);
        params.array_mut(ParamId(pi)).as_slice_mut().unwrap()[idx] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads[pi]
            .as_ref()
            .map(|ga| ga.as_slice().unwrap()[idx])
            .unwrap_or(0.0);
        let re = rel_err(analytic, numeric, floor);
        max_rel = max_rel.max(re);
        entries.push(GradCheckEntry { param: pi, index: idx, analytic, numeric, rel_err: re });
    }
    GradCheckReport { checked: entries.len(), entries, max_rel_err: max_rel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ops, Graph};
    use ndarray::arr2;

    #[test]
    fn quadratic_loss_gradient_matches() {
        let mut ps = ParamStore::new();
        let w = ps.alloc("w", arr2(&[[0.5, -1.0], [2.0, 0.25]]).into_dyn());
        let loss_fn = |ps: &ParamStore| {
            let mut g = Graph::new(false);
            let wv = g.leaf(ps.array(w).clone());
            let sq = ops::square(&mut g, wv);
            let l = ops::sum_all(&mut g, sq);
            g.scalar(l)
        };
        let mut g = Graph::new(true);
        let wv = g.leaf(ps.array(w).clone());
        let sq = ops::square(&mut g, wv);
        let l = ops::sum_all(&mut g, sq);
        let grads = g.backward(l);
        let stored = vec![grads.get(wv).cloned()];
        let coords: Vec<(usize, usize)> = (0..4).map(|i| (0, i)).collect();
        let report = check_param_grads(&mut ps, &stored, &coords, 1e-5, 1e-8, loss_fn);
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }
}
