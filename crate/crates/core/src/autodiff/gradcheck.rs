use rand::seq::index::sample;
use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve them relative to round-off in the loss.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients currently held in `store` against central
/// differences `(f(θ+h) - f(θ-h)) / 2h` at each listed coordinate.
///
/// `f` must be deterministic. Every perturbed value is restored bit-exactly.
pub fn finite_diff_check<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &(id, idx) in coords {
        let analytic = store
            .get(id)
            .grad()
            .ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?[idx];
        let original = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = original + h;
        let up = f(store);
        store.get_mut(id).data_mut()[idx] = original - h;
        let down = f(store);
        store.get_mut(id).data_mut()[idx] = original;
        let numeric = (up? - down?) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(Mismatch {
                param: store.name(id).to_string(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

/// Up to `per_param` distinct random coordinates from each listed parameter.
pub fn sample_coords<R: Rng + ?Sized>(store: &ParamStore, ids: &[ParamId], per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let n = store.get(id).len();
        let k = per_param.min(n);
        let mut idx = sample(rng, n, k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (id, i)));
    }
    out
}

/// Like [`sample_coords`], but draws first from coordinates whose current
/// gradient is nonzero, so sparse tables (embeddings) are probed where the
/// loss actually depends on them. Falls back to arbitrary coordinates when a
/// parameter has fewer active entries than `per_param`.
pub fn sample_active_coords<R: Rng + ?Sized>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let t = store.get(id);
        let (active, idle): (Vec<usize>, Vec<usize>) = match t.grad() {
            Some(gr) => (0..t.len()).partition(|&i| gr[i] != 0.0),
            None => (Vec::new(), (0..t.len()).collect()),
        };
        let mut picked: Vec<usize> = sample(rng, active.len(), per_param.min(active.len()))
            .into_iter()
            .map(|i| active[i])
            .collect();
        let rest = per_param.saturating_sub(picked.len()).min(idle.len());
        picked.extend(sample(rng, idle.len(), rest).into_iter().map(|i| idle[i]));
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (id, i)));
    }
    out
}
