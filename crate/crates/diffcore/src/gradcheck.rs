//! Central-difference gradient checking against tape gradients.


use crate::store::ParamStore;
use crate::tape::Gradients;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar loss value plus the analytic gradients that produced it.
pub struct LossEval {
    pub value: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over sampled coordinates of |analytic - central| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates where the function was non-finite at a perturbed point.
    pub coords_skipped: usize,
}

/// Compares analytic gradients with central differences at `point`.
///
/// Per trainable parameter, up to `max_coords_per_param` coordinates are
/// sampled (all of them when the tensor is small enough). Coordinates at
/// which the perturbed function fails or is non-finite are skipped and
/// counted. Generic over the callback's error type.
pub fn grad_check<F, E>(
    f: F,
    point: &ParamStore,
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&ParamStore) -> std::result::Result<LossEval, E>,
{
    assert!(eps > 0.0, "grad_check requires eps > 0");
    let base = f(point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
    };

    let names: Vec<String> = point
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let len = point.get(&name).unwrap().len();
        let coords: Vec<usize> = if len <= max_coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, max_coords_per_param).into_vec()
        };
        for ci in coords {
            let mut plus = point.clone();
            plus.get_mut(&name).unwrap().data_mut()[ci] += eps;
            let mut minus = point.clone();
            minus.get_mut(&name).unwrap().data_mut()[ci] -= eps;
            let (fp, fm) = match (f(&plus), f(&minus)) {
                (Ok(p), Ok(m)) if p.value.is_finite() && m.value.is_finite() => (p.value, m.value),
                _ => {
                    report.coords_skipped += 1;
                    continue;
                }
            };
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = base
                .grads
                .get(&name)
                .map(|t| t.data()[ci])
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / f64::max(1.0, analytic.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
