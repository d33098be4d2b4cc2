use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

/// Denominator floor for the relative error, so that parameters whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index holding the largest relative error.
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// At most `samples` parameters are probed, chosen without replacement with
/// a seeded RNG; every parameter is probed when there are fewer. The relative
/// error of one parameter is `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn numeric_grad_check<T: Real, F: FnMut(&[T]) -> T>(
    mut loss: F,
    params: &[T],
    analytic: &[T],
    step: T,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let indices: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, params.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
    };
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = ((up - down) / (step + step)).as_f64();
        let a = analytic[i].as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_index = i;
        }
    }
    report
}
