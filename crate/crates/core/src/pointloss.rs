//! Cross-entropy over the annotated pixels of a sparse mask.

use crate::error::{Error, Result};
use crate::griddata::{PseudoMask, IGNORE};
use crate::scalar::Real;
use crate::toynet::ScoreMap;

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCEResult<T> {
    pub loss: T,
    /// Gradient of `loss` with respect to the logits; `(softmax - onehot) / n`
    /// at each of the `n` annotated pixels, zero elsewhere.
    pub grad_logits: Vec<T>,
    pub annotated: usize,
}

/// Mean negative log-probability of the annotated class over all annotated
/// pixels of `mask`.
pub fn point_cross_entropy<T: Real>(scores: &ScoreMap<T>, mask: &PseudoMask) -> Result<PointCEResult<T>> {
    if scores.height != mask.height() || scores.width != mask.width() {
        return Err(Error::Shape(format!(
            "scores {}x{} vs mask {}x{}",
            scores.height,
            scores.width,
            mask.height(),
            mask.width()
        )));
    }
    let k = scores.classes;
    let annotated = mask.labeled_count();
    if annotated == 0 {
        return Err(Error::Empty("mask has no annotated pixels".into()));
    }
    let n = T::from_count(annotated);
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); scores.probs.len()];
    for (i, &label) in mask.labels().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let class = label as usize;
        if class >= k {
            return Err(Error::InvalidClass { class, num_classes: k });
        }
        let probs = &scores.probs[i * k..(i + 1) * k];
        loss -= probs[class].max(floor).ln();
        let g = &mut grad[i * k..(i + 1) * k];
        for (gv, &p) in g.iter_mut().zip(probs) {
            *gv = p / n;
        }
        g[class] -= T::one() / n;
    }
    Ok(PointCEResult {
        loss: loss / n,
        grad_logits: grad,
        annotated,
    })
}

/// Mean of the per-image point losses.
pub fn dataset_objective<T: Real>(scores: &[ScoreMap<T>], masks: &[PseudoMask]) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::Empty("no images".into()));
    }
    if scores.len() != masks.len() {
        return Err(Error::Shape(format!("{} score maps vs {} masks", scores.len(), masks.len())));
    }
    let mut total = T::zero();
    for (s, m) in scores.iter().zip(masks) {
        total += point_cross_entropy(s, m)?.loss;
    }
    Ok(total / T::from_count(scores.len()))
}
