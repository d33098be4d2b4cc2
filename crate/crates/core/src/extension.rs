//! Online label extension.
//!
//! Two candidate masks are built per image: confident classifier predictions
//! whose class appears in the image's annotations, and 5x5 squares around
//! each annotated point. Only pixels on which both agree become labels.
//! A K-Means comparator seeded at the annotated pixels is also provided.

use crate::error::{Error, Result};
use crate::griddata::{ClassSet, Label, PointAnnotationSet, PseudoMask, IGNORE};
use crate::scalar::Real;
use crate::toynet::{EmbeddingMap, ScoreMap};

/// Candidate labels share the representation of sparse masks.
pub type CandidateMask = PseudoMask;

/// Side length of the square grown around each annotated point.
pub const REGION_SIZE: usize = 5;

/// Default score threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// Default Lloyd iteration cap for the K-Means comparator.
pub const KMEANS_MAX_ITER: usize = 300;

/// Which classes the confidence argmax ranges over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreArgmax {
    /// Argmax over all classes, then require the winner to be annotated.
    #[default]
    AllClasses,
    /// Argmax restricted to the annotated classes.
    WithinClassSet,
}

/// Pixels whose top class probability exceeds `thr` and whose top class
/// belongs to `classes`.
///
/// An empty class set is reported as [`Error::Empty`]; callers treat it as an
/// all-[`IGNORE`] mask.
pub fn score_candidates<T: Real>(
    scores: &ScoreMap<T>,
    classes: &ClassSet,
    thr: T,
    argmax: ScoreArgmax,
) -> Result<CandidateMask> {
    if !(thr > T::zero()) || !thr.is_finite() {
        return Err(Error::Config(format!("threshold must be finite and positive, got {thr}")));
    }
    if classes.is_empty() {
        return Err(Error::Empty("image has no annotated classes".into()));
    }
    let mut mask = PseudoMask::empty(scores.height, scores.width)?;
    for r in 0..scores.height {
        for c in 0..scores.width {
            let best = match argmax {
                ScoreArgmax::AllClasses => Some(scores.argmax(r, c)),
                ScoreArgmax::WithinClassSet => {
                    let px = scores.pixel(r, c);
                    classes
                        .iter()
                        .filter(|&k| (k as usize) < px.len())
                        .map(|k| (k as usize, px[k as usize]))
                        .fold(None, |acc: Option<(usize, T)>, (k, p)| match acc {
                            Some((_, bp)) if bp >= p => acc,
                            _ => Some((k, p)),
                        })
                }
            };
            if let Some((class, p)) = best {
                if p > thr && classes.contains(class as Label) {
                    mask.set(r, c, class as Label);
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Claim {
    Free,
    Class(Label),
    Contested,
}

/// Grows every annotated point into a border-clipped 5x5 square. Pixels
/// claimed by squares of different classes are left unlabeled.
pub fn region_candidates(points: &PointAnnotationSet, height: usize, width: usize) -> Result<CandidateMask> {
    points.check_bounds(height, width)?;
    let half = REGION_SIZE / 2;
    let mut claims = vec![Claim::Free; height * width];
    for p in points.points() {
        for r in p.row.saturating_sub(half)..(p.row + half + 1).min(height) {
            for c in p.col.saturating_sub(half)..(p.col + half + 1).min(width) {
                let slot = &mut claims[r * width + c];
                *slot = match *slot {
                    Claim::Free => Claim::Class(p.class),
                    Claim::Class(k) if k == p.class => Claim::Class(k),
                    _ => Claim::Contested,
                };
            }
        }
    }
    let labels = claims
        .into_iter()
        .map(|claim| match claim {
            Claim::Class(k) => k,
            _ => IGNORE,
        })
        .collect();
    PseudoMask::new(height, width, labels)
}

/// Keeps a pixel only where both masks assign the same class.
pub fn extend_labels(score_mask: &CandidateMask, region_mask: &CandidateMask) -> Result<CandidateMask> {
    if !score_mask.same_dims(region_mask) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            score_mask.height(),
            score_mask.width(),
            region_mask.height(),
            region_mask.width()
        )));
    }
    let labels = score_mask
        .labels()
        .iter()
        .zip(region_mask.labels())
        .map(|(&a, &b)| if a == b { a } else { IGNORE })
        .collect();
    PseudoMask::new(score_mask.height(), score_mask.width(), labels)
}

/// Training labels for one image: the score/region intersection plus the
/// original points, which always keep their own label.
pub fn online_extension<T: Real>(
    scores: &ScoreMap<T>,
    points: &PointAnnotationSet,
    thr: T,
    argmax: ScoreArgmax,
) -> Result<PseudoMask> {
    let region = region_candidates(points, scores.height, scores.width)?;
    let mut mask = match score_candidates(scores, &points.class_set(), thr, argmax) {
        Ok(score) => extend_labels(&score, &region)?,
        Err(Error::Empty(_)) => PseudoMask::empty(scores.height, scores.width)?,
        Err(e) => return Err(e),
    };
    for p in points.points() {
        mask.set(p.row, p.col, p.class);
    }
    Ok(mask)
}

/// Fraction of labeled pixels in `ext` that agree with `gt`.
pub fn extension_accuracy(ext: &CandidateMask, gt: &PseudoMask) -> Result<f64> {
    if !ext.same_dims(gt) {
        return Err(Error::Shape("extension and ground truth differ in size".into()));
    }
    let (mut labeled, mut correct) = (0usize, 0usize);
    for (&e, &g) in ext.labels().iter().zip(gt.labels()) {
        if e != IGNORE {
            labeled += 1;
            correct += usize::from(e == g);
        }
    }
    if labeled == 0 {
        return Err(Error::Empty("extension labels no pixels".into()));
    }
    Ok(correct as f64 / labeled as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult<T> {
    pub mask: CandidateMask,
    /// Cluster index per pixel.
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<T>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's algorithm over all pixel embeddings with one cluster per
/// annotated point, initialised at that point's embedding. Each pixel takes
/// the class of its cluster's seed point. Empty clusters keep their center.
pub fn kmeans_cluster<T: Real>(emb: &EmbeddingMap<T>, points: &PointAnnotationSet, max_iter: usize) -> Result<KMeansResult<T>> {
    if points.is_empty() {
        return Err(Error::Empty("k-means needs at least one annotated point".into()));
    }
    points.check_bounds(emb.height, emb.width)?;
    let d = emb.dim;
    let n = emb.height * emb.width;
    let mut centers: Vec<Vec<T>> = points.points().iter().map(|p| emb.vector(p.row, p.col).to_vec()).collect();
    let assign = |centers: &[Vec<T>]| -> Vec<usize> {
        emb.values
            .chunks_exact(d)
            .map(|x| {
                let mut best = (0, T::infinity());
                for (k, c) in centers.iter().enumerate() {
                    let dist: T = x.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    if dist < best.1 {
                        best = (k, dist);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut assignment = assign(&centers);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![T::zero(); d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (x, &k) in emb.values.chunks_exact(d).zip(&assignment) {
            counts[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(x) {
                *s += v;
            }
        }
        for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                let inv = T::one() / T::from_count(count);
                *center = sum.into_iter().map(|s| s * inv).collect();
            }
        }
        let next = assign(&centers);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let pts = points.points();
    let labels = (0..n).map(|i| pts[assignment[i]].class).collect();
    Ok(KMeansResult {
        mask: PseudoMask::new(emb.height, emb.width, labels)?,
        assignment,
        centers,
        iterations,
        converged,
    })
}

pub fn kmeans_extension<T: Real>(emb: &EmbeddingMap<T>, points: &PointAnnotationSet, max_iter: usize) -> Result<CandidateMask> {
    kmeans_cluster(emb, points, max_iter).map(|r| r.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::{class_set, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(list: &[(usize, usize, Label)]) -> PointAnnotationSet {
        PointAnnotationSet::new(0, list.iter().map(|&(row, col, class)| Point { row, col, class }).collect()).unwrap()
    }

    fn classes(list: &[Label]) -> ClassSet {
        ClassSet(list.iter().copied().collect())
    }

    #[test]
    fn unreachable_threshold_gives_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s = ScoreMap::from_logits(4, 4, 3, &logits);
        let m = score_candidates(&s, &classes(&[0, 1, 2]), 1.0, ScoreArgmax::AllClasses).unwrap();
        assert_eq!(m.labeled_count(), 0);
    }

    #[test]
    fn score_fixture_per_pixel() {
        let s = ScoreMap {
            height: 2,
            width: 2,
            classes: 3,
            probs: vec![
                0.9, 0.05, 0.05, // class 0 confident
                0.05, 0.05, 0.9, // class 2 confident but not annotated
                0.5, 0.3, 0.2, // below threshold
                0.1, 0.8, 0.1, // class 1 confident
            ],
        };
        let m = score_candidates(&s, &classes(&[0, 1]), 0.7, ScoreArgmax::AllClasses).unwrap();
        assert_eq!(m.labels(), &[0, IGNORE, IGNORE, 1]);
        assert!(matches!(
            score_candidates(&s, &ClassSet::default(), 0.7, ScoreArgmax::AllClasses),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn restricted_argmax_differs_from_membership_check() {
        let s = ScoreMap { height: 1, width: 1, classes: 3, probs: vec![0.05, 0.05, 0.9] };
        let all = score_candidates(&s, &classes(&[0, 1]), 0.04, ScoreArgmax::AllClasses).unwrap();
        let within = score_candidates(&s, &classes(&[0, 1]), 0.04, ScoreArgmax::WithinClassSet).unwrap();
        assert_eq!(all.labels(), &[IGNORE]);
        assert_eq!(within.labels(), &[0]);
    }

    #[test]
    fn region_square_sizes() {
        let interior = region_candidates(&pts(&[(10, 10, 3)]), 32, 32).unwrap();
        assert_eq!(interior.labeled_count(), 25);
        let corner = region_candidates(&pts(&[(0, 0, 3)]), 32, 32).unwrap();
        assert_eq!(corner.labeled_count(), 9);
        let far_corner = region_candidates(&pts(&[(31, 31, 3)]), 32, 32).unwrap();
        assert_eq!(far_corner.labeled_count(), 9);
    }

    #[test]
    fn region_overlap_between_classes_is_ignored() {
        let m = region_candidates(&pts(&[(10, 10, 1), (10, 12, 2)]), 32, 32).unwrap();
        // squares span cols 8..=12 and 10..=14; overlap is cols 10..=12
        for r in 8..=12 {
            for c in 8..=14 {
                let want = match c {
                    8 | 9 => 1,
                    10..=12 => IGNORE,
                    _ => 2,
                };
                assert_eq!(m.get(r, c), want, "({r},{c})");
            }
        }
        assert_eq!(m.labeled_count(), 2 * 5 * 2);
        let same = region_candidates(&pts(&[(10, 10, 1), (10, 12, 1)]), 32, 32).unwrap();
        assert_eq!(same.labeled_count(), 5 * 7);
    }

    #[test]
    fn intersection_cases() {
        let a = PseudoMask::new(1, 4, vec![3, 3, 1, IGNORE]).unwrap();
        let empty = PseudoMask::empty(1, 4).unwrap();
        assert_eq!(extend_labels(&a, &empty).unwrap().labeled_count(), 0);
        let b = PseudoMask::new(1, 4, vec![3, 2, 1, 0]).unwrap();
        assert_eq!(extend_labels(&a, &b).unwrap().labels(), &[3, IGNORE, 1, IGNORE]);
        assert!(extend_labels(&a, &PseudoMask::empty(2, 2).unwrap()).is_err());
    }

    #[test]
    fn extension_accuracy_cases() {
        let gt = PseudoMask::new(2, 5, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]).unwrap();
        let mut restricted = PseudoMask::empty(2, 5).unwrap();
        restricted.set(0, 1, 1);
        restricted.set(1, 3, 3);
        assert_eq!(extension_accuracy(&restricted, &gt).unwrap(), 1.0);
        let mut seven = gt.clone();
        for c in 0..3 {
            seven.set(1, c, 4);
        }
        assert_eq!(extension_accuracy(&seven, &gt).unwrap(), 0.7);
        assert!(extension_accuracy(&PseudoMask::empty(2, 5).unwrap(), &gt).is_err());
    }

    #[test]
    fn online_extension_contains_points() {
        let s = ScoreMap::from_logits(8, 8, 3, &[0.0; 8 * 8 * 3]);
        let p = pts(&[(1, 1, 2), (6, 6, 0)]);
        let m = online_extension(&s, &p, 0.7, ScoreArgmax::AllClasses).unwrap();
        assert_eq!(m.labeled_count(), 2);
        assert_eq!(m.get(1, 1), 2);
        assert_eq!(class_set(&m), p.class_set());
    }

    fn blob_map() -> EmbeddingMap<f64> {
        // left half near (0, 0), right half near (10, 10)
        let mut e = EmbeddingMap::zeros(6, 8, 2);
        for r in 0..6 {
            for c in 0..8 {
                let base = if c < 4 { 0.0 } else { 10.0 };
                let jitter = ((r * 8 + c) % 3) as f64 * 0.1;
                e.vector_mut(r, c).copy_from_slice(&[base + jitter, base - jitter]);
            }
        }
        e
    }

    #[test]
    fn kmeans_single_point_labels_everything() {
        let m = kmeans_extension(&blob_map(), &pts(&[(2, 2, 4)]), KMEANS_MAX_ITER).unwrap();
        assert!(m.labels().iter().all(|&l| l == 4));
    }

    #[test]
    fn kmeans_splits_two_blobs() {
        let r = kmeans_cluster(&blob_map(), &pts(&[(0, 0, 1), (5, 7, 2)]), KMEANS_MAX_ITER).unwrap();
        assert!(r.converged);
        for row in 0..6 {
            for col in 0..8 {
                assert_eq!(r.mask.get(row, col), if col < 4 { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn kmeans_converged_assignment_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = EmbeddingMap::zeros(8, 8, 3);
        e.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let p = pts(&[(0, 0, 0), (3, 4, 1), (7, 7, 2), (5, 1, 0)]);
        let r = kmeans_cluster(&e, &p, KMEANS_MAX_ITER).unwrap();
        assert!(r.converged);
        let again = kmeans_cluster(&e, &p, r.iterations + 1).unwrap();
        assert_eq!(again.assignment, r.assignment);
        assert!(kmeans_cluster(&e, &pts(&[]), 10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn region_support_bounded(seed in 0u64..500, n in 1usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut list = Vec::new();
                while list.len() < n {
                    let (r, c) = (rng.random_range(0..16), rng.random_range(0..16));
                    if !list.iter().any(|&(a, b, _)| a == r && b == c) {
                        list.push((r, c, rng.random_range(0..4)));
                    }
                }
                let m = region_candidates(&pts(&list), 16, 16).unwrap();
                prop_assert!(m.labeled_count() <= 25 * n);
            }

            #[test]
            fn intersection_support_and_agreement(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut random_mask = || {
                    let labels = (0..64).map(|_| if rng.random_bool(0.4) { IGNORE } else { rng.random_range(0..3) }).collect();
                    PseudoMask::new(8, 8, labels).unwrap()
                };
                let (a, b) = (random_mask(), random_mask());
                let x = extend_labels(&a, &b).unwrap();
                for i in 0..64 {
                    let l = x.labels()[i];
                    if l != IGNORE {
                        prop_assert_eq!(l, a.labels()[i]);
                        prop_assert_eq!(l, b.labels()[i]);
                    }
                }
            }
        }
    }
}
