//! Cross-module properties over randomly generated inputs.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdml::evalmetrics::ConfusionMatrix;
use pdml::extension::{online_extension, score_candidates, ScoreArgmax};
use pdml::griddata::{class_set, Label, Point, PointAnnotationSet, PseudoMask, IGNORE};
use pdml::pdml::{form_triples, subgroup_pdml_loss, triple_loss_vectors, Selection};
use pdml::pointloss::point_cross_entropy;
use pdml::synthgen::{connected_components, generate_scene, sample_point_annotations, SceneConfig};
use pdml::toynet::ScoreMap;
use pdml::trainer::poly_lr;
use pdml::{EmbeddingPoint, EmbeddingSet, LossConfig};

fn random_points(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, n: usize, image_id: usize) -> PointAnnotationSet {
    let mut cells: Vec<usize> = (0..h * w).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let points = cells[..n]
        .iter()
        .map(|&i| Point { row: i / w, col: i % w, class: rng.random_range(0..k as Label) })
        .collect();
    PointAnnotationSet::new(image_id, points).unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, sharp: f64) -> ScoreMap<f64> {
    let logits: Vec<f64> = (0..h * w * k).map(|_| sharp * rng.random_range(-1.0..1.0)).collect();
    ScoreMap::from_logits(h, w, k, &logits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_point_per_component_and_full_class_coverage(seed in 0u64..10_000, index in 0u64..50) {
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        let (_, gt) = generate_scene::<f64>(&cfg, index).unwrap();
        let pts = sample_point_annotations(&gt, 0, seed ^ index).unwrap();
        prop_assert_eq!(pts.len(), connected_components(&gt).len());
        prop_assert_eq!(pts.class_set(), class_set(&gt));
        for p in pts.points() {
            prop_assert_eq!(gt.get(p.row, p.col), p.class);
        }
    }

    #[test]
    fn softmax_ignores_per_pixel_shift(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (3, 4, 5);
        let logits: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let a = ScoreMap::from_logits(h, w, k, &logits);
        let b = ScoreMap::from_logits(h, w, k, &shifted);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn point_loss_is_finite_for_extreme_logits(seed in 0u64..10_000, scale in 1.0f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (4, 4, 3);
        let scores = random_scores(&mut rng, h, w, k, scale);
        let pts = random_points(&mut rng, h, w, k, 5, 0);
        let mask = pdml::griddata::points_to_pseudo_mask(&pts, h, w).unwrap();
        let r = point_cross_entropy(&scores, &mask).unwrap();
        prop_assert!(r.loss.is_finite() && r.loss >= 0.0);
        prop_assert!(r.loss <= -(1e-12f64).ln() + 1e-9);
    }

    #[test]
    fn triples_are_balanced_and_cross_image(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<EmbeddingSet> = (0..rng.random_range(2..=4))
            .map(|id| EmbeddingSet {
                image_id: id,
                points: (0..rng.random_range(0..=8))
                    .map(|i| EmbeddingPoint { vector: vec![0.0; 2], class: rng.random_range(0..3), image_id: id, row: i, col: 0 })
                    .collect(),
            })
            .collect();
        for a in &sets {
            for o in &sets {
                if a.image_id == o.image_id {
                    continue;
                }
                let triples = form_triples(a, o);
                for (i, p) in a.points.iter().enumerate() {
                    let pos = o.points.iter().filter(|x| x.class == p.class).count();
                    let neg = o.points.len() - pos;
                    prop_assert_eq!(triples.iter().filter(|t| t.anchor == i).count(), pos.min(neg));
                }
                for t in &triples {
                    prop_assert_eq!(o.points[t.positive].class, a.points[t.anchor].class);
                    prop_assert_ne!(o.points[t.negative].class, a.points[t.anchor].class);
                    prop_assert_eq!(o.points[t.positive].image_id, o.image_id);
                }
            }
        }
        // a lone image forms no metric loss
        prop_assert!(subgroup_pdml_loss(&sets[..1], &LossConfig::default(), Selection::AnnotationOrder).is_err());
    }

    #[test]
    fn inactive_hinge_leaves_only_the_pull_term(seed in 0u64..10_000, alpha in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(1..8);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        // the negative sits far beyond the margin
        let n: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        let cfg = LossConfig { margin: 5.0, alpha, beta: 1.0 };
        let r = triple_loss_vectors(&a, &p, &n, &cfg);
        prop_assert!(!r.hinge_active);
        prop_assert!(r.grad_negative.iter().all(|&g| g == 0.0));
        let dp = r.positive_distance;
        prop_assume!(dp > 0.0);
        for i in 0..dim {
            prop_assert_eq!(r.grad_anchor[i], -r.grad_positive[i]);
            prop_assert!((r.grad_anchor[i] - alpha * (a[i] - p[i]) / dp).abs() < 1e-12);
        }
    }

    #[test]
    fn score_support_is_antitone(seed in 0u64..10_000, lo in 0.05f64..0.95, delta in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (6, 6, 4);
        let scores = random_scores(&mut rng, h, w, k, 4.0);
        let classes = random_points(&mut rng, h, w, k, 4, 0).class_set();
        let support = |thr: f64| -> BTreeSet<usize> {
            let m = score_candidates(&scores, &classes, thr, ScoreArgmax::AllClasses).unwrap();
            m.labels().iter().enumerate().filter(|(_, &l)| l != IGNORE).map(|(i, _)| i).collect()
        };
        prop_assert!(support(lo + delta).is_subset(&support(lo)));
    }

    #[test]
    fn extended_labels_keep_every_point(seed in 0u64..10_000, thr in 0.1f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (8, 8, 4);
        let scores = random_scores(&mut rng, h, w, k, 3.0);
        let n = rng.random_range(1..8);
        let pts = random_points(&mut rng, h, w, k, n, 0);
        let mask = online_extension(&scores, &pts, thr, ScoreArgmax::AllClasses).unwrap();
        for p in pts.points() {
            prop_assert_eq!(mask.get(p.row, p.col), p.class);
        }
    }

    #[test]
    fn learning_rate_strictly_decreases(base in 1e-5f64..1.0, max in 2usize..200, power in 0.1f64..3.0) {
        let lrs: Vec<f64> = (0..=max).map(|e| poly_lr(base, e, max, power).unwrap()).collect();
        prop_assert_eq!(lrs[0], base);
        prop_assert_eq!(lrs[max], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(poly_lr(base, max + 1, max, power).is_err());
    }

    #[test]
    fn metrics_ignore_pixel_order_and_splits(seed in 0u64..10_000, k in 2usize..7, cut in 0usize..=48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 48;
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let gt: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k as Label) }).collect();
        prop_assume!(gt.iter().any(|&g| g != IGNORE));
        let mut whole = ConfusionMatrix::new(k);
        whole.accumulate(&pred, &PseudoMask::new(1, n, gt.clone()).unwrap()).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = ConfusionMatrix::new(k);
        let sp: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        let sg: Vec<Label> = order.iter().map(|&i| gt[i]).collect();
        shuffled.accumulate(&sp, &PseudoMask::new(1, n, sg).unwrap()).unwrap();
        prop_assert_eq!(&shuffled, &whole);

        let mut split = ConfusionMatrix::new(k);
        if cut > 0 {
            split.accumulate(&pred[..cut], &PseudoMask::new(1, cut, gt[..cut].to_vec()).unwrap()).unwrap();
        }
        if cut < n {
            let mut rest = ConfusionMatrix::new(k);
            rest.accumulate(&pred[cut..], &PseudoMask::new(1, n - cut, gt[cut..].to_vec()).unwrap()).unwrap();
            split.merge(&rest).unwrap();
        }
        prop_assert_eq!(split.miou().unwrap(), whole.miou().unwrap());
        prop_assert_eq!(split.pixel_accuracy().unwrap(), whole.pixel_accuracy().unwrap());
        let (m, a) = (whole.miou().unwrap(), whole.pixel_accuracy().unwrap());
        prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&a));
    }
}
