//! Cross-image point-based distance metric learning.
//!
//! Embeddings of annotated pixels from different images are combined into
//! (anchor, positive, negative) triples: the positive shares the anchor's
//! class, the negative does not, and both come from one other image. Each
//! triple contributes
//!
//! ```text
//! L_t = alpha * |a - p| + beta * max(|a - p| - |a - n| + margin, 0)
//! ```
//!
//! with plain (unsquared, unnormalized) Euclidean distances.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::griddata::{Label, PointAnnotationSet};
use crate::scalar::Real;
use crate::toynet::EmbeddingMap;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPoint<T> {
    pub vector: Vec<T>,
    pub class: Label,
    pub image_id: usize,
    pub row: usize,
    pub col: usize,
}

/// Embeddings of one image's annotated pixels, in annotation order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub image_id: usize,
    pub points: Vec<EmbeddingPoint<T>>,
}

impl<T> EmbeddingSet<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Indices of one triple: `anchor` into the anchor image's set, `positive`
/// and `negative` into the other image's set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig<T> {
    pub margin: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Default for LossConfig<T> {
    /// `margin = 20`, `alpha = 0.8`, `beta = 1`.
    fn default() -> Self {
        Self {
            margin: T::lit(20.0),
            alpha: T::lit(0.8),
            beta: T::one(),
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > T::zero()) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.alpha >= T::zero() && self.beta >= T::zero()) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Order in which positives and negatives are consumed for each anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Selection {
    #[default]
    AnnotationOrder,
    /// Positives and negatives are shuffled independently per anchor.
    Shuffled(u64),
}

/// Gathers the embedding vector under every annotated point.
pub fn extract_embeddings<T: Real>(emb: &EmbeddingMap<T>, points: &PointAnnotationSet) -> Result<EmbeddingSet<T>> {
    points.check_bounds(emb.height, emb.width)?;
    Ok(EmbeddingSet {
        image_id: points.image_id,
        points: points
            .points()
            .iter()
            .map(|p| EmbeddingPoint {
                vector: emb.vector(p.row, p.col).to_vec(),
                class: p.class,
                image_id: points.image_id,
                row: p.row,
                col: p.col,
            })
            .collect(),
    })
}

pub fn l2_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Positive-pair term: Euclidean distance between same-class embeddings.
pub fn loss_positive<T: Real>(a: &EmbeddingPoint<T>, b: &EmbeddingPoint<T>) -> Result<T> {
    if a.class != b.class {
        return Err(Error::ClassConstraint(format!("positive pair has classes {} and {}", a.class, b.class)));
    }
    Ok(l2_distance(&a.vector, &b.vector))
}

/// Hinge on the gap between the negative and the positive distance.
pub fn loss_negative<T: Real>(
    a: &EmbeddingPoint<T>,
    pos: &EmbeddingPoint<T>,
    neg: &EmbeddingPoint<T>,
    margin: T,
) -> Result<T> {
    check_triple_classes(a, pos, neg)?;
    let gap = l2_distance(&a.vector, &pos.vector) - l2_distance(&a.vector, &neg.vector) + margin;
    Ok(gap.max(T::zero()))
}

fn check_triple_classes<T>(a: &EmbeddingPoint<T>, pos: &EmbeddingPoint<T>, neg: &EmbeddingPoint<T>) -> Result<()> {
    if a.class != pos.class || a.class == neg.class {
        return Err(Error::ClassConstraint(format!(
            "triple classes anchor={} positive={} negative={}",
            a.class, pos.class, neg.class
        )));
    }
    Ok(())
}

/// Value and gradients of one triple loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleLoss<T> {
    pub value: T,
    pub positive_distance: T,
    pub negative_distance: T,
    pub hinge_active: bool,
    pub grad_anchor: Vec<T>,
    pub grad_positive: Vec<T>,
    pub grad_negative: Vec<T>,
}

/// Triple loss on raw vectors. The hinge and norm subgradients at their
/// kinks are taken as zero.
pub fn triple_loss_vectors<T: Real>(anchor: &[T], positive: &[T], negative: &[T], cfg: &LossConfig<T>) -> TripleLoss<T> {
    let dp = l2_distance(anchor, positive);
    let dn = l2_distance(anchor, negative);
    let gap = dp - dn + cfg.margin;
    let hinge_active = gap > T::zero();
    let hinge = if hinge_active { gap } else { T::zero() };
    let value = cfg.alpha * dp + cfg.beta * hinge;

    let pos_coef = if dp > T::zero() {
        (cfg.alpha + if hinge_active { cfg.beta } else { T::zero() }) / dp
    } else {
        T::zero()
    };
    let neg_coef = if hinge_active && dn > T::zero() { cfg.beta / dn } else { T::zero() };
    let mut grad_anchor = Vec::with_capacity(anchor.len());
    let mut grad_positive = Vec::with_capacity(anchor.len());
    let mut grad_negative = Vec::with_capacity(anchor.len());
    for ((&a, &p), &n) in anchor.iter().zip(positive).zip(negative) {
        let gp = pos_coef * (a - p);
        let gn = neg_coef * (a - n);
        grad_anchor.push(gp - gn);
        grad_positive.push(-gp);
        grad_negative.push(gn);
    }
    TripleLoss {
        value,
        positive_distance: dp,
        negative_distance: dn,
        hinge_active,
        grad_anchor,
        grad_positive,
        grad_negative,
    }
}

/// `alpha * L_p + beta * L_n` with gradients for all three vectors.
pub fn loss_triple<T: Real>(
    anchor: &EmbeddingPoint<T>,
    positive: &EmbeddingPoint<T>,
    negative: &EmbeddingPoint<T>,
    cfg: &LossConfig<T>,
) -> Result<TripleLoss<T>> {
    check_triple_classes(anchor, positive, negative)?;
    Ok(triple_loss_vectors(&anchor.vector, &positive.vector, &negative.vector, cfg))
}

/// Forms triples with anchors from `anchors` and positives/negatives from
/// `others`, consuming one positive and one negative per triple until either
/// runs out.
pub fn form_triples<T>(anchors: &EmbeddingSet<T>, others: &EmbeddingSet<T>) -> Vec<Triple> {
    form_triples_with(anchors, others, Selection::AnnotationOrder)
}

pub fn form_triples_with<T>(anchors: &EmbeddingSet<T>, others: &EmbeddingSet<T>, selection: Selection) -> Vec<Triple> {
    let mut rng = match selection {
        Selection::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        Selection::AnnotationOrder => None,
    };
    let mut triples = Vec::new();
    for (i, anchor) in anchors.points.iter().enumerate() {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            (0..others.len()).partition(|&j| others.points[j].class == anchor.class);
        if let Some(rng) = rng.as_mut() {
            pos.shuffle(rng);
            neg.shuffle(rng);
        }
        triples.extend(pos.into_iter().zip(neg).map(|(positive, negative)| Triple {
            anchor: i,
            positive,
            negative,
        }));
    }
    triples
}

/// Result of evaluating the metric loss over one subgroup of images.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupLoss<T> {
    /// Sum of triple losses.
    pub total: T,
    /// `total / triples`, or zero when no triple formed.
    pub mean: T,
    pub triples: usize,
    /// Gradient of `mean` for every point of every set, `len * dim` each.
    pub grads: Vec<Vec<T>>,
}

impl<T> SubgroupLoss<T> {
    pub fn is_empty(&self) -> bool {
        self.triples == 0
    }
}

/// Runs triple formation over every ordered pair of distinct images in the
/// subgroup and averages the triple loss.
pub fn subgroup_pdml_loss<T: Real>(sets: &[EmbeddingSet<T>], cfg: &LossConfig<T>, selection: Selection) -> Result<SubgroupLoss<T>> {
    cfg.validate()?;
    if sets.len() < 2 {
        return Err(Error::Config(format!("subgroup needs at least 2 images, got {}", sets.len())));
    }
    for (i, a) in sets.iter().enumerate() {
        if sets[..i].iter().any(|b| b.image_id == a.image_id) {
            return Err(Error::Config(format!("image {} appears twice in subgroup", a.image_id)));
        }
    }
    let mut grads: Vec<Vec<T>> = sets
        .iter()
        .map(|s| vec![T::zero(); s.points.iter().map(|p| p.vector.len()).sum()])
        .collect();
    let mut total = T::zero();
    let mut count = 0usize;
    for n in 0..sets.len() {
        for m in 0..sets.len() {
            if n == m {
                continue;
            }
            let selection = match selection {
                Selection::Shuffled(seed) => Selection::Shuffled(seed ^ ((n as u64) << 32 | m as u64)),
                s => s,
            };
            for t in form_triples_with(&sets[n], &sets[m], selection) {
                let a = &sets[n].points[t.anchor];
                let p = &sets[m].points[t.positive];
                let q = &sets[m].points[t.negative];
                let r = triple_loss_vectors(&a.vector, &p.vector, &q.vector, cfg);
                total += r.value;
                count += 1;
                let d = a.vector.len();
                add_into(&mut grads[n][t.anchor * d..(t.anchor + 1) * d], &r.grad_anchor);
                add_into(&mut grads[m][t.positive * d..(t.positive + 1) * d], &r.grad_positive);
                add_into(&mut grads[m][t.negative * d..(t.negative + 1) * d], &r.grad_negative);
            }
        }
    }
    let mean = if count > 0 {
        let scale = T::one() / T::from_count(count);
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        total * scale
    } else {
        T::zero()
    };
    Ok(SubgroupLoss {
        total,
        mean,
        triples: count,
        grads,
    })
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Distances of every cross-image pair of annotated points in a subgroup,
/// split by whether the two points share a class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDistances {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl PairDistances {
    /// Adds each unordered pair of points from two different images once.
    pub fn observe<T: Real>(&mut self, sets: &[EmbeddingSet<T>]) {
        for (n, a) in sets.iter().enumerate() {
            for b in &sets[n + 1..] {
                for p in &a.points {
                    for q in &b.points {
                        let d = l2_distance(&p.vector, &q.vector).as_f64();
                        if p.class == q.class {
                            self.positive.push(d);
                        } else {
                            self.negative.push(d);
                        }
                    }
                }
            }
        }
    }

    pub fn extend(&mut self, other: PairDistances) {
        self.positive.extend(other.positive);
        self.negative.extend(other.negative);
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }

    pub fn mean_positive(&self) -> Option<f64> {
        mean(&self.positive)
    }

    pub fn mean_negative(&self) -> Option<f64> {
        mean(&self.negative)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Histograms of positive and negative pair distances on shared bins.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceHistogram {
    /// `bins + 1` bin edges from 0 to the largest observed distance.
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub mean_positive: Option<f64>,
    pub mean_negative: Option<f64>,
}

/// Bins the observed distances into `bins` equal-width bins over
/// `[0, max observed]`; the maximum falls into the last bin.
pub fn distance_histograms(pairs: &PairDistances, bins: usize) -> Result<DistanceHistogram> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pair distances observed".into()));
    }
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let max = pairs.positive.iter().chain(&pairs.negative).copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let bin_of = |d: f64| ((d / width) as usize).min(bins - 1);
    let mut positive = vec![0; bins];
    let mut negative = vec![0; bins];
    for &d in &pairs.positive {
        positive[bin_of(d)] += 1;
    }
    for &d in &pairs.negative {
        negative[bin_of(d)] += 1;
    }
    Ok(DistanceHistogram {
        edges,
        positive,
        negative,
        mean_positive: pairs.mean_positive(),
        mean_negative: pairs.mean_negative(),
    })
}

/// Appends raw per-epoch pair distances as `epoch,kind,distance` rows.
pub fn append_distance_log(path: impl AsRef<Path>, epoch: usize, pairs: &PairDistances) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,kind,distance\n");
    }
    for (kind, values) in [("+", &pairs.positive), ("-", &pairs.negative)] {
        for d in values {
            text.push_str(&format!("{epoch},{kind},{d}\n"));
        }
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a distance log back, grouped by epoch in ascending order.
pub fn read_distance_log(path: impl AsRef<Path>) -> Result<Vec<(usize, PairDistances)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut epochs: std::collections::BTreeMap<usize, PairDistances> = Default::default();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected epoch,kind,distance", lineno + 1));
        let mut fields = line.split(',');
        let epoch: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let kind = fields.next().ok_or_else(bad)?;
        let d: f64 = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let entry = epochs.entry(epoch).or_default();
        match kind {
            "+" => entry.positive.push(d),
            "-" => entry.negative.push(d),
            _ => return Err(bad()),
        }
    }
    Ok(epochs.into_iter().collect())
}

/// Writes `epoch,kind,bin_lo,bin_hi,count` and `epoch,mean_pos,mean_neg` CSVs.
pub fn write_histogram_csvs(
    histograms: &[(usize, DistanceHistogram)],
    bins_path: impl AsRef<Path>,
    summary_path: impl AsRef<Path>,
) -> Result<()> {
    let mut bins = String::from("epoch,kind,bin_lo,bin_hi,count\n");
    let mut summary = String::from("epoch,mean_pos,mean_neg\n");
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for (epoch, h) in histograms {
        for (kind, counts) in [("+", &h.positive), ("-", &h.negative)] {
            for (i, c) in counts.iter().enumerate() {
                bins.push_str(&format!("{epoch},{kind},{},{},{c}\n", h.edges[i], h.edges[i + 1]));
            }
        }
        summary.push_str(&format!("{epoch},{},{}\n", fmt_opt(h.mean_positive), fmt_opt(h.mean_negative)));
    }
    let (bp, sp) = (bins_path.as_ref(), summary_path.as_ref());
    fs::write(bp, bins).map_err(|e| Error::io(bp, e))?;
    fs::write(sp, summary).map_err(|e| Error::io(sp, e))
}
