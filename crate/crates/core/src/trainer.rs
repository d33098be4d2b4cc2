//! Training loop: point cross-entropy, cross-image metric learning and online
//! label extension, optimized with momentum SGD under polynomial decay.
//!
//! Training runs in three consecutive phases. The first uses the point loss
//! alone, the second adds the metric loss, the third additionally replaces
//! each image's point mask with its online extension.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalmetrics::ConfusionMatrix;
use crate::extension::{online_extension, ScoreArgmax};
use crate::griddata::{points_to_pseudo_mask, Dataset, ImageGrid, PointAnnotationSet, Sample};
use crate::pdml::{extract_embeddings, subgroup_pdml_loss, LossConfig, PairDistances, Selection};
use crate::pointloss::point_cross_entropy;
use crate::scalar::{all_finite, Real};
use crate::toynet::{backward, forward, init_params, ModelParams, NetConfig};

/// Epoch counts of the three training phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub point_only: usize,
    pub metric: usize,
    pub extension: usize,
}

impl PhaseSchedule {
    pub fn new(point_only: usize, metric: usize, extension: usize) -> Self {
        Self {
            point_only,
            metric,
            extension,
        }
    }

    pub fn total(&self) -> usize {
        self.point_only + self.metric + self.extension
    }

    /// Phase of a zero-based epoch index.
    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.point_only {
            Phase::PointOnly
        } else if epoch < self.point_only + self.metric {
            Phase::Metric
        } else {
            Phase::Extension
        }
    }
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self::new(4, 48, 8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PointOnly,
    Metric,
    Extension,
}

impl Phase {
    pub fn uses_metric_loss(self) -> bool {
        !matches!(self, Phase::PointOnly)
    }

    pub fn uses_extension(self) -> bool {
        matches!(self, Phase::Extension)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub batch_size: usize,
    pub subgroup_size: usize,
    /// Square crop side; `None` trains on whole images.
    pub crop_size: Option<usize>,
    pub base_lr: T,
    pub classifier_lr_multiplier: T,
    pub momentum: T,
    pub weight_decay: T,
    pub lr_power: T,
    pub loss: LossConfig<T>,
    /// Weight of the metric loss relative to the point loss.
    pub pdml_weight: T,
    pub extension_threshold: T,
    pub score_argmax: ScoreArgmax,
    pub selection: Selection,
    pub phases: PhaseSchedule,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            batch_size: 8,
            subgroup_size: 4,
            crop_size: None,
            base_lr: T::lit(0.01),
            classifier_lr_multiplier: T::lit(10.0),
            momentum: T::lit(0.9),
            weight_decay: T::lit(0.0005),
            lr_power: T::lit(0.8),
            loss: LossConfig::default(),
            pdml_weight: T::one(),
            extension_threshold: T::lit(0.7),
            score_argmax: ScoreArgmax::AllClasses,
            selection: Selection::AnnotationOrder,
            phases: PhaseSchedule::default(),
            seed: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn max_epoch(&self) -> usize {
        self.phases.total()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > T::zero()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= T::zero() && self.classifier_lr_multiplier > T::zero()) {
            return Err(Error::Config("weight decay and lr multiplier must be non-negative / positive".into()));
        }
        if !(self.lr_power > T::zero()) {
            return Err(Error::Config("lr power must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.subgroup_size < 2 {
            return Err(Error::Config("subgroup size must be at least 2".into()));
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if self.max_epoch() == 0 {
            return Err(Error::Config("phase schedule has no epochs".into()));
        }
        if !(self.pdml_weight >= T::zero()) {
            return Err(Error::Config("pdml weight must be non-negative".into()));
        }
        self.loss.validate()
    }
}

impl<T: Real> fmt::Display for TrainConfig<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={} subgroup={} crop={} lr={} cls_mult={} momentum={} wd={} power={} \
             alpha={} beta={} margin={} lambda={} thr={} argmax={:?} selection={:?} phases={},{},{} seed={}",
            self.batch_size,
            self.subgroup_size,
            self.crop_size.map_or("full".to_string(), |c| c.to_string()),
            self.base_lr,
            self.classifier_lr_multiplier,
            self.momentum,
            self.weight_decay,
            self.lr_power,
            self.loss.alpha,
            self.loss.beta,
            self.loss.margin,
            self.pdml_weight,
            self.extension_threshold,
            self.score_argmax,
            self.selection,
            self.phases.point_only,
            self.phases.metric,
            self.phases.extension,
            self.seed
        )
    }
}

/// `base * (1 - epoch / max_epoch) ^ power`.
pub fn poly_lr<T: Real>(base: T, epoch: usize, max_epoch: usize, power: T) -> Result<T> {
    if epoch > max_epoch || max_epoch == 0 {
        return Err(Error::Config(format!("epoch {epoch} outside [0, {max_epoch}]")));
    }
    let frac = T::one() - T::from_count(epoch) / T::from_count(max_epoch);
    Ok(base * frac.powf(power))
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: vec![T::zero(); len],
        }
    }
}

/// Hyperparameters of a single SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub classifier_lr_multiplier: T,
}

impl<T: Real> From<&TrainConfig<T>> for SgdConfig<T> {
    fn from(c: &TrainConfig<T>) -> Self {
        Self {
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            classifier_lr_multiplier: c.classifier_lr_multiplier,
        }
    }
}

/// `v <- momentum * v + g + weight_decay * p`, then `p <- p - lr * v`, with
/// the classifier's learning rate scaled by its multiplier.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[T],
    state: &mut OptimizerState<T>,
    lr: T,
    cfg: &SgdConfig<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i} is {}", grads[i])));
    }
    let classifier = params.layout().classifier_range();
    let values = params.values_mut();
    for (i, ((p, v), &g)) in values.iter_mut().zip(state.velocity.iter_mut()).zip(grads).enumerate() {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        let step = if classifier.contains(&i) { lr * cfg.classifier_lr_multiplier } else { lr };
        *p -= step * *v;
    }
    Ok(())
}

/// Shuffles `0..n` and cuts it into consecutive groups of `size`; a final
/// group of one is folded into the previous group.
pub fn make_subgroups(n: usize, size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if size < 2 {
        return Err(Error::Config("subgroup size must be at least 2".into()));
    }
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 images for subgroups, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().expect("non-empty");
        groups.last_mut().expect("previous group").extend(tail);
    }
    Ok(groups)
}

/// Random `crop x crop` window (clipped to the image) and the points inside it.
pub fn random_crop<T: Real, R: Rng>(
    image: &ImageGrid<T>,
    points: &PointAnnotationSet,
    crop: Option<usize>,
    rng: &mut R,
) -> Result<(ImageGrid<T>, PointAnnotationSet)> {
    let Some(size) = crop else {
        return Ok((image.clone(), points.clone()));
    };
    let ch = size.min(image.height());
    let cw = size.min(image.width());
    if ch == image.height() && cw == image.width() {
        return Ok((image.clone(), points.clone()));
    }
    let top = rng.random_range(0..=image.height() - ch);
    let left = rng.random_range(0..=image.width() - cw);
    Ok((image.crop(top, left, ch, cw)?, points.crop(top, left, ch, cw)))
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based epoch number.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub ce_loss: f64,
    pub pdml_loss: f64,
    pub triples: usize,
    pub mean_pos_dist: Option<f64>,
    pub mean_neg_dist: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_acc: Option<f64>,
    /// Cross-image pair distances seen during the epoch.
    pub distances: PairDistances,
}

pub const LOG_HEADER: &str = "epoch,lr,ce_loss,pdml_loss,triples,mean_pos_dist,mean_neg_dist,miou,pixel_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.ce_loss,
            self.pdml_loss,
            self.triples,
            opt(self.mean_pos_dist),
            opt(self.mean_neg_dist),
            opt(self.miou),
            opt(self.pixel_acc)
        )
    }
}

pub fn write_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: Vec<EpochLog>,
}

/// Confusion matrix of the model's argmax predictions over every sample
/// that carries dense ground truth.
pub fn evaluate<T: Real>(params: &ModelParams<T>, dataset: &Dataset<T>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.config().num_classes);
    for s in dataset.samples() {
        let Some(gt) = &s.ground_truth else { continue };
        let fwd = forward(&s.image, params)?;
        cm.accumulate(&fwd.scores.predictions(), gt)?;
    }
    Ok(cm)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss value and parameter gradient of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective<T> {
    /// Mean point loss over the images that carry at least one label.
    pub ce: T,
    /// Mean metric loss over the subgroups that formed a triple, if any did.
    pub pdml: Option<T>,
    pub triples: usize,
    /// Gradient of [`Objective::total`].
    pub grad: Vec<T>,
    pdml_weight: T,
}

impl<T: Real> Objective<T> {
    /// `ce + pdml_weight * pdml`.
    pub fn total(&self) -> T {
        self.ce + self.pdml_weight * self.pdml.unwrap_or(T::zero())
    }
}

/// Training objective of one batch given as subgroups of (image, points).
///
/// `phase` decides whether the metric loss is added and whether the point
/// masks are replaced by their online extension. Cross-image pair distances
/// are recorded into `distances` when given.
pub fn batch_objective<T: Real>(
    params: &ModelParams<T>,
    groups: &[Vec<(ImageGrid<T>, PointAnnotationSet)>],
    cfg: &TrainConfig<T>,
    phase: Phase,
    mut distances: Option<&mut PairDistances>,
) -> Result<Objective<T>> {
    let mut images = Vec::new();
    for group in groups {
        for (img, pts) in group {
            images.push((pts, forward(img, params)?));
        }
    }

    // point loss
    let mut grad_logits: Vec<Option<Vec<T>>> = Vec::with_capacity(images.len());
    let mut ce_terms = Vec::new();
    for (pts, fwd) in &images {
        let mask = if phase.uses_extension() {
            online_extension(&fwd.scores, pts, cfg.extension_threshold, cfg.score_argmax)?
        } else {
            points_to_pseudo_mask(pts, fwd.height(), fwd.width())?
        };
        match point_cross_entropy(&fwd.scores, &mask) {
            Ok(r) => {
                ce_terms.push(r.loss);
                grad_logits.push(Some(r.grad_logits));
            }
            Err(Error::Empty(_)) => grad_logits.push(None),
            Err(e) => return Err(e),
        }
    }
    let ce_count = T::from_count(ce_terms.len().max(1));
    let ce = ce_terms.iter().copied().sum::<T>() / ce_count;
    for g in grad_logits.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v /= ce_count);
    }

    // metric loss, one subgroup at a time
    let mut grad_emb: Vec<Option<Vec<T>>> = vec![None; images.len()];
    let mut pdml_terms = Vec::new();
    let mut subgroup_grads = Vec::new();
    let mut triples = 0;
    let mut offset = 0;
    for group in groups {
        let members = offset..offset + group.len();
        offset += group.len();
        let sets = members
            .clone()
            .map(|k| extract_embeddings(&images[k].1.embedding, images[k].0))
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = distances.as_deref_mut() {
            d.observe(&sets);
        }
        if !phase.uses_metric_loss() || cfg.pdml_weight == T::zero() || sets.len() < 2 {
            continue;
        }
        let r = subgroup_pdml_loss(&sets, &cfg.loss, cfg.selection)?;
        if r.is_empty() {
            continue;
        }
        triples += r.triples;
        pdml_terms.push(r.mean);
        subgroup_grads.push((members, sets, r.grads));
    }
    let pdml = (!pdml_terms.is_empty()).then(|| pdml_terms.iter().copied().sum::<T>() / T::from_count(pdml_terms.len()));
    if !pdml_terms.is_empty() {
        let scale = cfg.pdml_weight / T::from_count(pdml_terms.len());
        for (members, sets, grads) in subgroup_grads {
            for ((k, set), g) in members.zip(&sets).zip(grads) {
                let emb = &images[k].1.embedding;
                let d = emb.dim;
                let target = grad_emb[k].get_or_insert_with(|| vec![T::zero(); emb.values.len()]);
                for (p, gv) in set.points.iter().zip(g.chunks_exact(d)) {
                    let start = (p.row * emb.width + p.col) * d;
                    for (t, &v) in target[start..start + d].iter_mut().zip(gv) {
                        *t += scale * v;
                    }
                }
            }
        }
    }

    let mut grad = vec![T::zero(); params.len()];
    for (k, (_, fwd)) in images.iter().enumerate() {
        if grad_emb[k].is_none() && grad_logits[k].is_none() {
            continue;
        }
        let g = backward(fwd, params, grad_emb[k].as_deref(), grad_logits[k].as_deref())?;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(Objective {
        ce,
        pdml,
        triples,
        grad,
        pdml_weight: cfg.pdml_weight,
    })
}

fn train_step<T: Real>(
    params: &ModelParams<T>,
    batch: &[&[usize]],
    samples: &[Sample<T>],
    cfg: &TrainConfig<T>,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    distances: &mut PairDistances,
) -> Result<Objective<T>> {
    let groups = batch
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|&i| random_crop(&samples[i].image, &samples[i].points, cfg.crop_size, rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    batch_objective(params, &groups, cfg, phase, Some(distances))
}

/// Trains a freshly initialized network; `eval` (if given) is scored after
/// every epoch.
pub fn train<T: Real>(
    dataset: &Dataset<T>,
    net: &NetConfig,
    cfg: &TrainConfig<T>,
    eval: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    let params = init_params(net)?;
    train_from(params, dataset, cfg, eval)
}

/// Trains starting from existing parameters.
pub fn train_from<T: Real>(
    mut params: ModelParams<T>,
    dataset: &Dataset<T>,
    cfg: &TrainConfig<T>,
    eval: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if params.config().num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "network predicts {} classes, dataset has {}",
            params.config().num_classes,
            dataset.num_classes()
        )));
    }
    let max_epoch = cfg.max_epoch();
    let sgd = SgdConfig::from(cfg);
    let mut state = OptimizerState::new(params.len());
    let groups_per_batch = cfg.batch_size.div_ceil(cfg.subgroup_size).max(1);
    let mut log = Vec::with_capacity(max_epoch);
    for epoch in 0..max_epoch {
        let phase = cfg.phases.phase(epoch);
        let lr = poly_lr(cfg.base_lr, epoch, max_epoch, cfg.lr_power)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let groups = make_subgroups(dataset.len(), cfg.subgroup_size, rng.random())?;
        let mut distances = PairDistances::default();
        let (mut ce_sum, mut pdml_sum, mut pdml_steps, mut steps, mut triples) = (T::zero(), T::zero(), 0, 0, 0);
        for batch in groups.chunks(groups_per_batch) {
            let batch: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
            let step = train_step(&params, &batch, dataset.samples(), cfg, phase, &mut rng, &mut distances)?;
            let total = step.total();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss {total} at epoch {}", epoch + 1)));
            }
            sgd_step(&mut params, &step.grad, &mut state, lr, &sgd)?;
            if !all_finite(params.flatten()) {
                return Err(Error::NonFinite(format!("parameters diverged at epoch {}", epoch + 1)));
            }
            ce_sum += step.ce;
            if let Some(p) = step.pdml {
                pdml_sum += p;
                pdml_steps += 1;
            }
            triples += step.triples;
            steps += 1;
        }
        let (miou, pixel_acc) = match eval {
            Some(ds) => {
                let cm = evaluate(&params, ds)?;
                (cm.miou().ok(), cm.pixel_accuracy().ok())
            }
            None => (None, None),
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            phase,
            lr: lr.as_f64(),
            ce_loss: ce_sum.as_f64() / steps.max(1) as f64,
            pdml_loss: if pdml_steps > 0 { pdml_sum.as_f64() / pdml_steps as f64 } else { 0.0 },
            triples,
            mean_pos_dist: distances.mean_positive(),
            mean_neg_dist: distances.mean_negative(),
            miou,
            pixel_acc,
            distances,
        });
    }
    Ok(TrainOutcome { params, log })
}
