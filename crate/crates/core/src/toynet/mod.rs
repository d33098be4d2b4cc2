//! Per-pixel embedding network and linear classifier.
//!
//! The feature extractor is a stack of 3x3, stride-1, same-padded
//! convolutions with ReLU between layers; the last convolution is linear and
//! its output is the embedding map. The classifier is a per-pixel affine map
//! from the embedding to class logits followed by softmax.
//!
//! All parameters live in one flat vector (see [`ParamLayout`]) so that the
//! optimizer and the finite-difference checker can treat them uniformly.

mod checkpoint;
mod forward;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{backward, forward, forward_classifier, forward_features, Forward};
pub use gradcheck::{numeric_grad_check, GradCheckReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Real};

/// Kernel side length of every convolution.
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub channels_in: usize,
    /// Output channels of the ReLU layers, in order.
    pub hidden: Vec<usize>,
    /// Output channels of the final (linear) convolution.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl NetConfig {
    /// Three convolutions of 8, 16 and 16 channels over RGB input.
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        Self {
            channels_in: 3,
            hidden: vec![8, 16],
            embed_dim: 16,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 {
            return Err(Error::Config("channels_in must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embedding dimension must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers need at least one channel".into()));
        }
        Ok(())
    }

    /// `(in, out)` channel counts of every convolution.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut cin = self.channels_in;
        for &cout in self.hidden.iter().chain(std::iter::once(&self.embed_dim)) {
            shapes.push((cin, cout));
            cin = cout;
        }
        shapes
    }
}

/// Offsets of each parameter block inside the flat vector.
///
/// Convolution weights are stored as `[tap][in][out]` with
/// `tap = ky * 3 + kx`; classifier weights as `[embed][class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub convs: Vec<ConvBlock>,
    pub classifier_weight: usize,
    pub classifier_bias: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ParamLayout {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut offset = 0;
        let convs = cfg
            .conv_shapes()
            .into_iter()
            .map(|(cin, cout)| {
                let block = ConvBlock {
                    cin,
                    cout,
                    weight: offset,
                    bias: offset + TAPS * cin * cout,
                };
                offset = block.bias + cout;
                block
            })
            .collect();
        let classifier_weight = offset;
        let classifier_bias = offset + cfg.embed_dim * cfg.num_classes;
        Self {
            convs,
            classifier_weight,
            classifier_bias,
            len: classifier_bias + cfg.num_classes,
        }
    }

    /// Index range of the classifier parameters.
    pub fn classifier_range(&self) -> std::ops::Range<usize> {
        self.classifier_weight..self.len
    }
}

/// Network parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: NetConfig,
    layout: ParamLayout,
    values: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Rebuilds parameters from a flat vector.
    pub fn from_flat(config: NetConfig, values: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.len {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, config needs {}",
                values.len(),
                layout.len
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn flatten(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Order-sensitive hash of the parameter bits; used to detect stale
    /// forward caches.
    pub(crate) fn fingerprint(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Draws weights from `U(-b, b)` with `b = sqrt(6 / fan_in)` for the
/// convolutions and `b = sqrt(3 / fan_in)` for the classifier. Biases are 0.
pub fn init_params<T: Real>(cfg: &NetConfig) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = vec![T::zero(); layout.len];
    for block in &layout.convs {
        let bound = (6.0 / (TAPS * block.cin) as f64).sqrt();
        for v in &mut values[block.weight..block.bias] {
            *v = T::lit(rng.random_range(-bound..bound));
        }
    }
    let bound = (3.0 / cfg.embed_dim as f64).sqrt();
    for v in &mut values[layout.classifier_weight..layout.classifier_bias] {
        *v = T::lit(rng.random_range(-bound..bound));
    }
    ModelParams::from_flat(cfg.clone(), values)
}

/// Per-pixel `dim`-vectors over an `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Real> EmbeddingMap<T> {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            values: vec![T::zero(); height * width * dim],
        }
    }

    pub fn vector(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn vector_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.dim;
        &mut self.values[start..start + self.dim]
    }
}

/// Per-pixel class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<T>,
}

impl<T: Real> ScoreMap<T> {
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// Most probable class and its probability; ties go to the lower id.
    pub fn argmax(&self, row: usize, col: usize) -> (usize, T) {
        self.pixel(row, col)
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
    }

    /// Argmax class per pixel in raster order.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.height * self.width)
            .map(|i| self.argmax(i / self.width, i % self.width).0)
            .collect()
    }

    /// Softmax of raw per-pixel logits.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[T]) -> Self {
        let mut probs = logits.to_vec();
        for px in probs.chunks_mut(classes) {
            softmax_in_place(px);
        }
        Self {
            height,
            width,
            classes,
            probs,
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
