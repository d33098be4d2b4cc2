use crate::error::{Error, Result};
use crate::griddata::ImageGrid;
use crate::scalar::Real;

use super::{ConvBlock, EmbeddingMap, ModelParams, ScoreMap, KERNEL};

/// Activations of one forward pass, kept for [`backward`].
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub embedding: EmbeddingMap<T>,
    pub logits: Vec<T>,
    pub scores: ScoreMap<T>,
    input: Vec<T>,
    /// Output of every hidden (ReLU) layer.
    hidden: Vec<Vec<T>>,
    fingerprint: u64,
}

impl<T> Forward<T> {
    pub fn height(&self) -> usize {
        self.embedding.height
    }

    pub fn width(&self) -> usize {
        self.embedding.width
    }
}

fn conv_forward<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    block: &ConvBlock,
    params: &[T],
    relu: bool,
) -> Vec<T> {
    let ConvBlock { cin, cout, .. } = *block;
    let weights = &params[block.weight..block.bias];
    let bias = &params[block.bias..block.bias + cout];
    let mut out = vec![T::zero(); height * width * cout];
    for r in 0..height {
        for c in 0..width {
            let acc = &mut out[(r * width + c) * cout..][..cout];
            acc.copy_from_slice(bias);
            for ky in 0..KERNEL {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&rr| rr < height) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&cc| cc < width) else {
                        continue;
                    };
                    let x = &input[(rr * width + cc) * cin..][..cin];
                    let taps = &weights[(ky * KERNEL + kx) * cin * cout..][..cin * cout];
                    for (&xv, row) in x.iter().zip(taps.chunks_exact(cout)) {
                        if xv == T::zero() {
                            continue;
                        }
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += xv * w;
                        }
                    }
                }
            }
            if relu {
                for a in acc.iter_mut() {
                    if *a < T::zero() {
                        *a = T::zero();
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `grad` and returns the
/// gradient with respect to the layer input.
fn conv_backward<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    block: &ConvBlock,
    params: &[T],
    grad_out: &[T],
    grad: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let ConvBlock { cin, cout, .. } = *block;
    let weights = &params[block.weight..block.bias];
    let mut grad_in = if need_input_grad {
        vec![T::zero(); height * width * cin]
    } else {
        Vec::new()
    };
    let (gw_all, rest) = grad[block.weight..].split_at_mut(block.bias - block.weight);
    let gb = &mut rest[..cout];
    for r in 0..height {
        for c in 0..width {
            let go = &grad_out[(r * width + c) * cout..][..cout];
            if go.iter().all(|&g| g == T::zero()) {
                continue;
            }
            for (b, &g) in gb.iter_mut().zip(go) {
                *b += g;
            }
            for ky in 0..KERNEL {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&rr| rr < height) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&cc| cc < width) else {
                        continue;
                    };
                    let q = (rr * width + cc) * cin;
                    let x = &input[q..q + cin];
                    let tap = (ky * KERNEL + kx) * cin * cout;
                    let gw = &mut gw_all[tap..tap + cin * cout];
                    for (ci, (&xv, grow)) in x.iter().zip(gw.chunks_exact_mut(cout)).enumerate() {
                        if xv != T::zero() {
                            for (gwv, &g) in grow.iter_mut().zip(go) {
                                *gwv += xv * g;
                            }
                        }
                        if need_input_grad {
                            let wrow = &weights[tap + ci * cout..][..cout];
                            let dot: T = wrow.iter().zip(go).map(|(&w, &g)| w * g).sum();
                            grad_in[q + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn check_input<T: Real>(img: &ImageGrid<T>, p: &ModelParams<T>) -> Result<()> {
    if img.channels() != p.config().channels_in {
        return Err(Error::Shape(format!(
            "image has {} channels, network expects {}",
            img.channels(),
            p.config().channels_in
        )));
    }
    Ok(())
}

fn run_features<T: Real>(img: &ImageGrid<T>, p: &ModelParams<T>) -> Result<(Vec<Vec<T>>, EmbeddingMap<T>)> {
    check_input(img, p)?;
    let (h, w) = (img.height(), img.width());
    let convs = &p.layout().convs;
    let mut hidden: Vec<Vec<T>> = Vec::with_capacity(convs.len() - 1);
    let last = convs.len() - 1;
    for block in &convs[..last] {
        let input = hidden.last().map_or(img.values(), |v| v.as_slice());
        let out = conv_forward(input, h, w, block, p.flatten(), true);
        hidden.push(out);
    }
    let input = hidden.last().map_or(img.values(), |v| v.as_slice());
    let values = conv_forward(input, h, w, &convs[last], p.flatten(), false);
    let embedding = EmbeddingMap {
        height: h,
        width: w,
        dim: p.config().embed_dim,
        values,
    };
    Ok((hidden, embedding))
}

fn classifier_logits<T: Real>(emb: &EmbeddingMap<T>, p: &ModelParams<T>) -> Result<Vec<T>> {
    let cfg = p.config();
    if emb.dim != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match classifier input {}",
            emb.dim, cfg.embed_dim
        )));
    }
    let k = cfg.num_classes;
    let layout = p.layout();
    let weights = &p.flatten()[layout.classifier_weight..layout.classifier_bias];
    let bias = &p.flatten()[layout.classifier_bias..];
    let mut logits = Vec::with_capacity(emb.height * emb.width * k);
    for e in emb.values.chunks_exact(emb.dim) {
        let start = logits.len();
        logits.extend_from_slice(bias);
        let out = &mut logits[start..];
        for (&ev, wrow) in e.iter().zip(weights.chunks_exact(k)) {
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += ev * wv;
            }
        }
    }
    Ok(logits)
}

/// Embedding map of `img`.
pub fn forward_features<T: Real>(img: &ImageGrid<T>, p: &ModelParams<T>) -> Result<EmbeddingMap<T>> {
    run_features(img, p).map(|(_, e)| e)
}

/// Class probabilities from an embedding map.
pub fn forward_classifier<T: Real>(emb: &EmbeddingMap<T>, p: &ModelParams<T>) -> Result<ScoreMap<T>> {
    let logits = classifier_logits(emb, p)?;
    Ok(ScoreMap::from_logits(emb.height, emb.width, p.config().num_classes, &logits))
}

/// Full forward pass retaining everything [`backward`] needs.
pub fn forward<T: Real>(img: &ImageGrid<T>, p: &ModelParams<T>) -> Result<Forward<T>> {
    let (hidden, embedding) = run_features(img, p)?;
    let logits = classifier_logits(&embedding, p)?;
    let scores = ScoreMap::from_logits(embedding.height, embedding.width, p.config().num_classes, &logits);
    Ok(Forward {
        embedding,
        logits,
        scores,
        input: img.values().to_vec(),
        hidden,
        fingerprint: p.fingerprint(),
    })
}

/// Reverse-mode gradient of a scalar objective with respect to every
/// parameter, given its gradient on the embedding map and/or on the logits.
///
/// Both upstream terms are optional; gradients from the two heads add up in
/// the feature extractor.
pub fn backward<T: Real>(
    cache: &Forward<T>,
    p: &ModelParams<T>,
    grad_embedding: Option<&[T]>,
    grad_logits: Option<&[T]>,
) -> Result<Vec<T>> {
    if cache.fingerprint != p.fingerprint() {
        return Err(Error::MissingCache);
    }
    let (h, w) = (cache.height(), cache.width());
    let cfg = p.config();
    let layout = p.layout();
    let (d, k) = (cfg.embed_dim, cfg.num_classes);
    let mut grad = vec![T::zero(); layout.len];
    let mut g_emb = match grad_embedding {
        Some(g) if g.len() != h * w * d => {
            return Err(Error::Shape(format!("embedding gradient has {} entries, expected {}", g.len(), h * w * d)))
        }
        Some(g) => g.to_vec(),
        None => vec![T::zero(); h * w * d],
    };

    if let Some(gl) = grad_logits {
        if gl.len() != h * w * k {
            return Err(Error::Shape(format!("logit gradient has {} entries, expected {}", gl.len(), h * w * k)));
        }
        let weights = &p.flatten()[layout.classifier_weight..layout.classifier_bias];
        let (gw, gb) = grad[layout.classifier_weight..].split_at_mut(d * k);
        for ((e, g), ge) in cache
            .embedding
            .values
            .chunks_exact(d)
            .zip(gl.chunks_exact(k))
            .zip(g_emb.chunks_exact_mut(d))
        {
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for (((&ev, gwrow), wrow), gev) in e.iter().zip(gw.chunks_exact_mut(k)).zip(weights.chunks_exact(k)).zip(ge.iter_mut()) {
                let mut dot = T::zero();
                for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(g) {
                    *gwv += ev * gv;
                    dot += wv * gv;
                }
                *gev += dot;
            }
        }
    }

    let mut upstream = g_emb;
    for (l, block) in layout.convs.iter().enumerate().rev() {
        let input: &[T] = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
        let grad_in = conv_backward(input, h, w, block, p.flatten(), &upstream, &mut grad, l > 0);
        if l > 0 {
            // ReLU: zero gradient where the activation was clamped (including exactly 0)
            upstream = grad_in;
            for (g, &a) in upstream.iter_mut().zip(&cache.hidden[l - 1]) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
        }
    }
    Ok(grad)
}
