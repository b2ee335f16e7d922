//! AAM-Softmax supervision at desk scale: cosine logits against
//! unit-normalized class weights, with the target-class angle penalized by
//! an additive margin before scaling, and a small supervised training loop
//! that fits a toy encoder with it.

use ndarray::{Array1, Array2, ArrayView2};

use super::{
    make_toy_encoder, orthonormal_rows, pool_segments, pool_segments_backward, randn_scaled,
    EncoderConfig, Nonlinearity, ToyEncoder, ToyLabError,
};
use crate::math;
use crate::rng::seeded_stream;

/// Smallest sin(theta) used in the margin derivative. The true derivative
/// of cos(theta + m) with respect to cos(theta) is unbounded as theta
/// approaches 0; the forward value stays exact, only the gradient is
/// clamped near perfect alignment.
pub const SIN_FLOOR: f64 = 1e-4;

/// Margin, scale, and unit-normalized class weights of an AAM-Softmax
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AamConfig {
    margin: f64,
    scale: f64,
    /// `C x D`, rows unit-norm.
    class_weights: Array2<f64>,
}

pub(crate) fn check_margin(got: f64) -> Result<(), ToyLabError> {
    if !(got.is_finite() && (0.0..std::f64::consts::FRAC_PI_2).contains(&got)) {
        return Err(ToyLabError::BadMargin { got });
    }
    Ok(())
}

pub(crate) fn check_scale(got: f64) -> Result<(), ToyLabError> {
    if !(got.is_finite() && got > 0.0) {
        return Err(ToyLabError::BadScale { got });
    }
    Ok(())
}

impl AamConfig {
    /// Validates the margin and scale and unit-normalizes the class weight
    /// rows; a near-zero row is an error.
    pub fn new(
        margin: f64,
        scale: f64,
        mut class_weights: Array2<f64>,
    ) -> Result<Self, ToyLabError> {
        check_margin(margin)?;
        check_scale(scale)?;
        for (class, mut row) in class_weights.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(ToyLabError::ZeroClassWeight { class });
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self {
            margin,
            scale,
            class_weights,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn class_weights(&self) -> ArrayView2<'_, f64> {
        self.class_weights.view()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.class_weights.ncols()
    }
}

/// Loss plus gradients with respect to the raw (pre-normalization)
/// embeddings and class weights.
pub(crate) struct AamGrads {
    pub loss: f64,
    pub dembeddings: Array2<f64>,
    pub dclass_weights: Array2<f64>,
}

/// Core AAM computation on raw embeddings and raw class weights; both are
/// normalized internally, and the returned gradients are with respect to
/// the raw values (normalization included), so central finite differences
/// on raw entries match them.
pub(crate) fn aam_forward_backward(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    class_weights: ArrayView2<f64>,
    margin: f64,
    scale: f64,
) -> Result<AamGrads, ToyLabError> {
    check_margin(margin)?;
    check_scale(scale)?;
    let batch = embeddings.nrows();
    if batch == 0 {
        return Err(ToyLabError::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(ToyLabError::LabelCountMismatch {
            batch,
            labels: labels.len(),
        });
    }
    let classes = class_weights.nrows();
    if embeddings.ncols() != class_weights.ncols() {
        return Err(ToyLabError::EmbedDimMismatch {
            expected: class_weights.ncols(),
            got: embeddings.ncols(),
        });
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ToyLabError::LabelOutOfRange {
                index,
                label,
                num_classes: classes,
            });
        }
    }

    let mut embed_norms = Array1::zeros(batch);
    let mut unit_embeddings = embeddings.to_owned();
    for (index, mut row) in unit_embeddings.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(ToyLabError::ZeroEmbedding { index });
        }
        row.mapv_inplace(|v| v / norm);
        embed_norms[index] = norm;
    }
    let mut weight_norms = Array1::zeros(classes);
    let mut unit_weights = class_weights.to_owned();
    for (class, mut row) in unit_weights.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(ToyLabError::ZeroClassWeight { class });
        }
        row.mapv_inplace(|v| v / norm);
        weight_norms[class] = norm;
    }

    let cos = unit_embeddings.dot(&unit_weights.t());
    let cos_m = margin.cos();
    let sin_m = margin.sin();
    let mut logits = &cos * scale;
    // cos(theta + m) = cos theta cos m - sin theta sin m; with m = 0 the
    // two trig constants are exactly 1 and 0, so the target logit reduces
    // to the plain scaled cosine bit for bit.
    let mut margin_factor = Array1::zeros(batch);
    for (i, &label) in labels.iter().enumerate() {
        let c = cos[(i, label)];
        let sin = (1.0 - c * c).max(0.0).sqrt();
        logits[(i, label)] = scale * (c * cos_m - sin * sin_m);
        margin_factor[i] = cos_m + sin_m * c / sin.max(SIN_FLOOR);
    }

    let loss = math::cross_entropy_mean(logits.view(), labels);
    let mut dcos = math::cross_entropy_grad(logits.view(), labels);
    dcos.mapv_inplace(|v| v * scale);
    for (i, &label) in labels.iter().enumerate() {
        dcos[(i, label)] *= margin_factor[i];
    }

    // d cos_ic / d e_i = (w_c - cos_ic u_i) / |e_i| and symmetrically for
    // the weights; both pass through the unit normalization.
    let mut dembeddings = dcos.dot(&unit_weights);
    for (i, mut row) in dembeddings.rows_mut().into_iter().enumerate() {
        let u = unit_embeddings.row(i);
        let radial = row.dot(&u);
        row.scaled_add(-radial, &u);
        row.mapv_inplace(|v| v / embed_norms[i]);
    }
    let mut dclass_weights = dcos.t().dot(&unit_embeddings);
    for (c, mut row) in dclass_weights.rows_mut().into_iter().enumerate() {
        let w = unit_weights.row(c);
        let radial = row.dot(&w);
        row.scaled_add(-radial, &w);
        row.mapv_inplace(|v| v / weight_norms[c]);
    }

    Ok(AamGrads {
        loss,
        dembeddings,
        dclass_weights,
    })
}

/// AAM-Softmax loss: scaled cosine logits with the target-class angle
/// shifted by the margin, then softmax cross-entropy. Embeddings are
/// normalized internally.
pub fn aam_softmax_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<f64, ToyLabError> {
    Ok(aam_forward_backward(
        embeddings,
        labels,
        cfg.class_weights.view(),
        cfg.margin,
        cfg.scale,
    )?
    .loss)
}

/// Fraction of embeddings whose nearest class weight (by cosine, no
/// margin) matches the label.
pub fn cosine_accuracy(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<f64, ToyLabError> {
    let batch = embeddings.nrows();
    if batch == 0 {
        return Err(ToyLabError::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(ToyLabError::LabelCountMismatch {
            batch,
            labels: labels.len(),
        });
    }
    if embeddings.ncols() != cfg.embed_dim() {
        return Err(ToyLabError::EmbedDimMismatch {
            expected: cfg.embed_dim(),
            got: embeddings.ncols(),
        });
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let e = embeddings.row(i);
        let norm = e.dot(&e).sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(ToyLabError::ZeroEmbedding { index: i });
        }
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for (c, w) in cfg.class_weights.rows().into_iter().enumerate() {
            let cos = e.dot(&w) / norm;
            if cos > best_cos {
                best_cos = cos;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch as f64)
}

/// Supervised toy training setup: a separable synthetic corpus and an
/// encoder fitted to it with AAM-Softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub utterances_per_class: usize,
    pub frames: usize,
    pub margin: f64,
    pub scale: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Distance scale between class means in input space.
    pub class_separation: f64,
    /// Per-frame noise standard deviation.
    pub noise_std: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                input_dim: 6,
                layer_dims: vec![8, 6],
                nonlinearity: Nonlinearity::Tanh,
                weight_style: super::WeightStyle::Random,
                bottleneck: None,
            },
            classes: 4,
            utterances_per_class: 6,
            frames: 10,
            margin: 0.2,
            scale: 30.0,
            steps: 250,
            learning_rate: 0.2,
            class_separation: 3.0,
            noise_std: 0.5,
        }
    }
}

/// A finished supervised run.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedRun {
    pub encoder: ToyEncoder,
    pub aam: AamConfig,
    /// Training loss per step.
    pub loss_trace: Vec<f64>,
    /// Margin-free cosine classification accuracy on the training corpus
    /// under the final parameters.
    pub train_accuracy: f64,
}

/// Trains a toy encoder with AAM-Softmax by full-batch gradient descent on
/// mean-pooled utterance embeddings; class weights take projected steps
/// (renormalized to unit rows after each update). Deterministic per
/// (config, seed).
pub fn train_supervised_toy(
    cfg: &SupervisedConfig,
    seed: u64,
) -> Result<SupervisedRun, ToyLabError> {
    check_margin(cfg.margin)?;
    check_scale(cfg.scale)?;
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(ToyLabError::BadLearningRate {
            got: cfg.learning_rate,
        });
    }
    if cfg.classes < 2 {
        return Err(ToyLabError::TooFewClasses { got: cfg.classes });
    }
    if cfg.classes > cfg.encoder.input_dim {
        return Err(ToyLabError::TooManyClasses {
            classes: cfg.classes,
            dim: cfg.encoder.input_dim,
        });
    }
    if cfg.utterances_per_class == 0 {
        return Err(ToyLabError::EmptyCorpus);
    }
    if cfg.frames == 0 {
        return Err(ToyLabError::NoFrames);
    }

    let mut encoder = make_toy_encoder(&cfg.encoder, seed)?;
    let d_enc = encoder.output_dim();

    let mut data_rng = seeded_stream(seed, 1);
    let means = orthonormal_rows(&mut data_rng, cfg.classes, cfg.encoder.input_dim);
    let batch = cfg.classes * cfg.utterances_per_class;
    let mut labels = Vec::with_capacity(batch);
    let mut stacked = Array2::zeros((batch * cfg.frames, cfg.encoder.input_dim));
    for c in 0..cfg.classes {
        for u in 0..cfg.utterances_per_class {
            let i = c * cfg.utterances_per_class + u;
            labels.push(c);
            let mut rows =
                randn_scaled(&mut data_rng, cfg.frames, cfg.encoder.input_dim, cfg.noise_std);
            rows += &(&means.row(c) * cfg.class_separation);
            stacked
                .slice_mut(ndarray::s![i * cfg.frames..(i + 1) * cfg.frames, ..])
                .assign(&rows);
        }
    }

    let mut init_rng = seeded_stream(seed, 2);
    let mut class_weights = randn_scaled(&mut init_rng, cfg.classes, d_enc, 1.0);
    normalize_rows(&mut class_weights)?;

    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let cache = encoder.forward_cached(stacked.view())?;
        let embeddings = pool_segments(
            cache.post.last().expect("encoder has layers").view(),
            cfg.frames,
        );
        // A runaway step leaves non-finite weights, which surface here as
        // non-finite embeddings; past step 0 that is divergence, not a bad
        // input.
        if step > 0 && embeddings.iter().any(|v| !v.is_finite()) {
            return Err(ToyLabError::Diverged { step });
        }
        let grads = aam_forward_backward(
            embeddings.view(),
            &labels,
            class_weights.view(),
            cfg.margin,
            cfg.scale,
        )?;
        if !grads.loss.is_finite() {
            return Err(ToyLabError::Diverged { step });
        }
        loss_trace.push(grads.loss);

        let dstacked = pool_segments_backward(grads.dembeddings.view(), cfg.frames);
        let weight_grads = encoder.backward(&cache, dstacked.view());
        for (layer, grad) in encoder.layers.iter_mut().zip(&weight_grads) {
            layer.weight.scaled_add(-cfg.learning_rate, grad);
        }
        class_weights.scaled_add(-cfg.learning_rate, &grads.dclass_weights);
        // A non-finite row norm after the update means the step overflowed,
        // which is divergence rather than a degenerate class weight.
        if class_weights.iter().any(|v| !v.is_finite()) {
            return Err(ToyLabError::Diverged { step });
        }
        normalize_rows(&mut class_weights)?;
    }

    let aam = AamConfig::new(cfg.margin, cfg.scale, class_weights)?;
    let final_embeddings = pool_segments(encoder.forward(stacked.view())?.view(), cfg.frames);
    let train_accuracy = cosine_accuracy(final_embeddings.view(), &labels, &aam)?;
    Ok(SupervisedRun {
        encoder,
        aam,
        loss_trace,
        train_accuracy,
    })
}

// Scales by the max entry before squaring so rows with entries near the
// f64 range limit still normalize instead of overflowing to an infinite
// norm.
fn normalize_rows(m: &mut Array2<f64>) -> Result<(), ToyLabError> {
    for (class, mut row) in m.rows_mut().into_iter().enumerate() {
        let peak = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !(peak.is_finite() && peak > 1e-12) {
            return Err(ToyLabError::ZeroClassWeight { class });
        }
        let norm = peak * row.iter().map(|v| (v / peak).powi(2)).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}
