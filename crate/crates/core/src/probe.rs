//! Weighted-sum layer probing.
//!
//! A probe scores how useful each encoder layer is for a task: layer
//! outputs are combined as `sum_l softmax(alpha)_l * (A_l x_l)` with
//! trainable logits `alpha` and optional per-layer projections `A_l`
//! (required whenever layer dimensions differ), then a linear softmax head
//! is trained on the mean-pooled combination. The per-layer contribution
//! score is `w_l * ||A_l||_F`, or plain `w_l` when projections are
//! disabled, so gain absorbed into a projection is still attributed to its
//! layer.
//!
//! All gradients are hand-derived; [`gradient_check`] compares them against
//! central finite differences over every parameter.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::actvstore::ActivationSet;
use crate::math;
use crate::rng::seeded_rng;

/// Denominator floor for gradient-check relative errors: components whose
/// analytic and numeric gradients are both below this magnitude are
/// compared at an absolute scale of `floor * tolerance` instead of blowing
/// up a ratio of two noise terms.
pub const GRAD_CHECK_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("combiner covers {expected} layers, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("layer {layer}: row count {rows} differs from {expected}")]
    RowMismatch {
        layer: usize,
        rows: usize,
        expected: usize,
    },
    #[error(
        "layer {layer} has dim {dim} but the combiner outputs dim {out_dim} \
         and projections are disabled; enable projections"
    )]
    MissingProjections {
        layer: usize,
        dim: usize,
        out_dim: usize,
    },
    #[error(
        "layer {layer}: projection is {rows}x{cols}, expected {dim}x{out_dim}"
    )]
    ProjectionShape {
        layer: usize,
        rows: usize,
        cols: usize,
        dim: usize,
        out_dim: usize,
    },
    #[error("{got} projections for {expected} layers")]
    ProjectionCount { expected: usize, got: usize },
    #[error("head weight is {rows}x{cols}, expected {out_dim}x{classes}")]
    HeadShape {
        rows: usize,
        cols: usize,
        out_dim: usize,
        classes: usize,
    },
    #[error("cannot mean-pool an empty sequence")]
    EmptyPool,
    #[error("{got} labels for {expected} utterances")]
    LabelCount { expected: usize, got: usize },
    #[error("label {label} at utterance {utterance} is outside [0, {num_classes})")]
    LabelRange {
        utterance: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("classification needs at least 2 classes, got {got}")]
    TooFewClasses { got: usize },
    #[error("need at least {need} utterances to split off a held-out set, got {got}")]
    TooFewUtterances { need: usize, got: usize },
    #[error("out_dim {got} conflicts with the common layer dim {expected} when projections are disabled")]
    OutDimConflict { got: usize, expected: usize },
    #[error("holdout fraction must lie in (0, 1), got {got}")]
    BadHoldout { got: f64 },
    #[error("learning rate must be finite and nonnegative, got {got}")]
    BadLearningRate { got: f64 },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("perturbation must lie in [1e-7, 1e-3], got {eps}")]
    BadPerturbation { eps: f64 },
}

/// Per-layer projections of the combiner.
#[derive(Debug, Clone, PartialEq)]
pub enum Projections {
    /// Layers are used as-is; requires every layer dim to equal `out_dim`.
    Disabled,
    /// One `D_l x D_out` matrix per layer, applied frame-wise.
    Linear(Vec<Array2<f64>>),
}

/// Softmax-weighted sum of layer outputs with optional projections.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSumCombiner {
    /// Pre-softmax layer weights.
    pub logits: Array1<f64>,
    pub projections: Projections,
    pub out_dim: usize,
}

impl WeightedSumCombiner {
    /// Combiner without projections over `num_layers` layers of equal
    /// dimension `dim`; uniform initial weights.
    pub fn identity(num_layers: usize, dim: usize) -> Self {
        Self {
            logits: Array1::zeros(num_layers),
            projections: Projections::Disabled,
            out_dim: dim,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.logits.len()
    }

    /// Normalized layer weights softmax(logits); sums to 1.
    pub fn weights(&self) -> Array1<f64> {
        math::softmax(self.logits.view())
    }

    /// Checks that this combiner can consume layers of the given dims.
    pub fn validate_against(&self, layer_dims: &[usize]) -> Result<(), ProbeError> {
        if layer_dims.len() != self.num_layers() {
            return Err(ProbeError::LayerCountMismatch {
                expected: self.num_layers(),
                got: layer_dims.len(),
            });
        }
        match &self.projections {
            Projections::Disabled => {
                for (layer, &dim) in layer_dims.iter().enumerate() {
                    if dim != self.out_dim {
                        return Err(ProbeError::MissingProjections {
                            layer,
                            dim,
                            out_dim: self.out_dim,
                        });
                    }
                }
            }
            Projections::Linear(mats) => {
                if mats.len() != layer_dims.len() {
                    return Err(ProbeError::ProjectionCount {
                        expected: layer_dims.len(),
                        got: mats.len(),
                    });
                }
                for (layer, (mat, &dim)) in mats.iter().zip(layer_dims).enumerate() {
                    if mat.nrows() != dim || mat.ncols() != self.out_dim {
                        return Err(ProbeError::ProjectionShape {
                            layer,
                            rows: mat.nrows(),
                            cols: mat.ncols(),
                            dim,
                            out_dim: self.out_dim,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Frame-wise weighted combination: `sum_l w_l * (A_l x_l)`, or
/// `sum_l w_l * x_l` without projections. All layers must share the row
/// count (broadcast segment-level layers first).
pub fn combine(
    combiner: &WeightedSumCombiner,
    layers: &[ArrayView2<f64>],
) -> Result<Array2<f64>, ProbeError> {
    let dims: Vec<usize> = layers.iter().map(|x| x.ncols()).collect();
    combiner.validate_against(&dims)?;
    let t = layers[0].nrows();
    for (layer, x) in layers.iter().enumerate() {
        if x.nrows() != t {
            return Err(ProbeError::RowMismatch {
                layer,
                rows: x.nrows(),
                expected: t,
            });
        }
    }
    let w = combiner.weights();
    let mut out = Array2::zeros((t, combiner.out_dim));
    match &combiner.projections {
        Projections::Disabled => {
            for (l, x) in layers.iter().enumerate() {
                out.scaled_add(w[l], x);
            }
        }
        Projections::Linear(mats) => {
            for (l, x) in layers.iter().enumerate() {
                out.scaled_add(w[l], &x.dot(&mats[l]));
            }
        }
    }
    Ok(out)
}

/// Per-layer contribution scores: `w_l * ||A_l||_F`, or the weights alone
/// when projections are disabled. Nonnegative.
pub fn contribution_scores(combiner: &WeightedSumCombiner) -> Result<Array1<f64>, ProbeError> {
    let w = combiner.weights();
    match &combiner.projections {
        Projections::Disabled => Ok(w),
        Projections::Linear(mats) => {
            if mats.len() != combiner.num_layers() {
                return Err(ProbeError::ProjectionCount {
                    expected: combiner.num_layers(),
                    got: mats.len(),
                });
            }
            Ok(Array1::from_iter(
                w.iter()
                    .zip(mats)
                    .map(|(wl, a)| wl * math::frobenius_norm(a.view())),
            ))
        }
    }
}

/// Column means of a sequence.
pub fn mean_pool(seq: ArrayView2<f64>) -> Result<Array1<f64>, ProbeError> {
    if seq.nrows() == 0 {
        return Err(ProbeError::EmptyPool);
    }
    Ok(seq.mean_axis(Axis(0)).expect("nonempty sequence"))
}

/// What a probe is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTaskKind {
    UtteranceClassification,
}

/// A labeled activation corpus for probing.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub kind: ProbeTaskKind,
    pub inputs: ActivationSet,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProbeTask {
    pub fn utterance_classification(
        inputs: ActivationSet,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, ProbeError> {
        if labels.len() != inputs.num_utterances() {
            return Err(ProbeError::LabelCount {
                expected: inputs.num_utterances(),
                got: labels.len(),
            });
        }
        for (utterance, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(ProbeError::LabelRange {
                    utterance,
                    label,
                    num_classes,
                });
            }
        }
        Ok(Self {
            kind: ProbeTaskKind::UtteranceClassification,
            inputs,
            labels,
            num_classes,
        })
    }

    /// Per-layer feature dimensions.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.inputs.layers().iter().map(|l| l.dim()).collect()
    }

    /// Mean-pooled features, one `n x D_l` matrix per layer. Combination
    /// and projection are linear frame-wise maps, so pooling first and
    /// combining pooled features gives the same utterance vectors as
    /// combining frames and pooling afterward.
    pub fn pooled_features(&self) -> Vec<Array2<f64>> {
        let n = self.inputs.num_utterances();
        self.inputs
            .layers()
            .iter()
            .map(|layer| {
                let mut out = Array2::zeros((n, layer.dim()));
                for (u, seq) in layer.sequences.iter().enumerate() {
                    let pooled = mean_pool(seq.mapv(f64::from).view())
                        .expect("activation sequences are nonempty");
                    out.row_mut(u).assign(&pooled);
                }
                out
            })
            .collect()
    }
}

/// Gradient-descent settings for probe training.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Train per-layer projections. Must be on when layer dims differ.
    pub use_projections: bool,
    /// Combined dimension; defaults to the largest layer dim with
    /// projections, or the common layer dim without.
    pub out_dim: Option<usize>,
    /// Fraction of utterances held out for the accuracy estimate.
    pub holdout_fraction: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            use_projections: true,
            out_dim: None,
            holdout_fraction: 0.2,
        }
    }
}

/// Linear softmax classifier on the combined pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `D_out x classes`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Everything the probe loss depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub combiner: WeightedSumCombiner,
    pub head: LinearHead,
}

/// Resolved shapes for one probe: layer dims, combined dim, class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSetup {
    pub layer_dims: Vec<usize>,
    pub out_dim: usize,
    pub use_projections: bool,
    pub num_classes: usize,
}

impl ProbeSetup {
    pub fn from_task(task: &ProbeTask, cfg: &ProbeTrainConfig) -> Result<Self, ProbeError> {
        if task.num_classes < 2 {
            return Err(ProbeError::TooFewClasses {
                got: task.num_classes,
            });
        }
        let layer_dims = task.layer_dims();
        let out_dim = if cfg.use_projections {
            cfg.out_dim
                .unwrap_or_else(|| layer_dims.iter().copied().max().expect("layers nonempty"))
        } else {
            let common = layer_dims[0];
            if let Some((layer, &dim)) = layer_dims
                .iter()
                .enumerate()
                .find(|(_, &dim)| dim != common)
            {
                return Err(ProbeError::MissingProjections {
                    layer,
                    dim,
                    out_dim: common,
                });
            }
            match cfg.out_dim {
                Some(d) if d != common => {
                    return Err(ProbeError::OutDimConflict {
                        got: d,
                        expected: common,
                    })
                }
                _ => common,
            }
        };
        Ok(Self {
            layer_dims,
            out_dim,
            use_projections: cfg.use_projections,
            num_classes: task.num_classes,
        })
    }
}

impl ProbeParams {
    /// Training initialization: zero logits (uniform weights), projections
    /// with N(0, 1/D_l) entries so each keeps input scale roughly unit,
    /// zero head.
    pub fn init_for_training(setup: &ProbeSetup, rng: &mut impl Rng) -> Self {
        let projections = if setup.use_projections {
            Projections::Linear(random_projections(setup, rng))
        } else {
            Projections::Disabled
        };
        Self {
            combiner: WeightedSumCombiner {
                logits: Array1::zeros(setup.layer_dims.len()),
                projections,
                out_dim: setup.out_dim,
            },
            head: LinearHead {
                weight: Array2::zeros((setup.out_dim, setup.num_classes)),
                bias: Array1::zeros(setup.num_classes),
            },
        }
    }

    /// Fully random point, for gradient checking away from the symmetric
    /// zero-head initialization where many gradients vanish.
    pub fn random_init(setup: &ProbeSetup, rng: &mut impl Rng) -> Self {
        let projections = if setup.use_projections {
            Projections::Linear(random_projections(setup, rng))
        } else {
            Projections::Disabled
        };
        let head_scale = 1.0 / (setup.out_dim as f64).sqrt();
        Self {
            combiner: WeightedSumCombiner {
                logits: Array1::from_shape_fn(setup.layer_dims.len(), |_| {
                    let v: f64 = StandardNormal.sample(rng);
                    0.5 * v
                }),
                projections,
                out_dim: setup.out_dim,
            },
            head: LinearHead {
                weight: Array2::from_shape_fn((setup.out_dim, setup.num_classes), |_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v * head_scale
                }),
                bias: Array1::from_shape_fn(setup.num_classes, |_| {
                    let v: f64 = StandardNormal.sample(rng);
                    0.1 * v
                }),
            },
        }
    }

    fn validate(&self, setup: &ProbeSetup) -> Result<(), ProbeError> {
        self.combiner.validate_against(&setup.layer_dims)?;
        let (rows, cols) = self.head.weight.dim();
        if rows != setup.out_dim || cols != setup.num_classes || self.head.bias.len() != cols {
            return Err(ProbeError::HeadShape {
                rows,
                cols,
                out_dim: setup.out_dim,
                classes: setup.num_classes,
            });
        }
        Ok(())
    }
}

fn random_projections(setup: &ProbeSetup, rng: &mut impl Rng) -> Vec<Array2<f64>> {
    setup
        .layer_dims
        .iter()
        .map(|&dim| {
            let scale = 1.0 / (dim as f64).sqrt();
            Array2::from_shape_fn((dim, setup.out_dim), |_| {
                let v: f64 = StandardNormal.sample(rng);
                v * scale
            })
        })
        .collect()
}

/// A trained probe with its held-out accuracy and layer attribution.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub combiner: WeightedSumCombiner,
    pub head: LinearHead,
    /// Accuracy on the held-out utterances.
    pub accuracy: f64,
    /// Final contribution scores, one per layer.
    pub contribution: Array1<f64>,
    /// Training loss per step.
    pub loss_trace: Vec<f64>,
}

struct Grads {
    logits: Array1<f64>,
    projections: Option<Vec<Array2<f64>>>,
    head_weight: Array2<f64>,
    head_bias: Array1<f64>,
}

/// Head logits for pooled per-layer features (rows = utterances).
fn forward(features: &[Array2<f64>], params: &ProbeParams) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = features.iter().map(|f| f.view()).collect();
    let combined = combine(&params.combiner, &views).expect("shapes validated upfront");
    combined.dot(&params.head.weight) + &params.head.bias
}

fn loss_only(features: &[Array2<f64>], labels: &[usize], params: &ProbeParams) -> f64 {
    math::cross_entropy_mean(forward(features, params).view(), labels)
}

fn loss_and_grads(
    features: &[Array2<f64>],
    labels: &[usize],
    params: &ProbeParams,
) -> (f64, Grads) {
    let w = params.combiner.weights();
    let num_layers = params.combiner.num_layers();
    // P_l = S_l A_l (or S_l itself); cached for both the forward pass and
    // the logit gradients.
    let projected: Vec<Array2<f64>> = match &params.combiner.projections {
        Projections::Disabled => features.to_vec(),
        Projections::Linear(mats) => features
            .iter()
            .zip(mats)
            .map(|(s, a)| s.dot(a))
            .collect(),
    };
    let n = features[0].nrows();
    let mut combined = Array2::zeros((n, params.combiner.out_dim));
    for (l, p) in projected.iter().enumerate() {
        combined.scaled_add(w[l], p);
    }
    let head_logits = combined.dot(&params.head.weight) + &params.head.bias;
    let loss = math::cross_entropy_mean(head_logits.view(), labels);

    let dlogits = math::cross_entropy_grad(head_logits.view(), labels);
    let head_weight = combined.t().dot(&dlogits);
    let head_bias = dlogits.sum_axis(Axis(0));
    let dcombined = dlogits.dot(&params.head.weight.t());

    // dL/dw_l = <P_l, dL/dcombined>; softmax backward turns these into
    // logit gradients: dL/dalpha_k = w_k (g_k - sum_j w_j g_j).
    let g: Vec<f64> = projected
        .iter()
        .map(|p| (p * &dcombined).sum())
        .collect();
    let g_bar: f64 = w.iter().zip(&g).map(|(wl, gl)| wl * gl).sum();
    let logits = Array1::from_shape_fn(num_layers, |k| w[k] * (g[k] - g_bar));

    let projections = match &params.combiner.projections {
        Projections::Disabled => None,
        Projections::Linear(_) => Some(
            features
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let mut d = s.t().dot(&dcombined);
                    d.mapv_inplace(|v| v * w[l]);
                    d
                })
                .collect(),
        ),
    };
    (
        loss,
        Grads {
            logits,
            projections,
            head_weight,
            head_bias,
        },
    )
}

fn apply_grads(params: &mut ProbeParams, grads: &Grads, lr: f64) {
    params.combiner.logits.scaled_add(-lr, &grads.logits);
    if let (Projections::Linear(mats), Some(dmats)) =
        (&mut params.combiner.projections, &grads.projections)
    {
        for (mat, dmat) in mats.iter_mut().zip(dmats) {
            mat.scaled_add(-lr, dmat);
        }
    }
    params.head.weight.scaled_add(-lr, &grads.head_weight);
    params.head.bias.scaled_add(-lr, &grads.head_bias);
}

fn gather(features: &[Array2<f64>], idx: &[usize]) -> Vec<Array2<f64>> {
    features
        .iter()
        .map(|f| {
            let mut out = Array2::zeros((idx.len(), f.ncols()));
            for (row, &u) in idx.iter().enumerate() {
                out.row_mut(row).assign(&f.row(u));
            }
            out
        })
        .collect()
}

fn accuracy(features: &[Array2<f64>], labels: &[usize], params: &ProbeParams) -> f64 {
    let logits = forward(features, params);
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Trains combiner, projections, and head jointly by full-batch gradient
/// descent on softmax cross-entropy over mean-pooled combined features.
///
/// The seed drives both the 80/20 train/held-out split (seeded shuffle of
/// utterance order, last fifth held out) and the projection
/// initialization, so a (config, seed) pair is fully reproducible.
pub fn train_probe(
    task: &ProbeTask,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<ProbeResult, ProbeError> {
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(ProbeError::BadHoldout {
            got: cfg.holdout_fraction,
        });
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(ProbeError::BadLearningRate {
            got: cfg.learning_rate,
        });
    }
    let setup = ProbeSetup::from_task(task, cfg)?;
    let n = task.inputs.num_utterances();
    let n_test = ((n as f64 * cfg.holdout_fraction).round() as usize).max(1);
    if n_test >= n {
        return Err(ProbeError::TooFewUtterances { need: 2, got: n });
    }

    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let (train_idx, test_idx) = order.split_at(n - n_test);

    let mut params = ProbeParams::init_for_training(&setup, &mut rng);
    params.validate(&setup).expect("fresh params fit the setup");

    let features = task.pooled_features();
    let train_features = gather(&features, train_idx);
    let train_labels: Vec<usize> = train_idx.iter().map(|&u| task.labels[u]).collect();
    let test_features = gather(&features, test_idx);
    let test_labels: Vec<usize> = test_idx.iter().map(|&u| task.labels[u]).collect();

    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_grads(&train_features, &train_labels, &params);
        if !loss.is_finite() {
            return Err(ProbeError::Diverged { step });
        }
        loss_trace.push(loss);
        apply_grads(&mut params, &grads, cfg.learning_rate);
    }

    let accuracy = accuracy(&test_features, &test_labels, &params);
    let contribution = contribution_scores(&params.combiner)?;
    Ok(ProbeResult {
        combiner: params.combiner,
        head: params.head,
        accuracy,
        contribution,
        loss_trace,
    })
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all parameters (with the
    /// [`GRAD_CHECK_REL_FLOOR`] denominator floor).
    pub max_rel_error: f64,
    /// Largest absolute difference between analytic and central-difference
    /// gradients.
    pub max_abs_error: f64,
    pub params_checked: usize,
}

fn param_count(params: &ProbeParams) -> usize {
    let proj: usize = match &params.combiner.projections {
        Projections::Disabled => 0,
        Projections::Linear(mats) => mats.iter().map(|m| m.len()).sum(),
    };
    params.combiner.logits.len() + proj + params.head.weight.len() + params.head.bias.len()
}

/// Adds `delta` to the flat parameter at `index`; the flat order is
/// logits, projections layer by layer, head weight, head bias.
fn perturb(params: &mut ProbeParams, index: usize, delta: f64) {
    let mut idx = index;
    let logits = params.combiner.logits.len();
    if idx < logits {
        params.combiner.logits[idx] += delta;
        return;
    }
    idx -= logits;
    if let Projections::Linear(mats) = &mut params.combiner.projections {
        for mat in mats {
            if idx < mat.len() {
                mat.as_slice_mut().expect("standard layout")[idx] += delta;
                return;
            }
            idx -= mat.len();
        }
    }
    if idx < params.head.weight.len() {
        params.head.weight.as_slice_mut().expect("standard layout")[idx] += delta;
        return;
    }
    idx -= params.head.weight.len();
    params.head.bias[idx] += delta;
}

fn grad_at(params: &ProbeParams, grads: &Grads, index: usize) -> f64 {
    let mut idx = index;
    let logits = params.combiner.logits.len();
    if idx < logits {
        return grads.logits[idx];
    }
    idx -= logits;
    if let Some(dmats) = &grads.projections {
        for dmat in dmats {
            if idx < dmat.len() {
                return dmat.as_slice().expect("standard layout")[idx];
            }
            idx -= dmat.len();
        }
    }
    if idx < grads.head_weight.len() {
        return grads.head_weight.as_slice().expect("standard layout")[idx];
    }
    idx -= grads.head_weight.len();
    grads.head_bias[idx]
}

/// Compares the analytic gradient of the probe loss (over the whole task
/// corpus) against central finite differences for every parameter of the
/// combiner, projections, and head.
///
/// The relative error divides by `max(|analytic| + |numeric|,`
/// [`GRAD_CHECK_REL_FLOOR`]`)`, so near-zero gradient components are judged
/// at absolute scale rather than as a ratio of two rounding errors.
pub fn gradient_check(
    task: &ProbeTask,
    params: &ProbeParams,
    eps: f64,
) -> Result<GradCheckReport, ProbeError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(ProbeError::BadPerturbation { eps });
    }
    let setup = ProbeSetup {
        layer_dims: task.layer_dims(),
        out_dim: params.combiner.out_dim,
        use_projections: matches!(params.combiner.projections, Projections::Linear(_)),
        num_classes: task.num_classes,
    };
    params.validate(&setup)?;
    let features = task.pooled_features();
    let (_, grads) = loss_and_grads(&features, &task.labels, params);
    let total = param_count(params);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for index in 0..total {
        let mut plus = params.clone();
        perturb(&mut plus, index, eps);
        let mut minus = params.clone();
        perturb(&mut minus, index, -eps);
        let numeric =
            (loss_only(&features, &task.labels, &plus) - loss_only(&features, &task.labels, &minus))
                / (2.0 * eps);
        let analytic = grad_at(params, &grads, index);
        let abs = (numeric - analytic).abs();
        let rel = abs / (numeric.abs() + analytic.abs()).max(GRAD_CHECK_REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        params_checked: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actvstore::LayerActivation;
    use ndarray::array;

    fn randn2(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Frame-level activation set from f64 layer data, layer-major.
    fn set_from(layers_f64: Vec<Vec<Array2<f64>>>) -> ActivationSet {
        let n = layers_f64[0].len();
        let utterance_ids = (0..n).map(|u| format!("utt{u:03}")).collect();
        let layers = layers_f64
            .into_iter()
            .enumerate()
            .map(|(id, seqs)| LayerActivation {
                layer_id: id,
                sequences: seqs.into_iter().map(|s| s.mapv(|v| v as f32)).collect(),
                is_segment_level: false,
            })
            .collect();
        ActivationSet::new("probe-test", 0.02, utterance_ids, layers).unwrap()
    }

    /// Task where only layer `planted` carries the class signal: class
    /// `c` shifts coordinate `c` of that layer by `signal`. All other
    /// layers are label-independent noise.
    fn planted_task(
        seed: u64,
        utts: usize,
        frames: usize,
        dims: &[usize],
        planted: usize,
        classes: usize,
        signal: f64,
    ) -> ProbeTask {
        let mut rng = seeded_rng(seed);
        let labels: Vec<usize> = (0..utts).map(|u| u % classes).collect();
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                (0..utts)
                    .map(|u| {
                        let mut m = randn2(&mut rng, frames, d);
                        if l == planted {
                            let coord = labels[u] % d;
                            for mut row in m.rows_mut() {
                                row[coord] += signal;
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        ProbeTask::utterance_classification(set_from(layers), labels, classes).unwrap()
    }

    #[test]
    fn combine_weights_two_layers_by_softmax() {
        let combiner = WeightedSumCombiner {
            logits: array![3.0f64.ln(), 0.0],
            projections: Projections::Disabled,
            out_dim: 2,
        };
        let x1 = array![[1.0, 0.0]];
        let x2 = array![[0.0, 1.0]];
        let out = combine(&combiner, &[x1.view(), x2.view()]).unwrap();
        assert!((out[(0, 0)] - 0.75).abs() < 1e-12);
        assert!((out[(0, 1)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn combine_of_identical_layers_is_the_layer() {
        let mut rng = seeded_rng(7);
        let x = randn2(&mut rng, 5, 3);
        let combiner = WeightedSumCombiner::identity(3, 3);
        let out = combine(&combiner, &[x.view(), x.view(), x.view()]).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_single_layer_applies_projection_with_unit_weight() {
        let mut rng = seeded_rng(8);
        let x = randn2(&mut rng, 4, 3);
        let a = randn2(&mut rng, 3, 2);
        let combiner = WeightedSumCombiner {
            logits: array![5.7],
            projections: Projections::Linear(vec![a.clone()]),
            out_dim: 2,
        };
        let out = combine(&combiner, &[x.view()]).unwrap();
        let expected = x.dot(&a);
        for (o, e) in out.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_is_invariant_to_logit_shifts() {
        let mut rng = seeded_rng(9);
        let x1 = randn2(&mut rng, 6, 4);
        let x2 = randn2(&mut rng, 6, 4);
        let base = WeightedSumCombiner {
            logits: array![0.3, -1.1],
            projections: Projections::Disabled,
            out_dim: 4,
        };
        let shifted = WeightedSumCombiner {
            logits: array![0.3 + 3.3, -1.1 + 3.3],
            projections: Projections::Disabled,
            out_dim: 4,
        };
        let a = combine(&base, &[x1.view(), x2.view()]).unwrap();
        let b = combine(&shifted, &[x1.view(), x2.view()]).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn combine_rejects_shape_violations() {
        let combiner = WeightedSumCombiner::identity(2, 2);
        let x1 = array![[1.0, 2.0], [3.0, 4.0]];
        let short = array![[1.0, 2.0]];
        assert!(matches!(
            combine(&combiner, &[x1.view(), short.view()]),
            Err(ProbeError::RowMismatch { layer: 1, rows: 1, expected: 2 })
        ));
        assert!(matches!(
            combine(&combiner, &[x1.view()]),
            Err(ProbeError::LayerCountMismatch { expected: 2, got: 1 })
        ));
        let wide = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert!(matches!(
            combine(&combiner, &[x1.view(), wide.view()]),
            Err(ProbeError::MissingProjections { layer: 1, dim: 3, out_dim: 2 })
        ));
        let bad_proj = WeightedSumCombiner {
            logits: Array1::zeros(1),
            projections: Projections::Linear(vec![Array2::zeros((3, 5))]),
            out_dim: 2,
        };
        assert!(matches!(
            combine(&bad_proj, &[wide.view()]),
            Err(ProbeError::ProjectionShape { layer: 0, cols: 5, .. })
        ));
        let missing_proj = WeightedSumCombiner {
            logits: Array1::zeros(2),
            projections: Projections::Linear(vec![Array2::zeros((2, 2))]),
            out_dim: 2,
        };
        assert!(matches!(
            combine(&missing_proj, &[x1.view(), x1.view()]),
            Err(ProbeError::ProjectionCount { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn contribution_of_identity_projections_is_weight_times_sqrt_dim() {
        let combiner = WeightedSumCombiner {
            logits: Array1::zeros(2),
            projections: Projections::Linear(vec![Array2::eye(2), Array2::eye(2)]),
            out_dim: 2,
        };
        let scores = contribution_scores(&combiner).unwrap();
        let expected = 0.5 * 2.0f64.sqrt();
        for &s in &scores {
            assert!((s - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn contribution_without_projections_is_the_weights() {
        let combiner = WeightedSumCombiner::identity(4, 3);
        let scores = contribution_scores(&combiner).unwrap();
        for &s in &scores {
            assert!((s - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn contribution_matches_norm_oracle() {
        let mut rng = seeded_rng(10);
        let mats: Vec<Array2<f64>> = (0..3).map(|_| randn2(&mut rng, 4, 5)).collect();
        let combiner = WeightedSumCombiner {
            logits: array![0.2, -0.4, 1.3],
            projections: Projections::Linear(mats.clone()),
            out_dim: 5,
        };
        let w = combiner.weights();
        let scores = contribution_scores(&combiner).unwrap();
        for l in 0..3 {
            let norm = mats[l].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((scores[l] - w[l] * norm).abs() < 1e-12);
        }
    }

    #[test]
    fn contribution_is_permutation_equivariant() {
        let mut rng = seeded_rng(11);
        let mats: Vec<Array2<f64>> = (0..3).map(|_| randn2(&mut rng, 3, 4)).collect();
        let logits = array![0.7, -0.2, 0.4];
        let combiner = WeightedSumCombiner {
            logits: logits.clone(),
            projections: Projections::Linear(mats.clone()),
            out_dim: 4,
        };
        let scores = contribution_scores(&combiner).unwrap();
        let perm = [2usize, 0, 1];
        let permuted = WeightedSumCombiner {
            logits: Array1::from_iter(perm.iter().map(|&p| logits[p])),
            projections: Projections::Linear(perm.iter().map(|&p| mats[p].clone()).collect()),
            out_dim: 4,
        };
        let permuted_scores = contribution_scores(&permuted).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(permuted_scores[k].to_bits(), scores[p].to_bits());
        }
    }

    #[test]
    fn mean_pool_examples() {
        let single = array![[1.0, 2.0, 3.0]];
        let pooled = mean_pool(single.view()).unwrap();
        assert_eq!(pooled, array![1.0, 2.0, 3.0]);

        let opposing = array![[2.0, -4.0], [-2.0, 4.0]];
        let zero = mean_pool(opposing.view()).unwrap();
        assert_eq!(zero, array![0.0, 0.0]);

        let mut rng = seeded_rng(12);
        let m = randn2(&mut rng, 7, 3);
        let pooled = mean_pool(m.view()).unwrap();
        for c in 0..3 {
            let naive: f64 = (0..7).map(|r| m[(r, c)]).sum::<f64>() / 7.0;
            assert!((pooled[c] - naive).abs() < 1e-12);
        }

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(mean_pool(empty.view()), Err(ProbeError::EmptyPool)));
    }

    #[test]
    fn task_validates_labels() {
        let task = planted_task(13, 8, 3, &[2, 2], 0, 2, 1.0);
        let set = task.inputs.clone();
        assert!(matches!(
            ProbeTask::utterance_classification(set.clone(), vec![0; 7], 2),
            Err(ProbeError::LabelCount { expected: 8, got: 7 })
        ));
        let mut labels = vec![0usize; 8];
        labels[3] = 2;
        assert!(matches!(
            ProbeTask::utterance_classification(set, labels, 2),
            Err(ProbeError::LabelRange { utterance: 3, label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn setup_resolves_out_dim_and_rejects_misconfiguration() {
        let task = planted_task(14, 8, 3, &[3, 5, 4], 0, 2, 1.0);
        let cfg = ProbeTrainConfig::default();
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        assert_eq!(setup.out_dim, 5);

        let no_proj = ProbeTrainConfig {
            use_projections: false,
            ..ProbeTrainConfig::default()
        };
        assert!(matches!(
            ProbeSetup::from_task(&task, &no_proj),
            Err(ProbeError::MissingProjections { layer: 1, dim: 5, out_dim: 3 })
        ));

        let even = planted_task(15, 8, 3, &[4, 4], 0, 2, 1.0);
        let conflicting = ProbeTrainConfig {
            use_projections: false,
            out_dim: Some(5),
            ..ProbeTrainConfig::default()
        };
        assert!(matches!(
            ProbeSetup::from_task(&even, &conflicting),
            Err(ProbeError::OutDimConflict { got: 5, expected: 4 })
        ));

        let one_class = ProbeTask {
            num_classes: 1,
            ..even.clone()
        };
        assert!(matches!(
            ProbeSetup::from_task(&one_class, &cfg),
            Err(ProbeError::TooFewClasses { got: 1 })
        ));
    }

    #[test]
    fn train_rejects_bad_config() {
        let task = planted_task(16, 8, 3, &[3, 3], 0, 2, 1.0);
        let bad_holdout = ProbeTrainConfig {
            holdout_fraction: 1.0,
            ..ProbeTrainConfig::default()
        };
        assert!(matches!(
            train_probe(&task, &bad_holdout, 0),
            Err(ProbeError::BadHoldout { .. })
        ));
        let bad_lr = ProbeTrainConfig {
            learning_rate: f64::NAN,
            ..ProbeTrainConfig::default()
        };
        assert!(matches!(
            train_probe(&task, &bad_lr, 0),
            Err(ProbeError::BadLearningRate { .. })
        ));
    }

    #[test]
    fn train_needs_a_nonempty_train_split() {
        let mut rng = seeded_rng(17);
        let single = vec![vec![randn2(&mut rng, 3, 2)]];
        let task =
            ProbeTask::utterance_classification(set_from(single), vec![0], 2).unwrap();
        assert!(matches!(
            train_probe(&task, &ProbeTrainConfig::default(), 0),
            Err(ProbeError::TooFewUtterances { need: 2, got: 1 })
        ));
    }

    #[test]
    fn train_finds_the_planted_layer() {
        let task = planted_task(18, 20, 5, &[4, 4], 0, 2, 2.0);
        let cfg = ProbeTrainConfig {
            steps: 150,
            learning_rate: 0.5,
            ..ProbeTrainConfig::default()
        };
        let result = train_probe(&task, &cfg, 3).unwrap();
        assert_eq!(result.loss_trace.len(), 150);
        assert!(
            result.loss_trace.last().unwrap() < &result.loss_trace[0],
            "loss should decrease: {} -> {}",
            result.loss_trace[0],
            result.loss_trace.last().unwrap()
        );
        assert!(result.accuracy >= 0.75, "accuracy {}", result.accuracy);
        let contribution = &result.contribution;
        assert!(
            contribution[0] > contribution[1],
            "planted layer should dominate: {contribution:?}"
        );
    }

    #[test]
    fn single_layer_probe_reports_projection_norm_and_learns() {
        let task = planted_task(28, 20, 5, &[4], 0, 2, 2.5);
        let cfg = ProbeTrainConfig {
            steps: 150,
            learning_rate: 0.5,
            ..ProbeTrainConfig::default()
        };
        let result = train_probe(&task, &cfg, 1).unwrap();
        let Projections::Linear(mats) = &result.combiner.projections else {
            panic!("projections should be on by default");
        };
        let norm = mats[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((result.contribution[0] - norm).abs() < 1e-12);
        assert!(result.accuracy > 0.5, "accuracy {}", result.accuracy);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let task = planted_task(19, 10, 4, &[3, 5], 0, 2, 1.5);
        let frozen = ProbeTrainConfig {
            steps: 5,
            learning_rate: 0.0,
            ..ProbeTrainConfig::default()
        };
        let untouched = ProbeTrainConfig {
            steps: 0,
            ..frozen.clone()
        };
        let a = train_probe(&task, &frozen, 42).unwrap();
        let b = train_probe(&task, &untouched, 42).unwrap();
        assert_eq!(a.combiner, b.combiner);
        assert_eq!(a.head, b.head);
        assert_eq!(a.loss_trace.len(), 5);
        let first = a.loss_trace[0];
        assert!(a.loss_trace.iter().all(|&l| l == first));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence_step() {
        let task = planted_task(20, 12, 4, &[4, 4], 0, 2, 2.0);
        let cfg = ProbeTrainConfig {
            steps: 60,
            learning_rate: 1e12,
            ..ProbeTrainConfig::default()
        };
        match train_probe(&task, &cfg, 0) {
            Err(ProbeError::Diverged { step }) => assert!(step > 0 && step < 60),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let task = planted_task(21, 14, 4, &[3, 4], 0, 2, 1.5);
        let cfg = ProbeTrainConfig {
            steps: 40,
            ..ProbeTrainConfig::default()
        };
        let a = train_probe(&task, &cfg, 5).unwrap();
        let b = train_probe(&task, &cfg, 5).unwrap();
        assert_eq!(a.combiner, b.combiner);
        assert_eq!(a.head, b.head);
        let c = train_probe(&task, &cfg, 6).unwrap();
        assert_ne!(a.combiner.logits, c.combiner.logits);
    }

    #[test]
    fn alpha_gradient_vanishes_for_identical_layers_at_uniform_weights() {
        let mut rng = seeded_rng(22);
        let shared = randn2(&mut rng, 9, 4);
        let features = vec![shared.clone(), shared.clone(), shared.clone(), shared];
        let labels: Vec<usize> = (0..9).map(|u| u % 3).collect();
        let params = ProbeParams {
            combiner: WeightedSumCombiner::identity(4, 4),
            head: LinearHead {
                weight: randn2(&mut rng, 4, 3),
                bias: Array1::zeros(3),
            },
        };
        let (_, grads) = loss_and_grads(&features, &labels, &params);
        for &g in &grads.logits {
            assert!(g.abs() < 1e-13, "alpha gradient {g} should vanish");
        }
    }

    #[test]
    fn gradient_check_passes_on_a_small_task() {
        let task = planted_task(23, 20, 4, &[4, 4, 4], 0, 3, 1.0);
        let cfg = ProbeTrainConfig::default();
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        let mut rng = seeded_rng(101);
        let params = ProbeParams::random_init(&setup, &mut rng);
        let report = gradient_check(&task, &params, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
        assert_eq!(
            report.params_checked,
            3 + 3 * 4 * 4 + 4 * 3 + 3
        );
    }

    #[test]
    fn gradient_check_passes_without_projections() {
        let task = planted_task(24, 16, 3, &[5, 5], 0, 2, 1.0);
        let cfg = ProbeTrainConfig {
            use_projections: false,
            ..ProbeTrainConfig::default()
        };
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        let mut rng = seeded_rng(102);
        let params = ProbeParams::random_init(&setup, &mut rng);
        let report = gradient_check(&task, &params, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
        assert_eq!(report.params_checked, 2 + 5 * 2 + 2);
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let task = planted_task(25, 12, 3, &[3, 3], 0, 2, 1.0);
        let cfg = ProbeTrainConfig::default();
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        let mut rng = seeded_rng(103);
        let params = ProbeParams::random_init(&setup, &mut rng);
        let coarse = gradient_check(&task, &params, 1e-3).unwrap();
        let fine = gradient_check(&task, &params, 5e-4).unwrap();
        let ratio = coarse.max_abs_error / fine.max_abs_error;
        assert!(
            (2.5..6.0).contains(&ratio),
            "halving eps should shrink the error about 4x, got {ratio} \
             (coarse {}, fine {})",
            coarse.max_abs_error,
            fine.max_abs_error
        );
    }

    #[test]
    fn gradient_check_rejects_out_of_range_perturbations() {
        let task = planted_task(26, 8, 3, &[3], 0, 2, 1.0);
        let cfg = ProbeTrainConfig::default();
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        let mut rng = seeded_rng(104);
        let params = ProbeParams::random_init(&setup, &mut rng);
        assert!(matches!(
            gradient_check(&task, &params, 1e-2),
            Err(ProbeError::BadPerturbation { .. })
        ));
        assert!(matches!(
            gradient_check(&task, &params, 1e-8),
            Err(ProbeError::BadPerturbation { .. })
        ));
    }

    #[test]
    fn pooling_commutes_with_combination() {
        let task = planted_task(27, 6, 5, &[3, 4], 0, 2, 1.0);
        let cfg = ProbeTrainConfig::default();
        let setup = ProbeSetup::from_task(&task, &cfg).unwrap();
        let mut rng = seeded_rng(105);
        let params = ProbeParams::random_init(&setup, &mut rng);
        let pooled = task.pooled_features();
        let views: Vec<ArrayView2<f64>> = pooled.iter().map(|f| f.view()).collect();
        let pool_first = combine(&params.combiner, &views).unwrap();
        for u in 0..task.inputs.num_utterances() {
            let frames: Vec<Array2<f64>> = task
                .inputs
                .layers()
                .iter()
                .map(|l| l.sequences[u].mapv(f64::from))
                .collect();
            let frame_views: Vec<ArrayView2<f64>> = frames.iter().map(|f| f.view()).collect();
            let combined = combine(&params.combiner, &frame_views).unwrap();
            let pooled_after = mean_pool(combined.view()).unwrap();
            for (a, b) in pool_first.row(u).iter().zip(pooled_after.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}
