//! Desk-scale toy encoders, synthetic corpora, and the two training
//! objectives used to produce them: DINO self-distillation ([`dino`]) and
//! AAM-Softmax supervision ([`aam`]).
//!
//! Encoders here are stacks of frame-wise linear maps with elementwise
//! nonlinearities; no temporal context, no biases. They are deliberately
//! small: the point is to generate multi-layer activation corpora with
//! known structure (planted class signal, rank bottlenecks, near-identity
//! smoothness) so the similarity and probing machinery can be tested
//! against ground truth.

pub mod aam;
pub mod dino;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::actvstore::{ActivationSet, LayerActivation, StoreError};
use crate::rng::seeded_stream;

/// Frame hop attached to generated corpora, in seconds.
pub const TOY_FRAME_HOP: f64 = 0.02;

/// Latent dimension of the label-independent background signal shared by
/// all layers of a generated probe dataset. The background makes layers of
/// one corpus correlated, like blocks of a real encoder processing one
/// input, so similarity grids over generated corpora stay in range.
pub const BACKGROUND_LATENT_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum ToyLabError {
    #[error("encoder needs at least one layer")]
    EmptyEncoder,
    #[error("layer {layer} dim must be at least 1")]
    BadLayerDim { layer: usize },
    #[error("input dim must be at least 1")]
    BadInputDim,
    #[error("layer {layer} weight is {rows}x{cols} but its input has dim {expected}")]
    DimChainBroken {
        layer: usize,
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("layer {layer} has a non-finite weight")]
    NonFiniteWeight { layer: usize },
    #[error("bottleneck depth {depth} is outside the {layers}-layer encoder")]
    BottleneckDepth { depth: usize, layers: usize },
    #[error("bottleneck rank must be at least 1")]
    ZeroBottleneckRank,
    #[error("input has dim {got}, encoder expects {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence {index} has no frames")]
    EmptySequence { index: usize },
    #[error("planted layer {planted} is outside the {layers}-layer stack")]
    PlantedLayerOutOfRange { planted: usize, layers: usize },
    #[error("dataset needs at least 2 classes, got {got}")]
    TooFewClasses { got: usize },
    #[error("planted layer dim {dim} cannot hold {classes} orthogonal class means")]
    TooManyClasses { classes: usize, dim: usize },
    #[error("dataset needs at least 1 frame per utterance")]
    NoFrames,
    #[error("dataset needs at least {need} utterances, got {got}")]
    TooFewUtterances { need: usize, got: usize },
    #[error("temperature must be positive and finite, got {got}")]
    BadTemperature { got: f64 },
    #[error("{name} momentum must lie in [0, 1], got {got}")]
    BadMomentum { name: &'static str, got: f64 },
    #[error("logit batches have shapes {a_rows}x{a_cols} and {b_rows}x{b_cols}, expected equal")]
    LogitShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("center has length {got}, expected {expected}")]
    CenterLength { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("teacher and student parameter shapes differ at layer {layer}")]
    TeacherShapeMismatch { layer: usize },
    #[error("crop of {crop} frames does not fit sequences of {frames} frames")]
    CropTooLong { crop: usize, frames: usize },
    #[error("crop length must be at least 1")]
    ZeroCrop,
    #[error("need at least 2 prototypes, got {got}")]
    TooFewPrototypes { got: usize },
    #[error("margin must lie in [0, pi/2), got {got}")]
    BadMargin { got: f64 },
    #[error("scale must be positive and finite, got {got}")]
    BadScale { got: f64 },
    #[error("class weight row {class} has near-zero norm")]
    ZeroClassWeight { class: usize },
    #[error("embedding {index} has near-zero norm")]
    ZeroEmbedding { index: usize },
    #[error("label {label} at row {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCountMismatch { batch: usize, labels: usize },
    #[error("embeddings have dim {got}, class weights have dim {expected}")]
    EmbedDimMismatch { expected: usize, got: usize },
    #[error("learning rate must be finite and nonnegative, got {got}")]
    BadLearningRate { got: f64 },
    #[error("{name} must be finite and nonnegative, got {got}")]
    BadSpread { name: &'static str, got: f64 },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Elementwise activation function of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative at a point, given pre- and post-activation values.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => 1.0 - post * post,
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One frame-wise map: `a = phi(x W)` with `W` of shape `D_in x D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub weight: Array2<f64>,
    pub nonlinearity: Nonlinearity,
}

/// A stack of frame-wise layers with chained dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub layers: Vec<EncoderLayer>,
    /// Seed the initial weights were drawn from; kept for provenance,
    /// training does not change it.
    pub seed: u64,
}

impl ToyEncoder {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    /// Per-layer output dims, in depth order.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.ncols()).collect()
    }

    /// Checks the dimension chain and weight finiteness.
    pub fn validate(&self) -> Result<(), ToyLabError> {
        if self.layers.is_empty() {
            return Err(ToyLabError::EmptyEncoder);
        }
        let mut dim = self.input_dim();
        for (layer, l) in self.layers.iter().enumerate() {
            if l.weight.nrows() != dim {
                return Err(ToyLabError::DimChainBroken {
                    layer,
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    expected: dim,
                });
            }
            if l.weight.iter().any(|v| !v.is_finite()) {
                return Err(ToyLabError::NonFiniteWeight { layer });
            }
            dim = l.weight.ncols();
        }
        Ok(())
    }

    /// Applies every layer frame-wise and returns all post-activation
    /// outputs, one `T x D_l` matrix per depth.
    pub fn forward_all(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>, ToyLabError> {
        Ok(self.forward_cached(x)?.post)
    }

    /// Final-layer output.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ToyLabError> {
        let mut all = self.forward_all(x)?;
        Ok(all.pop().expect("encoder has at least one layer"))
    }

    /// Forward pass keeping pre-activations for backpropagation.
    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<ForwardCache, ToyLabError> {
        if self.layers.is_empty() {
            return Err(ToyLabError::EmptyEncoder);
        }
        if x.ncols() != self.input_dim() {
            return Err(ToyLabError::InputDimMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut dim = self.input_dim();
        for (layer, l) in self.layers.iter().enumerate() {
            if l.weight.nrows() != dim {
                return Err(ToyLabError::DimChainBroken {
                    layer,
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    expected: dim,
                });
            }
            dim = l.weight.ncols();
        }
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = Vec::with_capacity(self.depth());
        let mut current = x.to_owned();
        for l in &self.layers {
            let z = current.dot(&l.weight);
            let a = z.mapv(|v| l.nonlinearity.apply(v));
            pre.push(z);
            current = a.clone();
            post.push(a);
        }
        Ok(ForwardCache {
            input: x.to_owned(),
            pre,
            post,
        })
    }

    /// Backpropagates `dout = dL/d(last activation)` through the stack and
    /// returns one weight gradient per layer.
    pub(crate) fn backward(&self, cache: &ForwardCache, dout: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let depth = self.depth();
        let mut grads: Vec<Array2<f64>> = Vec::with_capacity(depth);
        let mut da = dout.to_owned();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let mut dz = da;
            dz.zip_mut_with(&cache.pre[l], |d, &z| {
                // post value is recomputed cheaply only for tanh, where the
                // derivative is 1 - a^2; identity and relu use z alone.
                *d *= layer.nonlinearity.derivative(z, layer.nonlinearity.apply(z));
            });
            let below = if l == 0 {
                cache.input.view()
            } else {
                cache.post[l - 1].view()
            };
            grads.push(below.t().dot(&dz));
            da = dz.dot(&layer.weight.t());
        }
        grads.reverse();
        grads
    }
}

/// Intermediate results of one forward pass, kept for [`ToyEncoder::backward`].
pub(crate) struct ForwardCache {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

/// How encoder weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightStyle {
    /// Entries N(0, 1/D_in): keeps activations near unit scale.
    Random,
    /// Identity (on the leading square block) plus `noise`-scaled random
    /// entries; with square dims and small noise each layer is a gentle
    /// perturbation of the previous one.
    NearIdentity { noise: f64 },
}

/// Rank restriction on one layer's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    /// Layer index whose weight is rank-limited.
    pub depth: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Output dim of each layer; depth = length.
    pub layer_dims: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub weight_style: WeightStyle,
    pub bottleneck: Option<Bottleneck>,
}

/// Seeded deterministic encoder construction. A bottleneck layer's weight
/// is the product of two rank-`rank` factors, so activations from that
/// depth on have rank at most `rank` under the identity nonlinearity.
pub fn make_toy_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ToyEncoder, ToyLabError> {
    if cfg.layer_dims.is_empty() {
        return Err(ToyLabError::EmptyEncoder);
    }
    if cfg.input_dim == 0 {
        return Err(ToyLabError::BadInputDim);
    }
    if let Some((layer, _)) = cfg
        .layer_dims
        .iter()
        .enumerate()
        .find(|(_, &d)| d == 0)
    {
        return Err(ToyLabError::BadLayerDim { layer });
    }
    if let Some(b) = &cfg.bottleneck {
        if b.depth >= cfg.layer_dims.len() {
            return Err(ToyLabError::BottleneckDepth {
                depth: b.depth,
                layers: cfg.layer_dims.len(),
            });
        }
        if b.rank == 0 {
            return Err(ToyLabError::ZeroBottleneckRank);
        }
    }
    let mut rng = seeded_stream(seed, 0);
    let mut layers = Vec::with_capacity(cfg.layer_dims.len());
    let mut d_in = cfg.input_dim;
    for (idx, &d_out) in cfg.layer_dims.iter().enumerate() {
        let bottleneck_rank = cfg
            .bottleneck
            .as_ref()
            .filter(|b| b.depth == idx)
            .map(|b| b.rank);
        let weight = match bottleneck_rank {
            Some(rank) => {
                let left = randn_scaled(&mut rng, d_in, rank, 1.0 / (d_in as f64).sqrt());
                let right = randn_scaled(&mut rng, rank, d_out, 1.0 / (rank as f64).sqrt());
                left.dot(&right)
            }
            None => match cfg.weight_style {
                WeightStyle::Random => {
                    randn_scaled(&mut rng, d_in, d_out, 1.0 / (d_in as f64).sqrt())
                }
                WeightStyle::NearIdentity { noise } => {
                    let mut w =
                        randn_scaled(&mut rng, d_in, d_out, noise / (d_in as f64).sqrt());
                    for i in 0..d_in.min(d_out) {
                        w[(i, i)] += 1.0;
                    }
                    w
                }
            },
        };
        layers.push(EncoderLayer {
            weight,
            nonlinearity: cfg.nonlinearity,
        });
        d_in = d_out;
    }
    Ok(ToyEncoder { layers, seed })
}

fn randn_scaled(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

/// Runs the encoder over a corpus and packages every depth as one layer of
/// an [`ActivationSet`] (frame-level, utterance ids `utt0000`, `utt0001`,
/// ... in corpus order).
pub fn encode(
    enc: &ToyEncoder,
    inputs: &[Array2<f64>],
    model_name: &str,
    frame_hop: f64,
) -> Result<ActivationSet, ToyLabError> {
    enc.validate()?;
    if inputs.is_empty() {
        return Err(ToyLabError::EmptyCorpus);
    }
    for (index, x) in inputs.iter().enumerate() {
        if x.nrows() == 0 {
            return Err(ToyLabError::EmptySequence { index });
        }
        if x.ncols() != enc.input_dim() {
            return Err(ToyLabError::InputDimMismatch {
                expected: enc.input_dim(),
                got: x.ncols(),
            });
        }
    }
    let mut per_layer: Vec<Vec<Array2<f32>>> =
        (0..enc.depth()).map(|_| Vec::with_capacity(inputs.len())).collect();
    for x in inputs {
        let all = enc.forward_all(x.view())?;
        for (l, a) in all.into_iter().enumerate() {
            per_layer[l].push(a.mapv(|v| v as f32));
        }
    }
    let layers = per_layer
        .into_iter()
        .enumerate()
        .map(|(layer_id, sequences)| LayerActivation {
            layer_id,
            sequences,
            is_segment_level: false,
        })
        .collect();
    let ids = (0..inputs.len()).map(|u| format!("utt{u:04}")).collect();
    Ok(ActivationSet::new(model_name, frame_hop, ids, layers)?)
}

/// Shape of a generated planted-signal probing corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDatasetConfig {
    /// Per-layer dims; the stack depth is the length.
    pub dims: Vec<usize>,
    /// Layer carrying the class signal.
    pub planted_layer: usize,
    pub classes: usize,
    pub utterances: usize,
    pub frames: usize,
    /// Distance scale of the planted class means.
    pub separation: f64,
    /// Per-frame noise standard deviation.
    pub noise: f64,
}

/// Generates a planted-signal corpus: the planted layer's frames are
/// shifted by one of `classes` orthogonal means (scaled by `separation`)
/// according to the utterance label; every other layer is label-independent.
/// All layers share a low-rank background signal per utterance
/// (see [`BACKGROUND_LATENT_DIM`]), so layers look like stages of one
/// encoder rather than unrelated noise.
///
/// Labels are assigned round-robin (`utterance % classes`).
pub fn gen_probe_dataset(
    cfg: &ProbeDatasetConfig,
    seed: u64,
) -> Result<(ActivationSet, Vec<usize>), ToyLabError> {
    let layers = cfg.dims.len();
    if layers == 0 {
        return Err(ToyLabError::EmptyEncoder);
    }
    if let Some((layer, _)) = cfg.dims.iter().enumerate().find(|(_, &d)| d == 0) {
        return Err(ToyLabError::BadLayerDim { layer });
    }
    if cfg.planted_layer >= layers {
        return Err(ToyLabError::PlantedLayerOutOfRange {
            planted: cfg.planted_layer,
            layers,
        });
    }
    if cfg.classes < 2 {
        return Err(ToyLabError::TooFewClasses { got: cfg.classes });
    }
    let planted_dim = cfg.dims[cfg.planted_layer];
    if cfg.classes > planted_dim {
        return Err(ToyLabError::TooManyClasses {
            classes: cfg.classes,
            dim: planted_dim,
        });
    }
    if cfg.frames == 0 {
        return Err(ToyLabError::NoFrames);
    }
    if cfg.utterances < cfg.classes {
        return Err(ToyLabError::TooFewUtterances {
            need: cfg.classes,
            got: cfg.utterances,
        });
    }

    let mut rng = seeded_stream(seed, 0);
    let means = orthonormal_rows(&mut rng, cfg.classes, planted_dim);
    let projections: Vec<Array2<f64>> = (0..layers)
        .map(|l| {
            randn_scaled(
                &mut rng,
                BACKGROUND_LATENT_DIM,
                cfg.dims[l],
                1.0 / (BACKGROUND_LATENT_DIM as f64).sqrt(),
            )
        })
        .collect();

    let labels: Vec<usize> = (0..cfg.utterances).map(|u| u % cfg.classes).collect();
    let mut sequences: Vec<Vec<Array2<f32>>> = vec![Vec::new(); layers];
    for &label in &labels {
        let latent = randn_scaled(&mut rng, cfg.frames, BACKGROUND_LATENT_DIM, 1.0);
        for l in 0..layers {
            let mut frames = latent.dot(&projections[l]);
            frames += &(randn_scaled(&mut rng, cfg.frames, cfg.dims[l], 1.0) * cfg.noise);
            if l == cfg.planted_layer {
                let offset = &means.row(label) * cfg.separation;
                frames += &offset;
            }
            sequences[l].push(frames.mapv(|v| v as f32));
        }
    }

    let layer_activations = sequences
        .into_iter()
        .enumerate()
        .map(|(layer_id, seqs)| LayerActivation {
            layer_id,
            sequences: seqs,
            is_segment_level: false,
        })
        .collect();
    let ids = (0..cfg.utterances).map(|u| format!("utt{u:04}")).collect();
    let set = ActivationSet::new("toy-planted", TOY_FRAME_HOP, ids, layer_activations)?;
    Ok((set, labels))
}

/// Draws `count` random directions and Gram-Schmidt orthonormalizes them,
/// retrying degenerate draws; requires `count <= dim`.
fn orthonormal_rows(rng: &mut impl Rng, count: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((count, dim));
    let mut filled = 0usize;
    while filled < count {
        let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        for j in 0..filled {
            let proj = v.dot(&out.row(j));
            v.scaled_add(-proj, &out.row(j));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            out.row_mut(filled).assign(&(v / norm));
            filled += 1;
        }
    }
    out
}

/// Column means per utterance segment of equal length `frames`; input rows
/// are segments stacked back to back.
pub(crate) fn pool_segments(stacked: ArrayView2<f64>, frames: usize) -> Array2<f64> {
    let segments = stacked.nrows() / frames;
    let mut out = Array2::zeros((segments, stacked.ncols()));
    for s in 0..segments {
        let block = stacked.slice(ndarray::s![s * frames..(s + 1) * frames, ..]);
        out.row_mut(s)
            .assign(&block.mean_axis(Axis(0)).expect("nonempty segment"));
    }
    out
}

/// Spreads pooled gradients back over the frames of each segment.
pub(crate) fn pool_segments_backward(
    dpooled: ArrayView2<f64>,
    frames: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((dpooled.nrows() * frames, dpooled.ncols()));
    let scale = 1.0 / frames as f64;
    for s in 0..dpooled.nrows() {
        for f in 0..frames {
            out.row_mut(s * frames + f).assign(&(&dpooled.row(s) * scale));
        }
    }
    out
}
