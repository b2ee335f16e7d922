//! Linear centered-kernel-alignment similarity between layer representations.
//!
//! Similarity between two feature matrices is the normalized
//! Hilbert-Schmidt independence criterion of their linear Gram matrices:
//! `CKA = HSIC1(K, L) / sqrt(HSIC1(K, K) * HSIC1(L, L))`, where `HSIC1` is
//! the unbiased estimator over Grams with zeroed diagonals:
//!
//! ```text
//! HSIC1 = [ tr(Kt*Lt) + (1'Kt1)(1'Lt1)/((n-1)(n-2)) - 2/(n-2) * rowsum(Kt).rowsum(Lt) ]
//!         / (n(n-3))
//! ```
//!
//! valid for n >= 4 examples and possibly slightly negative for independent
//! data. [`cka_minibatch`] accumulates the three HSIC sums over batches of
//! whole utterances, pooling each batch's frames into one Gram, so the full
//! frame count never forms a single Gram matrix. With one batch covering
//! everything it reduces exactly to [`cka_full`].
//!
//! [`similarity_matrix`] and [`self_similarity`] evaluate the estimator for
//! every layer pair of two activation sets after temporal alignment, giving
//! the familiar layer-by-layer heatmap. Cells are independent and evaluated
//! in parallel; each cell's accumulation order is fixed, so grids are
//! bit-identical regardless of thread count.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::actvstore::{align_pair, ActivationSet, StoreError};
use crate::pgm::{self, ClampStats, PgmImage};
use crate::rng::seeded_rng;

/// Smallest value a similarity grid may contain; the unbiased estimator is
/// allowed slightly below zero.
pub const VALUE_FLOOR: f64 = -0.05;
/// Largest value a similarity grid may contain.
pub const VALUE_CEIL: f64 = 1.0 + 1e-6;
/// Self-grid diagonals must be this close to 1.
pub const UNIT_DIAG_TOL: f64 = 1e-6;
/// Pixels per grid cell in rendered heatmaps.
pub const HEATMAP_CELL_PX: usize = 16;

#[derive(Debug, Error)]
pub enum CkaError {
    #[error("feature matrix must have at least one row")]
    EmptyInput,
    #[error("non-finite value in feature matrix at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("gram matrix must be square, got {rows}x{cols}")]
    NonSquareGram { rows: usize, cols: usize },
    #[error("gram matrix is asymmetric beyond tolerance (relative deviation {max_dev:.3e})")]
    AsymmetricGram { max_dev: f64 },
    #[error("gram matrices must agree in size: {n_k} vs {n_l}")]
    GramSizeMismatch { n_k: usize, n_l: usize },
    #[error("unbiased HSIC needs at least 4 examples, got {n}")]
    TooFewExamples { n: usize },
    #[error("feature matrices must pair the same examples: {n_x} vs {n_y} rows")]
    RowCountMismatch { n_x: usize, n_y: usize },
    #[error("no sequences supplied")]
    NoSequences,
    #[error("sides hold different numbers of sequences: {a} vs {b}")]
    SequenceCountMismatch { a: usize, b: usize },
    #[error("side {side}, sequence {sequence}: dimension {dim} differs from {expected}")]
    InconsistentDim {
        side: &'static str,
        sequence: usize,
        dim: usize,
        expected: usize,
    },
    #[error("utterance {utterance}: sequences are not aligned ({rows_a} vs {rows_b} rows)")]
    UnalignedPair {
        utterance: usize,
        rows_a: usize,
        rows_b: usize,
    },
    #[error(
        "degenerate similarity denominator (self-HSIC {s_xx:.3e} and {s_yy:.3e}); \
         features are constant or nearly constant"
    )]
    DegenerateDenominator { s_xx: f64, s_yy: f64 },
    #[error(
        "batch {batch} holds {frames} frames, below the minimum {min}; \
         use a larger batch size or longer utterances"
    )]
    BatchTooSmall {
        batch: usize,
        frames: usize,
        min: usize,
    },
    #[error("no batch reached the minimum of {min} frames")]
    NoUsableBatches { min: usize },
    #[error("batch size must be at least 1 utterance")]
    ZeroBatchSize,
    #[error("min_examples_per_batch must be at least 4, got {got}")]
    MinExamplesTooSmall { got: usize },
    #[error("activation sets cover different corpora: {reason}")]
    CorpusMismatch { reason: String },
    #[error("no layers left to compare after filtering")]
    EmptyGrid,
    #[error(
        "similarity value {value} at cell ({row}, {col}) falls outside \
         [{VALUE_FLOOR}, {VALUE_CEIL}]"
    )]
    ValueOutOfRange { row: usize, col: usize, value: f64 },
    #[error("self-similarity diagonal at {layer} is {value}, not within {UNIT_DIAG_TOL} of 1")]
    DiagonalNotUnit { layer: String, value: f64 },
    #[error("labels do not match value shape: {label_rows}x{label_cols} labels for {rows}x{cols} values")]
    LabelShapeMismatch {
        rows: usize,
        cols: usize,
        label_rows: usize,
        label_cols: usize,
    },
    #[error("similarity CSV parse failed at line {line}: {message}")]
    CsvParse { line: usize, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Linear-kernel inner products of one set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    /// Wraps a precomputed kernel matrix, checking that it is square,
    /// finite, and symmetric to within 1e-9 relative tolerance.
    pub fn new(values: Array2<f64>) -> Result<Self, CkaError> {
        let (rows, cols) = values.dim();
        if rows == 0 {
            return Err(CkaError::EmptyInput);
        }
        if rows != cols {
            return Err(CkaError::NonSquareGram { rows, cols });
        }
        let mut max_abs = 0.0f64;
        for ((r, c), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(CkaError::NonFiniteInput { row: r, col: c });
            }
            max_abs = max_abs.max(v.abs());
        }
        let scale = max_abs.max(1.0);
        let mut max_dev = 0.0f64;
        for i in 0..rows {
            for j in (i + 1)..rows {
                max_dev = max_dev.max((values[[i, j]] - values[[j, i]]).abs());
            }
        }
        if max_dev > 1e-9 * scale {
            return Err(CkaError::AsymmetricGram {
                max_dev: max_dev / scale,
            });
        }
        Ok(Self { values })
    }

    /// Number of examples n.
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Gram matrix of the linear kernel: `values = X * X'`.
pub fn gram_linear(x: ArrayView2<f64>) -> Result<GramMatrix, CkaError> {
    let n = x.nrows();
    if n == 0 {
        return Err(CkaError::EmptyInput);
    }
    if let Some(((r, c), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(CkaError::NonFiniteInput { row: r, col: c });
    }
    let mut g = Array2::zeros((n, n));
    // Upper triangle mirrored, so the result is symmetric to the bit.
    for i in 0..n {
        for j in i..n {
            let v = x.row(i).dot(&x.row(j));
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(GramMatrix { values: g })
}

/// Unbiased HSIC estimator over two Gram matrices of the same n >= 4
/// examples. Symmetric in its arguments to the bit; may be negative for
/// independent data.
pub fn hsic_unbiased(k: &GramMatrix, l: &GramMatrix) -> Result<f64, CkaError> {
    let n = k.n();
    if l.n() != n {
        return Err(CkaError::GramSizeMismatch { n_k: n, n_l: l.n() });
    }
    if n < 4 {
        return Err(CkaError::TooFewExamples { n });
    }
    let kv = k.values();
    let lv = l.values();
    let nf = n as f64;
    let mut trace = 0.0f64;
    let mut row_k = vec![0.0f64; n];
    let mut row_l = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let kij = kv[[i, j]];
            let lij = lv[[i, j]];
            trace += kij * lij;
            row_k[i] += kij;
            row_l[i] += lij;
        }
    }
    let sum_k: f64 = row_k.iter().sum();
    let sum_l: f64 = row_l.iter().sum();
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    let hsic = (trace + (sum_k * sum_l) / ((nf - 1.0) * (nf - 2.0)) - (2.0 / (nf - 2.0)) * cross)
        / (nf * (nf - 3.0));
    Ok(hsic)
}

fn normalized(s_xy: f64, s_xx: f64, s_yy: f64) -> Result<f64, CkaError> {
    if s_xx.is_nan() || s_yy.is_nan() || s_xx <= 0.0 || s_yy <= 0.0 {
        return Err(CkaError::DegenerateDenominator { s_xx, s_yy });
    }
    Ok(s_xy / (s_xx * s_yy).sqrt())
}

/// Full-batch linear CKA between two feature matrices over the same
/// examples. Errors on a degenerate denominator instead of returning NaN.
pub fn cka_full(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64, CkaError> {
    if x.nrows() != y.nrows() {
        return Err(CkaError::RowCountMismatch {
            n_x: x.nrows(),
            n_y: y.nrows(),
        });
    }
    if x.nrows() < 4 {
        return Err(CkaError::TooFewExamples { n: x.nrows() });
    }
    let k = gram_linear(x)?;
    let l = gram_linear(y)?;
    let s_xy = hsic_unbiased(&k, &l)?;
    let s_xx = hsic_unbiased(&k, &k)?;
    let s_yy = hsic_unbiased(&l, &l)?;
    normalized(s_xy, s_xx, s_yy)
}

/// Batching and determinism settings for minibatch CKA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkaConfig {
    /// Whole utterances pooled into one batch Gram.
    pub batch_size_utterances: usize,
    /// When set, utterance order is shuffled by this seed before batching;
    /// otherwise corpus order is used.
    pub shuffle_seed: Option<u64>,
    /// Batches must pool at least this many frames (>= 4, the HSIC minimum).
    pub min_examples_per_batch: usize,
}

impl Default for CkaConfig {
    fn default() -> Self {
        Self {
            batch_size_utterances: 4,
            shuffle_seed: None,
            min_examples_per_batch: 4,
        }
    }
}

impl CkaConfig {
    pub fn validate(&self) -> Result<(), CkaError> {
        if self.batch_size_utterances == 0 {
            return Err(CkaError::ZeroBatchSize);
        }
        if self.min_examples_per_batch < 4 {
            return Err(CkaError::MinExamplesTooSmall {
                got: self.min_examples_per_batch,
            });
        }
        Ok(())
    }
}

/// Result of one minibatch CKA evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchOutcome {
    pub value: f64,
    /// Batches that entered the accumulation.
    pub batches: usize,
    /// Utterances discarded in a trailing batch below the frame minimum.
    pub dropped_utterances: usize,
    /// Frames discarded with those utterances.
    pub dropped_frames: usize,
}

/// Minibatch CKA over paired per-utterance sequences; see
/// [`cka_minibatch_detailed`] for the drop accounting.
pub fn cka_minibatch(
    a: &[Array2<f64>],
    b: &[Array2<f64>],
    cfg: &CkaConfig,
) -> Result<f64, CkaError> {
    Ok(cka_minibatch_detailed(a, b, cfg)?.value)
}

/// Minibatch CKA over paired per-utterance sequences.
///
/// `a[u]` and `b[u]` must hold the same utterance with equal row counts
/// (already aligned). Utterances are grouped in corpus order, or in seeded
/// shuffled order, into batches of `batch_size_utterances`; each batch's
/// frames are pooled into one Gram per side and the three HSIC sums are
/// accumulated batch by batch in a fixed order. A full-size batch below the
/// frame minimum is an error; a smaller trailing batch below it is dropped
/// and counted. With a single batch covering the corpus the result equals
/// [`cka_full`] on the pooled frames exactly.
pub fn cka_minibatch_detailed(
    a: &[Array2<f64>],
    b: &[Array2<f64>],
    cfg: &CkaConfig,
) -> Result<MinibatchOutcome, CkaError> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(CkaError::NoSequences);
    }
    if a.len() != b.len() {
        return Err(CkaError::SequenceCountMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let dim_a = a[0].ncols();
    let dim_b = b[0].ncols();
    for (u, (sa, sb)) in a.iter().zip(b).enumerate() {
        if sa.ncols() != dim_a {
            return Err(CkaError::InconsistentDim {
                side: "a",
                sequence: u,
                dim: sa.ncols(),
                expected: dim_a,
            });
        }
        if sb.ncols() != dim_b {
            return Err(CkaError::InconsistentDim {
                side: "b",
                sequence: u,
                dim: sb.ncols(),
                expected: dim_b,
            });
        }
        if sa.nrows() != sb.nrows() {
            return Err(CkaError::UnalignedPair {
                utterance: u,
                rows_a: sa.nrows(),
                rows_b: sb.nrows(),
            });
        }
    }

    let mut order: Vec<usize> = (0..a.len()).collect();
    if let Some(seed) = cfg.shuffle_seed {
        order.shuffle(&mut seeded_rng(seed));
    }

    let mut s_xy = 0.0f64;
    let mut s_xx = 0.0f64;
    let mut s_yy = 0.0f64;
    let mut batches = 0usize;
    let mut dropped_utterances = 0usize;
    let mut dropped_frames = 0usize;
    for (batch_index, group) in order.chunks(cfg.batch_size_utterances).enumerate() {
        let frames: usize = group.iter().map(|&u| a[u].nrows()).sum();
        if frames < cfg.min_examples_per_batch {
            // Only a short trailing remainder may be dropped; a full-size
            // batch below the minimum means the corpus cannot be batched
            // this way at all.
            if group.len() < cfg.batch_size_utterances {
                dropped_utterances += group.len();
                dropped_frames += frames;
                continue;
            }
            return Err(CkaError::BatchTooSmall {
                batch: batch_index,
                frames,
                min: cfg.min_examples_per_batch,
            });
        }
        let mut xa = Array2::zeros((frames, dim_a));
        let mut xb = Array2::zeros((frames, dim_b));
        let mut row = 0usize;
        for &u in group {
            let t = a[u].nrows();
            xa.slice_mut(ndarray::s![row..row + t, ..]).assign(&a[u]);
            xb.slice_mut(ndarray::s![row..row + t, ..]).assign(&b[u]);
            row += t;
        }
        let k = gram_linear(xa.view())?;
        let l = gram_linear(xb.view())?;
        s_xy += hsic_unbiased(&k, &l)?;
        s_xx += hsic_unbiased(&k, &k)?;
        s_yy += hsic_unbiased(&l, &l)?;
        batches += 1;
    }
    if batches == 0 {
        return Err(CkaError::NoUsableBatches {
            min: cfg.min_examples_per_batch,
        });
    }
    let value = normalized(s_xy, s_xx, s_yy)?;
    Ok(MinibatchOutcome {
        value,
        batches,
        dropped_utterances,
        dropped_frames,
    })
}

/// Which layers enter a similarity grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    /// Include segment-level layers by broadcasting their single vector to
    /// the other layer's frame count. Default true.
    pub include_segment_level: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            include_segment_level: true,
        }
    }
}

/// Provenance and batching bookkeeping carried alongside grid values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMeta {
    pub model_a: String,
    pub model_b: String,
    pub utterances: usize,
    pub batch_size_utterances: usize,
    pub min_examples_per_batch: usize,
    pub shuffle_seed: Option<u64>,
    /// True when rows and columns come from the same ActivationSet.
    pub self_grid: bool,
    /// Cells evaluated (upper triangle only for self grids).
    pub cells_computed: usize,
    /// Batches accumulated across all computed cells.
    pub batches_total: usize,
    /// Trailing-utterance drops summed over computed cells.
    pub dropped_utterances_total: usize,
    pub dropped_frames_total: usize,
    /// Segment-level layers left out when inclusion is disabled.
    pub excluded_layers_a: Vec<usize>,
    pub excluded_layers_b: Vec<usize>,
}

/// A layer-by-layer grid of CKA values with labels and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Array2<f64>,
    meta: SimilarityMeta,
}

impl SimilarityMatrix {
    /// Validates labels against the value shape, every value against
    /// [`VALUE_FLOOR`]..[`VALUE_CEIL`], and, for self grids, the unit
    /// diagonal.
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Array2<f64>,
        meta: SimilarityMeta,
    ) -> Result<Self, CkaError> {
        let (rows, cols) = values.dim();
        if row_labels.len() != rows || col_labels.len() != cols {
            return Err(CkaError::LabelShapeMismatch {
                rows,
                cols,
                label_rows: row_labels.len(),
                label_cols: col_labels.len(),
            });
        }
        for ((r, c), &v) in values.indexed_iter() {
            if !(VALUE_FLOOR..=VALUE_CEIL).contains(&v) {
                return Err(CkaError::ValueOutOfRange {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        if meta.self_grid {
            for i in 0..rows.min(cols) {
                let v = values[[i, i]];
                if (v - 1.0).abs() > UNIT_DIAG_TOL {
                    return Err(CkaError::DiagonalNotUnit {
                        layer: row_labels[i].clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            row_labels,
            col_labels,
            values,
            meta,
        })
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn meta(&self) -> &SimilarityMeta {
        &self.meta
    }

    /// CSV with a label header row and one label per data row. Values are
    /// written with the shortest representation that parses back to the
    /// same f64.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for label in &self.col_labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.col_labels.len() {
                out.push(',');
                out.push_str(&self.values[[r, c]].to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Key/value metadata sidecar. `render` adds pixel clamp counts when a
    /// heatmap was written alongside.
    pub fn meta_text(&self, render: Option<ClampStats>) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        };
        line("model_a", m.model_a.clone());
        line("model_b", m.model_b.clone());
        line("rows", self.row_labels.len().to_string());
        line("cols", self.col_labels.len().to_string());
        line("utterances", m.utterances.to_string());
        line(
            "batch_size_utterances",
            m.batch_size_utterances.to_string(),
        );
        line(
            "min_examples_per_batch",
            m.min_examples_per_batch.to_string(),
        );
        line(
            "shuffle_seed",
            m.shuffle_seed.map_or("none".into(), |s| s.to_string()),
        );
        line(
            "batch_order",
            if m.shuffle_seed.is_some() {
                "seeded shuffle, unbalanced batch frame totals permitted".into()
            } else {
                "corpus order, unbalanced batch frame totals permitted".into()
            },
        );
        line("passes", "1".to_string());
        line("self_grid", m.self_grid.to_string());
        line("cells_computed", m.cells_computed.to_string());
        line("batches_total", m.batches_total.to_string());
        line(
            "dropped_utterances_total",
            m.dropped_utterances_total.to_string(),
        );
        line("dropped_frames_total", m.dropped_frames_total.to_string());
        let fmt_layers = |ids: &[usize]| {
            if ids.is_empty() {
                "none".to_string()
            } else {
                ids.iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            }
        };
        line(
            "excluded_segment_layers_a",
            fmt_layers(&m.excluded_layers_a),
        );
        line(
            "excluded_segment_layers_b",
            fmt_layers(&m.excluded_layers_b),
        );
        if let Some(stats) = render {
            line("heatmap_clamped_low", stats.clamped_low.to_string());
            line("heatmap_clamped_high", stats.clamped_high.to_string());
        }
        out
    }

    /// Grayscale heatmap of the grid, [`HEATMAP_CELL_PX`] pixels per cell.
    pub fn render_heatmap(&self) -> (PgmImage, ClampStats) {
        pgm::render_heatmap(self.values.view(), HEATMAP_CELL_PX)
    }
}

/// Row labels, column labels, and values of a parsed similarity CSV.
pub type ParsedSimilarityCsv = (Vec<String>, Vec<String>, Array2<f64>);

/// Parses a CSV produced by [`SimilarityMatrix::to_csv`] back into labels
/// and values.
pub fn parse_similarity_csv(text: &str) -> Result<ParsedSimilarityCsv, CkaError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CkaError::CsvParse {
        line: 1,
        message: "empty input".into(),
    })?;
    let col_labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    if col_labels.is_empty() {
        return Err(CkaError::CsvParse {
            line: 1,
            message: "header holds no column labels".into(),
        });
    }
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().expect("split yields at least one field");
        row_labels.push(label.to_string());
        let mut count = 0usize;
        for field in fields {
            let v: f64 = field.parse().map_err(|_| CkaError::CsvParse {
                line: idx + 1,
                message: format!("bad float {field:?}"),
            })?;
            data.push(v);
            count += 1;
        }
        if count != col_labels.len() {
            return Err(CkaError::CsvParse {
                line: idx + 1,
                message: format!("expected {} values, found {count}", col_labels.len()),
            });
        }
    }
    if row_labels.is_empty() {
        return Err(CkaError::CsvParse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let values = Array2::from_shape_vec((row_labels.len(), col_labels.len()), data)
        .expect("shape matches collected data");
    Ok((row_labels, col_labels, values))
}

/// Layers of `set` that participate in a grid under `opts`, as
/// (layer_id, label) pairs.
fn grid_layers(set: &ActivationSet, opts: &GridOptions) -> (Vec<usize>, Vec<usize>) {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for layer in set.layers() {
        if layer.is_segment_level && !opts.include_segment_level {
            excluded.push(layer.layer_id);
        } else {
            included.push(layer.layer_id);
        }
    }
    (included, excluded)
}

fn check_same_corpus(a: &ActivationSet, b: &ActivationSet) -> Result<(), CkaError> {
    if a.utterance_ids() != b.utterance_ids() {
        let reason = if a.num_utterances() != b.num_utterances() {
            format!(
                "{} vs {} utterances",
                a.num_utterances(),
                b.num_utterances()
            )
        } else {
            "utterance ids differ or are ordered differently".to_string()
        };
        return Err(CkaError::CorpusMismatch { reason });
    }
    Ok(())
}

struct CellOutcome {
    row: usize,
    col: usize,
    outcome: MinibatchOutcome,
}

/// One grid cell: align every utterance's sequences for the two layers,
/// then run minibatch CKA over the aligned pairs.
fn cell_value(
    a: &ActivationSet,
    b: &ActivationSet,
    layer_a: usize,
    layer_b: usize,
    cfg: &CkaConfig,
) -> Result<MinibatchOutcome, CkaError> {
    let n = a.num_utterances();
    let mut seqs_a = Vec::with_capacity(n);
    let mut seqs_b = Vec::with_capacity(n);
    for u in 0..n {
        let (fa, fb) = align_pair(a.align_input(layer_a, u), b.align_input(layer_b, u))?;
        seqs_a.push(fa.mapv(f64::from));
        seqs_b.push(fb.mapv(f64::from));
    }
    cka_minibatch_detailed(&seqs_a, &seqs_b, cfg)
}

/// Full cross-model similarity grid with default layer selection.
pub fn similarity_matrix(
    a: &ActivationSet,
    b: &ActivationSet,
    cfg: &CkaConfig,
) -> Result<SimilarityMatrix, CkaError> {
    similarity_matrix_with(a, b, cfg, &GridOptions::default())
}

/// Full cross-model similarity grid: entry (i, j) is minibatch CKA between
/// A's i-th included layer and B's j-th included layer.
pub fn similarity_matrix_with(
    a: &ActivationSet,
    b: &ActivationSet,
    cfg: &CkaConfig,
    opts: &GridOptions,
) -> Result<SimilarityMatrix, CkaError> {
    cfg.validate()?;
    check_same_corpus(a, b)?;
    let (rows, excluded_a) = grid_layers(a, opts);
    let (cols, excluded_b) = grid_layers(b, opts);
    if rows.is_empty() || cols.is_empty() {
        return Err(CkaError::EmptyGrid);
    }
    let cells: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..cols.len()).map(move |c| (r, c)))
        .collect();
    let outcomes: Vec<CellOutcome> = cells
        .into_par_iter()
        .map(|(r, c)| {
            cell_value(a, b, rows[r], cols[c], cfg).map(|outcome| CellOutcome {
                row: r,
                col: c,
                outcome,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut values = Array2::zeros((rows.len(), cols.len()));
    let mut meta = SimilarityMeta {
        model_a: a.model_name().to_string(),
        model_b: b.model_name().to_string(),
        utterances: a.num_utterances(),
        batch_size_utterances: cfg.batch_size_utterances,
        min_examples_per_batch: cfg.min_examples_per_batch,
        shuffle_seed: cfg.shuffle_seed,
        self_grid: false,
        cells_computed: outcomes.len(),
        batches_total: 0,
        dropped_utterances_total: 0,
        dropped_frames_total: 0,
        excluded_layers_a: excluded_a,
        excluded_layers_b: excluded_b,
    };
    for cell in &outcomes {
        values[[cell.row, cell.col]] = cell.outcome.value;
        meta.batches_total += cell.outcome.batches;
        meta.dropped_utterances_total += cell.outcome.dropped_utterances;
        meta.dropped_frames_total += cell.outcome.dropped_frames;
    }
    let row_labels = rows.iter().map(|id| format!("L{id}")).collect();
    let col_labels = cols.iter().map(|id| format!("L{id}")).collect();
    SimilarityMatrix::new(row_labels, col_labels, values, meta)
}

/// Within-model similarity grid with default layer selection.
pub fn self_similarity(a: &ActivationSet, cfg: &CkaConfig) -> Result<SimilarityMatrix, CkaError> {
    self_similarity_with(a, cfg, &GridOptions::default())
}

/// Within-model similarity grid. Evaluates only the upper triangle and
/// mirrors it; cell evaluation is symmetric in its arguments to the bit, so
/// this matches the full grid exactly.
pub fn self_similarity_with(
    a: &ActivationSet,
    cfg: &CkaConfig,
    opts: &GridOptions,
) -> Result<SimilarityMatrix, CkaError> {
    cfg.validate()?;
    let (ids, excluded) = grid_layers(a, opts);
    if ids.is_empty() {
        return Err(CkaError::EmptyGrid);
    }
    let n = ids.len();
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|r| (r..n).map(move |c| (r, c)))
        .collect();
    let outcomes: Vec<CellOutcome> = cells
        .into_par_iter()
        .map(|(r, c)| {
            cell_value(a, a, ids[r], ids[c], cfg).map(|outcome| CellOutcome {
                row: r,
                col: c,
                outcome,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut values = Array2::zeros((n, n));
    let mut meta = SimilarityMeta {
        model_a: a.model_name().to_string(),
        model_b: a.model_name().to_string(),
        utterances: a.num_utterances(),
        batch_size_utterances: cfg.batch_size_utterances,
        min_examples_per_batch: cfg.min_examples_per_batch,
        shuffle_seed: cfg.shuffle_seed,
        self_grid: true,
        cells_computed: outcomes.len(),
        batches_total: 0,
        dropped_utterances_total: 0,
        dropped_frames_total: 0,
        excluded_layers_a: excluded.clone(),
        excluded_layers_b: excluded,
    };
    for cell in &outcomes {
        values[[cell.row, cell.col]] = cell.outcome.value;
        values[[cell.col, cell.row]] = cell.outcome.value;
        meta.batches_total += cell.outcome.batches;
        meta.dropped_utterances_total += cell.outcome.dropped_utterances;
        meta.dropped_frames_total += cell.outcome.dropped_frames;
    }
    let labels: Vec<String> = ids.iter().map(|id| format!("L{id}")).collect();
    SimilarityMatrix::new(labels.clone(), labels, values, meta)
}
