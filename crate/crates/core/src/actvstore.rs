//! Storage and temporal alignment of per-layer activation sequences.
//!
//! An [`ActivationSet`] holds, for one encoder and one utterance corpus, a
//! `T_i x D` matrix per (layer, utterance). Layers extracted once per
//! utterance rather than once per frame (speaker embeddings, pooled heads)
//! are marked segment-level and hold a single row per utterance.
//!
//! On disk a set is a directory: a `manifest.toml` describing shapes plus
//! one raw little-endian `f32` file per layer, frames row-major, sequences
//! concatenated in corpus order. The manifest is the source of truth for
//! shapes; loading verifies sizes and rejects non-finite values.
//!
//! Layers from encoders with different frame rates are compared after
//! [`align_pair`]: the coarser sequence has each row repeated by the
//! rounded hop ratio, then both are truncated to the shorter row count.
//! Segment-level layers align by broadcasting their single row.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag written into every manifest. Readers reject other versions.
pub const FORMAT_VERSION: u32 = 1;

/// Name of the manifest file inside an activation set directory.
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Relative hop-ratio slack accepted when rounding to an integer repeat
/// factor in [`align_pair`].
pub const HOP_RATIO_TOLERANCE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: manifest parse failed: {message}")]
    ManifestParse { path: PathBuf, message: String },
    #[error("unsupported activation format version {found}; this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error(
        "layer {layer_id}: {path} holds {actual} f32 values, \
         but dim and frame counts require {expected}"
    )]
    DataSizeMismatch {
        layer_id: usize,
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer_id}, sequence {sequence}: non-finite value at element {index}")]
    NonFinite {
        layer_id: usize,
        sequence: usize,
        index: usize,
    },
    #[error("invalid activation set: {0}")]
    InvalidSet(String),
    #[error("frame hop must be positive and finite, got {hop}")]
    BadFrameHop { hop: f64 },
    #[error("upsample factor must be at least 1")]
    ZeroFactor,
    #[error("broadcast target length must be at least 1")]
    ZeroBroadcastLength,
    #[error("broadcast input must be a single row, got {rows} rows")]
    BroadcastNeedsSingleRow { rows: usize },
    #[error("cannot align empty sequences")]
    EmptyAlignInput,
    #[error(
        "frame hops {hop_a} and {hop_b} have ratio {ratio:.4}, \
         more than {tolerance:.0}% away from integer factor {factor}"
    )]
    IncommensurateHops {
        hop_a: f64,
        hop_b: f64,
        ratio: f64,
        factor: usize,
        tolerance: f64,
    },
}

/// Activations of one layer across the whole corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivation {
    pub layer_id: usize,
    /// One `T_i x D` matrix per utterance, corpus order.
    pub sequences: Vec<Array2<f32>>,
    /// Segment-level layers hold exactly one row per utterance.
    pub is_segment_level: bool,
}

impl LayerActivation {
    /// Feature dimension. Valid once the owning set is constructed.
    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.ncols())
    }
}

/// All layer activations for one encoder over one utterance corpus.
///
/// Invariants, enforced at construction and on load:
/// layer ids are contiguous from 0 and index the `layers` vector; every
/// layer has one sequence per utterance; within a layer all sequences share
/// one dimension `D >= 1` and have at least one row; segment-level layers
/// have exactly one row per sequence; all values are finite; the frame hop
/// is positive and finite; utterance ids are unique and non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    model_name: String,
    frame_hop: f64,
    utterance_ids: Vec<String>,
    layers: Vec<LayerActivation>,
}

impl ActivationSet {
    pub fn new(
        model_name: impl Into<String>,
        frame_hop: f64,
        utterance_ids: Vec<String>,
        mut layers: Vec<LayerActivation>,
    ) -> Result<Self, StoreError> {
        if !(frame_hop.is_finite() && frame_hop > 0.0) {
            return Err(StoreError::BadFrameHop { hop: frame_hop });
        }
        if utterance_ids.is_empty() {
            return Err(StoreError::InvalidSet("no utterances".into()));
        }
        for (i, id) in utterance_ids.iter().enumerate() {
            if id.is_empty() {
                return Err(StoreError::InvalidSet(format!("utterance {i} has an empty id")));
            }
            if utterance_ids[..i].contains(id) {
                return Err(StoreError::InvalidSet(format!("duplicate utterance id {id:?}")));
            }
        }
        if layers.is_empty() {
            return Err(StoreError::InvalidSet("no layers".into()));
        }
        layers.sort_by_key(|l| l.layer_id);
        for (i, layer) in layers.iter().enumerate() {
            if layer.layer_id != i {
                return Err(StoreError::InvalidSet(format!(
                    "layer ids must be contiguous from 0; position {i} holds id {}",
                    layer.layer_id
                )));
            }
            if layer.sequences.len() != utterance_ids.len() {
                return Err(StoreError::InvalidSet(format!(
                    "layer {i} has {} sequences for {} utterances",
                    layer.sequences.len(),
                    utterance_ids.len()
                )));
            }
            let dim = layer.sequences[0].ncols();
            if dim == 0 {
                return Err(StoreError::InvalidSet(format!("layer {i} has dimension 0")));
            }
            for (u, seq) in layer.sequences.iter().enumerate() {
                if seq.ncols() != dim {
                    return Err(StoreError::InvalidSet(format!(
                        "layer {i}, sequence {u}: dimension {} differs from {}",
                        seq.ncols(),
                        dim
                    )));
                }
                if seq.nrows() == 0 {
                    return Err(StoreError::InvalidSet(format!(
                        "layer {i}, sequence {u} has no frames"
                    )));
                }
                if layer.is_segment_level && seq.nrows() != 1 {
                    return Err(StoreError::InvalidSet(format!(
                        "layer {i} is segment-level but sequence {u} has {} rows",
                        seq.nrows()
                    )));
                }
                if let Some(index) = seq.iter().position(|v| !v.is_finite()) {
                    return Err(StoreError::NonFinite {
                        layer_id: i,
                        sequence: u,
                        index,
                    });
                }
            }
        }
        Ok(Self {
            model_name: model_name.into(),
            frame_hop,
            utterance_ids,
            layers,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Seconds (or any fixed time unit) between consecutive frames.
    pub fn frame_hop(&self) -> f64 {
        self.frame_hop
    }

    pub fn utterance_ids(&self) -> &[String] {
        &self.utterance_ids
    }

    pub fn num_utterances(&self) -> usize {
        self.utterance_ids.len()
    }

    pub fn layers(&self) -> &[LayerActivation] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer_id: usize) -> &LayerActivation {
        &self.layers[layer_id]
    }

    /// Alignment descriptor for one (layer, utterance) sequence.
    pub fn align_input(&self, layer_id: usize, utterance: usize) -> AlignInput<'_> {
        let layer = &self.layers[layer_id];
        AlignInput {
            rows: layer.sequences[utterance].view(),
            frame_hop: self.frame_hop,
            is_segment_level: layer.is_segment_level,
        }
    }
}

/// On-disk manifest describing an activation set directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_name: String,
    pub frame_hop: f64,
    pub utterance_ids: Vec<String>,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerRecord>,
}

/// Shape record for one stored layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_id: usize,
    pub dim: usize,
    pub is_segment_level: bool,
    /// Path of the raw f32 file, relative to the manifest.
    pub data_file: String,
    /// Rows per utterance, corpus order.
    pub frame_counts: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `set` into directory `dir` as `manifest.toml` plus one
/// `layer_NN.f32` file per layer. Creates the directory if needed.
pub fn save_activation_set(set: &ActivationSet, dir: &Path) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(set.num_layers());
    for layer in set.layers() {
        let data_file = format!("layer_{:02}.f32", layer.layer_id);
        let total: usize = layer.sequences.iter().map(|s| s.len()).sum();
        let mut bytes = Vec::with_capacity(total * 4);
        for seq in &layer.sequences {
            for &v in seq.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&data_file);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        records.push(LayerRecord {
            layer_id: layer.layer_id,
            dim: layer.dim(),
            is_segment_level: layer.is_segment_level,
            data_file,
            frame_counts: layer.sequences.iter().map(|s| s.nrows()).collect(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_name: set.model_name().to_string(),
        frame_hop: set.frame_hop(),
        utterance_ids: set.utterance_ids().to_vec(),
        layers: records,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| StoreError::InvalidSet(format!("manifest serialization failed: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(io_err(&path))
}

/// Loads an activation set from `path`: either a set directory containing
/// `manifest.toml` or the manifest file itself.
pub fn load_activation_set(path: &Path) -> Result<ActivationSet, StoreError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| StoreError::ManifestParse {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let num_utts = manifest.utterance_ids.len();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for record in &manifest.layers {
        if record.frame_counts.len() != num_utts {
            return Err(StoreError::InvalidSet(format!(
                "layer {}: {} frame counts for {} utterances",
                record.layer_id,
                record.frame_counts.len(),
                num_utts
            )));
        }
        let data_path = base.join(&record.data_file);
        let bytes = std::fs::read(&data_path).map_err(io_err(&data_path))?;
        if bytes.len() % 4 != 0 {
            return Err(StoreError::InvalidSet(format!(
                "layer {}: {} has a byte length not divisible by 4",
                record.layer_id,
                data_path.display()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let expected: usize = record.frame_counts.iter().map(|&t| t * record.dim).sum();
        if values.len() != expected {
            return Err(StoreError::DataSizeMismatch {
                layer_id: record.layer_id,
                path: data_path,
                expected,
                actual: values.len(),
            });
        }
        let mut sequences = Vec::with_capacity(num_utts);
        let mut offset = 0usize;
        for (u, &frames) in record.frame_counts.iter().enumerate() {
            let len = frames * record.dim;
            let chunk = values[offset..offset + len].to_vec();
            if let Some(index) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    layer_id: record.layer_id,
                    sequence: u,
                    index,
                });
            }
            let seq = Array2::from_shape_vec((frames, record.dim), chunk)
                .expect("shape matches chunk length");
            sequences.push(seq);
            offset += len;
        }
        layers.push(LayerActivation {
            layer_id: record.layer_id,
            sequences,
            is_segment_level: record.is_segment_level,
        });
    }
    ActivationSet::new(
        manifest.model_name,
        manifest.frame_hop,
        manifest.utterance_ids,
        layers,
    )
}

/// Repeats each row of `seq` `factor` times in place:
/// rows `[a, b]` with factor 2 become `[a, a, b, b]`.
pub fn upsample_repeat(seq: ArrayView2<f32>, factor: usize) -> Result<Array2<f32>, StoreError> {
    if factor == 0 {
        return Err(StoreError::ZeroFactor);
    }
    let (t, d) = seq.dim();
    let mut out = Array2::zeros((t * factor, d));
    for (i, row) in seq.rows().into_iter().enumerate() {
        for k in 0..factor {
            out.row_mut(i * factor + k).assign(&row);
        }
    }
    Ok(out)
}

/// Repeats a single-row matrix to `length` identical rows.
pub fn broadcast_vector(row: ArrayView2<f32>, length: usize) -> Result<Array2<f32>, StoreError> {
    if row.nrows() != 1 {
        return Err(StoreError::BroadcastNeedsSingleRow { rows: row.nrows() });
    }
    if length == 0 {
        return Err(StoreError::ZeroBroadcastLength);
    }
    let d = row.ncols();
    let mut out = Array2::zeros((length, d));
    for mut r in out.rows_mut() {
        r.assign(&row.row(0));
    }
    Ok(out)
}

/// One side of an alignment: a sequence plus the timing information needed
/// to match it against another layer's sequence.
#[derive(Debug, Clone, Copy)]
pub struct AlignInput<'a> {
    pub rows: ArrayView2<'a, f32>,
    pub frame_hop: f64,
    pub is_segment_level: bool,
}

/// Brings two sequences of the same utterance onto a common time axis and
/// returns them with equal row counts, in argument order.
///
/// Segment-level inputs (single row) are broadcast to the other side's row
/// count. Otherwise the coarser sequence (larger hop) has each row repeated
/// by the hop ratio rounded to the nearest integer; ratios more than
/// [`HOP_RATIO_TOLERANCE`] away from that integer are rejected. Both sides
/// are then truncated to the shorter row count, so rounding overshoot is
/// dropped from the tail.
pub fn align_pair(
    a: AlignInput<'_>,
    b: AlignInput<'_>,
) -> Result<(Array2<f32>, Array2<f32>), StoreError> {
    fn check_side(side: &AlignInput<'_>) -> Result<(), StoreError> {
        if side.is_segment_level && side.rows.nrows() != 1 {
            return Err(StoreError::BroadcastNeedsSingleRow {
                rows: side.rows.nrows(),
            });
        }
        if !side.is_segment_level && !(side.frame_hop.is_finite() && side.frame_hop > 0.0) {
            return Err(StoreError::BadFrameHop {
                hop: side.frame_hop,
            });
        }
        Ok(())
    }
    if a.rows.nrows() == 0 || b.rows.nrows() == 0 {
        return Err(StoreError::EmptyAlignInput);
    }
    check_side(&a)?;
    check_side(&b)?;
    match (a.is_segment_level, b.is_segment_level) {
        (true, true) => Ok((a.rows.to_owned(), b.rows.to_owned())),
        (true, false) => Ok((broadcast_vector(a.rows, b.rows.nrows())?, b.rows.to_owned())),
        (false, true) => Ok((a.rows.to_owned(), broadcast_vector(b.rows, a.rows.nrows())?)),
        (false, false) => {
            let ratio = a.frame_hop.max(b.frame_hop) / a.frame_hop.min(b.frame_hop);
            let factor = ratio.round().max(1.0) as usize;
            if (ratio - factor as f64).abs() / factor as f64 > HOP_RATIO_TOLERANCE {
                return Err(StoreError::IncommensurateHops {
                    hop_a: a.frame_hop,
                    hop_b: b.frame_hop,
                    ratio,
                    factor,
                    tolerance: HOP_RATIO_TOLERANCE * 100.0,
                });
            }
            // The coarser side (larger hop) is repeated up to the finer rate.
            let (ua, ub) = if a.frame_hop >= b.frame_hop {
                (upsample_repeat(a.rows, factor)?, b.rows.to_owned())
            } else {
                (a.rows.to_owned(), upsample_repeat(b.rows, factor)?)
            };
            let t = ua.nrows().min(ub.nrows());
            Ok((
                ua.slice(s![..t, ..]).to_owned(),
                ub.slice(s![..t, ..]).to_owned(),
            ))
        }
    }
}
