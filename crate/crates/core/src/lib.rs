//! Layer-wise analysis toolkit for sequence encoders.
//!
//! The crate is organized around one data model and three consumers of it:
//!
//! * [`actvstore`] holds per-layer activation sequences for a corpus of
//!   utterances and handles on-disk storage plus temporal alignment between
//!   layers with different frame rates.
//! * [`cka`] computes linear centered-kernel-alignment similarity between
//!   layers using the unbiased HSIC estimator, batched over utterances, and
//!   renders layer-by-layer similarity grids.
//! * [`probe`] fits softmax-weighted layer combinations (with optional
//!   per-layer linear projections) to utterance classification tasks and
//!   reports per-layer contribution scores.
//! * [`toylab`] provides small deterministic encoders and training loops
//!   (self-distillation with EMA teacher, additive-angular-margin softmax)
//!   that generate activation sets with known structure for end-to-end
//!   exercises of the analysis pipeline.

pub mod actvstore;
pub mod cka;
pub mod pgm;
pub mod probe;
pub mod rng;
pub mod toylab;

mod math;
