//! Patch-to-label sequence modeling for wearable sensor streams.
//!
//! The crate turns multichannel sensor recordings into sequences of fixed
//! length patches, runs them through a channel-independent transformer
//! encoder-decoder, and emits one activity label per patch. On top of that
//! single model it provides temporal segmentation (majority-window label
//! smoothing plus run-length boundary extraction) and forecasting of either
//! future activity labels or future raw signal.
//!
//! Modules:
//! - [`numerics`]: tensors, reverse-mode tape, Adam, seeded RNG
//! - [`data`]: CSV ingestion, normalization, patching, synthetic streams
//! - [`model`]: the transformer and its checkpoint format
//! - [`losses`]: classification, smoothing and forecast losses
//! - [`segmentation`]: label smoothing and segment extraction
//! - [`metrics`]: accuracy, weighted F1, Jaccard, forecast MSE
//! - [`pipeline`]: training loop, evaluation, resumable state
//! - [`gradcheck`]: finite-difference verification of every layer

pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod segmentation;
