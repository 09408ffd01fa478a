//! Compact tokenization of 4D fMRI volumes and a long-sequence latent
//! Transformer over the resulting tokens.
//!
//! Each 3D frame is sliced along the depth, height and width axes, every
//! slice is compressed by a 2D autoencoder with spatial factor 32, slice
//! latents are grouped into 32-slice patches and the three axis variants
//! are concatenated per grid cell. A 96³ frame with 32 latent channels
//! becomes 27 tokens of dimension 3072.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure and
//! deterministic given a seed; file formats, the command line and the
//! memory profiler live in the `tablet` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod array;
pub mod analysis;
pub mod autoencoder;
pub mod data;
mod error;
mod math;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tokenizer;
pub mod train;

pub use array::Array;
pub use autoencoder::{Autoencoder2D, LinearPatchAe, LosslessAe, COMPRESSION_FACTOR};
pub use data::{SplitSpec, TargetKind, TargetRecord, Volume4D};
pub use error::{Error, Result};
pub use masking::MaskPattern;
pub use metrics::MetricsReport;
pub use model::{BrainTransformer, HeadKind, ModelConfig};
pub use tokenizer::{Axis, Scheme, TokenGrid, TokenSequence};
