//! Entity-masked soft-attention image captioning.
//!
//! A two-layer LSTM caption decoder attends over a fixed set of labelled
//! visual entities. In the masked variant a per-entity selection mask, either
//! predicted by a small MLP or supplied by a person, gates the attention
//! weights so that deselected entities receive exactly zero weight.

pub mod error;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod embed;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod numkern;
#[cfg(feature = "serve")]
pub mod serve;
pub mod train;

pub use error::{Error, Result};
