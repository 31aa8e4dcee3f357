//! Desk-scale laboratory for sample-efficient masked language modelling.
//!
//! Three pretraining regimes share one encoder:
//!
//! * vanilla masked language modelling over an equal-weight residual stream,
//! * layer-weighted residuals, where each layer reads a learned convex
//!   combination of every earlier layer output (embedding included),
//! * latent semantic modelling, where a student predicts distributions over
//!   sparse-dictionary categories derived from a teacher's hidden states.
//!
//! The crate also carries the tokenizers those regimes use, finetuning and
//! metric code for token- and sequence-level tasks, and the layer-weight and
//! semantic-overlap analyses.

pub mod analysis;
pub mod config;
pub mod error;
pub mod finetune_eval;
pub mod io;
pub mod mlsm;
pub mod model;
pub mod numerics;
pub mod tokenizers;
pub mod training;

pub use error::{Error, Result};
