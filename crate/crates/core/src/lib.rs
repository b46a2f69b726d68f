//! Two-stage multi-modal survival prediction with missing modalities.
//!
//! Per-modality encoders turn raw features into fixed-width embeddings. A
//! fusion network combines whichever embeddings a patient has (concatenation,
//! mean vector or Kronecker tensor fusion) and predicts a Cox hazard. Training
//! uses modality dropout and a reconstruction loss restricted to the modalities
//! that were originally observed.

pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod survival;
mod train;
pub mod unimodal;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use train::TrainTrace;
