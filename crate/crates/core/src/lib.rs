//! Few-shot anomaly localization from a handful of normal images.
//!
//! A frozen convolutional backbone produces feature grids; a coreset of
//! normal features forms a fixed anchor bank; a linear adapter and a small
//! per-cell discriminator are trained with focal/BCE terms plus bounded
//! pull/push contrastive terms against the bank, on locally corrupted
//! images and on synthetic embeddings obtained by normalized gradient
//! ascent.

pub mod anchor_bank;
pub mod backbone;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod imageops;
pub mod model;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod pieg;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
pub use exec::Exec;
