//! Source-free domain adaptation through iterative pseudo-labeling.
//!
//! A source model is trained on labeled data and only its soft predictions
//! on the target set cross over to the adaptation side. Target training then
//! proceeds in rounds: a gated selector moves samples from a low-confidence
//! pool to a high-confidence pool, and the target model is retrained on the
//! growing high-confidence pool with distillation, information maximization
//! and mixup consistency.

pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod selector;

pub use error::{Error, Result};
pub use matrix::Matrix;
