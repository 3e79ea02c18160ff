//! Extractor-predictor rationale models trained with optional human rationale
//! supervision, plus the sufficiency and rationale-corruption analyses used to
//! study them.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation and Adam.
//! * [`data`]: vocabularies, planted-rationale generation, ERASER-style ingestion.
//! * [`model`]: tiny transformer encoders, Gumbel-softmax masks, masking functions.
//! * [`training`]: loss objectives, predictor pre-training and calibration, the training loop.
//! * [`evaluation`]: accuracy, rationale P/R/F1, sufficiency-accuracy, perturbation curves.
//! * [`experiments`]: configs, grid sweeps, McNemar tests, factor regression, report export.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod training;

pub use error::{Error, Result};
