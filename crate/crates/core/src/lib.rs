//! Desk-scale laboratory for disentangled speech representations: adversarial
//! feature-statistic style augmentation, a content/prosody attribute encoder
//! distilled from a pitch/energy teacher, and objective evaluation metrics,
//! all runnable on synthetic soft-unit corpora with known ground truth.

pub mod asa;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod convert;
pub mod error;
pub mod eval;
pub mod nets;
pub mod syndata;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
