//! Domain-adaptive training for a tiny one-stage detector: weak
//! self-training with supporting-region pseudo-label scoring, and adversarial
//! background score regularization through a gradient reversal junction.

pub mod boxops;
pub mod detector;
pub mod error;
pub mod nn;
pub mod par;

pub use error::{Error, Result};
pub mod losses;
pub mod pseudolabel;
pub mod data;
pub mod evalreport;
pub mod trainloop;
pub mod cli;
