//! Uncertainty-weighted multitask learning for PHQ-8 depression detection,
//! with per-group uncertainty weighting (U-Fair), group fairness metrics,
//! Pareto frontiers and task-difficulty analysis.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod phq;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
