//! Synthetic data, the PEMB interchange format and the experiment runner.

pub mod pemb;
pub mod runner;
pub mod synth;
