//! Spot volatility estimation from high-frequency prices with jumps of
//! unbounded variation: truncated kernel estimators, threshold debiasing,
//! characteristic-function competitors, simulation and experiment tooling.

pub mod estimate;
pub mod harness;
pub mod kernels;
pub mod quad;
pub mod sim;
pub mod theory;
