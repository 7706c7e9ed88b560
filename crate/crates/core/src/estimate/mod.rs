//! Spot-variance estimators: truncated kernel smoothing of squared
//! increments, threshold debiasing (pointwise and time-aggregated), and
//! the empirical characteristic-function competitors.

mod cf;
mod config;
mod debias;
mod truncated;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::KernelError;

pub use cf::{
    cf_aggregation_grid, cf_smoothed_cosine, cf_spot_vol, cf_spot_vol_debiased, cf_tuning_values,
    CfSurface,
};
pub use config::{
    BandwidthRule, CfTuning, EstimatorConfig, KernelRepr, PracticalSign, ThresholdRule,
};
pub use debias::{
    debias_step, debias_step_guarded, spot_vol_debiased_practical, spot_vol_debiased_theoretical,
    DebiasEngine, GUARD_EPS_ABS, GUARD_EPS_REL,
};
pub use truncated::{
    aggregation_grid, bipower_variation, spot_vol_truncated, threshold_v, SpotSurface,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("kernel weights vanish around tau = {tau}: denominator is zero")]
    DegenerateDenominator { tau: f64 },
    #[error("evaluation time {tau} outside the open observation window (0, {horizon})")]
    TauOutOfRange { tau: f64, horizon: f64 },
    #[error("path needs at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("bipower variation is zero; frequency rule u = dt^a / sqrt(BV) is undefined")]
    DegenerateBipower,
}

/// Per-estimate bookkeeping flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// A debias denominator was numerically zero; the previous stage was kept.
    pub guard: bool,
    /// The reported value is negative.
    pub negative: bool,
    /// The sign-constrained aggregated ratio was clamped to zero.
    pub sign_clamp: bool,
}

impl Flags {
    pub fn merge(self, other: Flags) -> Flags {
        Flags {
            guard: self.guard || other.guard,
            negative: self.negative || other.negative,
            sign_clamp: self.sign_clamp || other.sign_clamp,
        }
    }

    pub fn any(&self) -> bool {
        self.guard || self.negative || self.sign_clamp
    }

    /// `|`-separated flag names, empty when no flag is set.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.guard {
            parts.push("guard");
        }
        if self.negative {
            parts.push("negative");
        }
        if self.sign_clamp {
            parts.push("sign_clamp");
        }
        parts.join("|")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Numerator of the last debias step (squared first difference for the
    /// pointwise recursion, aggregated first difference for the practical one).
    pub numerator: Option<f64>,
    /// Denominator of the last debias step (second difference).
    pub denominator: Option<f64>,
    /// Increments discarded by the base threshold.
    pub truncated: usize,
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotEstimate {
    pub tau: f64,
    pub value: f64,
    pub stage: u8,
    pub diagnostics: Diagnostics,
}

impl SpotEstimate {
    /// CSV row `tau,stage,value,flags`.
    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{},{:e},{}",
            self.tau,
            self.stage,
            self.value,
            self.diagnostics.flags.label()
        )
    }
}

pub const ESTIMATE_CSV_HEADER: &str = "tau,stage,value,flags";
