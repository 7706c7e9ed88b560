use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::kernels::{Kernel, KernelError, Support};

/// Bandwidth multiplier `m_n`; the kernel bandwidth is `m_n * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `m_n = dt^(-exponent)`.
    DtPower { exponent: f64 },
    Fixed { m: f64 },
}

impl BandwidthRule {
    pub fn multiplier(&self, dt: f64) -> f64 {
        match *self {
            BandwidthRule::DtPower { exponent } => dt.powf(-exponent),
            BandwidthRule::Fixed { m } => m,
        }
    }

    /// `m_n` as a count of steps: nearest integer, at least 1.
    pub fn count(&self, dt: f64) -> usize {
        (self.multiplier(dt).round() as usize).max(1)
    }
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::DtPower { exponent: 0.5 }
    }
}

/// Truncation level `v_n` built from the bipower variation `BV`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `v_n = sqrt(BV) * dt^alpha`.
    DtPower { alpha: f64 },
    /// `v_n = sqrt(BV) * v0`.
    Scaled { v0: f64 },
    /// `v_n = v`, independent of the path.
    Fixed { v: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::DtPower { alpha: 5.0 / 12.0 }
    }
}

/// Tuning of the characteristic-function estimators: `h = dt^h_exponent`,
/// `u_n = dt^u_exponent / sqrt(BV)`, and the debias pair `(lambda, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfTuning {
    pub h_exponent: f64,
    pub u_exponent: f64,
    pub lambda: f64,
    pub p: f64,
}

impl Default for CfTuning {
    fn default() -> Self {
        Self {
            h_exponent: 0.51,
            u_exponent: 0.0025,
            lambda: 1.5,
            p: 0.5,
        }
    }
}

/// How the sign of the aggregated debias ratio is constrained.
///
/// The stage-`k` ratio `R_k` is forced to the sign the bias expansion
/// predicts for it: non-negative at stage 1, non-positive at stage 2.
/// `Constrained` subtracts `A_k * (c(zeta v) - c(v))⁺` with `A_1 = R_1 ∨ 0`
/// and `A_2 = R_2 ∧ 0`. `Flipped` instead negates the ratio at stage 2 and
/// clamps it at zero, `A_2 = (-R_2) ∨ 0`, so both stages only ever
/// subtract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PracticalSign {
    #[default]
    Constrained,
    Flipped,
}

/// Serializable description of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelRepr {
    Named(String),
    Table { name: String, xs: Vec<f64>, ks: Vec<f64> },
}

impl KernelRepr {
    pub fn build(&self) -> Result<Kernel, KernelError> {
        match self {
            KernelRepr::Named(name) => Kernel::by_name(name),
            KernelRepr::Table { name, xs, ks } => Kernel::tabulated(name, xs.clone(), ks.clone()),
        }
    }
}

impl From<&Kernel> for KernelRepr {
    fn from(k: &Kernel) -> Self {
        KernelRepr::Named(k.name().to_string())
    }
}

fn default_kernel() -> Kernel {
    Kernel::exponential()
}

mod kernel_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &Kernel, s: S) -> Result<S::Ok, S::Error> {
        KernelRepr::from(k).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Kernel, D::Error> {
        let repr = KernelRepr::deserialize(d)?;
        repr.build().map_err(serde::de::Error::custom)
    }
}

/// All tuning of the truncated, debiased and characteristic-function
/// estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(with = "kernel_serde", default = "default_kernel")]
    pub kernel: Kernel,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default)]
    pub threshold: ThresholdRule,
    #[serde(default)]
    pub zeta: Vec<f64>,
    #[serde(default)]
    pub p_scalers: Vec<f64>,
    #[serde(default)]
    pub cf: CfTuning,
    #[serde(default)]
    pub sign: PracticalSign,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::exponential(),
            bandwidth: BandwidthRule::default(),
            threshold: ThresholdRule::default(),
            zeta: Vec::new(),
            p_scalers: Vec::new(),
            cf: CfTuning::default(),
            sign: PracticalSign::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn with_kernel(kernel: Kernel) -> Self {
        Self {
            kernel,
            ..Self::default()
        }
    }

    pub fn with_debias(mut self, zeta: &[f64], p_scalers: &[f64]) -> Self {
        self.zeta = zeta.to_vec();
        self.p_scalers = p_scalers.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), EstimateError> {
        let bad = |msg: String| Err(EstimateError::Config(msg));
        if let Some(z) = self.zeta.iter().find(|z| !(**z > 1.0) || !z.is_finite()) {
            return bad(format!("every zeta must exceed 1, got {z}"));
        }
        if let Some(p) = self.p_scalers.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return bad(format!("every p scaler must lie in (0, 1], got {p}"));
        }
        match self.threshold {
            ThresholdRule::DtPower { alpha } if !(alpha > 0.0 && alpha < 0.5) => {
                return bad(format!("threshold exponent alpha must lie in (0, 1/2), got {alpha}"))
            }
            ThresholdRule::Scaled { v0 } if !(v0 > 0.0) => {
                return bad(format!("threshold scale v0 must be positive, got {v0}"))
            }
            ThresholdRule::Fixed { v } if !(v > 0.0) => {
                return bad(format!("fixed threshold must be positive, got {v}"))
            }
            _ => {}
        }
        match self.bandwidth {
            BandwidthRule::DtPower { exponent } if !(exponent > 0.0 && exponent < 1.0) => {
                return bad(format!("bandwidth exponent must lie in (0, 1), got {exponent}"))
            }
            BandwidthRule::Fixed { m } if !(m >= 1.0) => {
                return bad(format!("bandwidth multiplier must be >= 1, got {m}"))
            }
            _ => {}
        }
        if !(self.cf.h_exponent > 0.0) {
            return bad(format!("h exponent must be positive, got {}", self.cf.h_exponent));
        }
        if !(self.cf.lambda > 1.0) {
            return bad(format!("lambda must exceed 1, got {}", self.cf.lambda));
        }
        if !(self.cf.p > 0.0 && self.cf.p <= 1.0) {
            return bad(format!("cf p must lie in (0, 1], got {}", self.cf.p));
        }
        Ok(())
    }

    pub fn kernel_is_compact(&self) -> bool {
        matches!(self.kernel.support(), Support::Bounded { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EstimatorConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_invalid_tuning() {
        let c = EstimatorConfig::default().with_debias(&[1.0], &[0.5]);
        assert!(c.validate().is_err());
        let c = EstimatorConfig::default().with_debias(&[1.5], &[1.5]);
        assert!(c.validate().is_err());
        let mut c = EstimatorConfig::default();
        c.threshold = ThresholdRule::DtPower { alpha: 0.5 };
        assert!(c.validate().is_err());
        let mut c = EstimatorConfig::default();
        c.cf.h_exponent = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bandwidth_count_rounds() {
        let rule = BandwidthRule::default();
        assert_eq!(rule.count(1.0 / 8580.0), 93);
        assert!((rule.multiplier(1e-4) - 100.0).abs() < 1e-9);
        assert_eq!(BandwidthRule::Fixed { m: 0.2 }.count(1.0), 1);
    }

    #[test]
    fn json_round_trip_keeps_kernel() {
        let c = EstimatorConfig::with_kernel(Kernel::uniform2()).with_debias(&[1.9, 1.75], &[0.7, 0.25]);
        let text = serde_json::to_string(&c).unwrap();
        let back: EstimatorConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.kernel.name(), "uniform2");
    }
}
