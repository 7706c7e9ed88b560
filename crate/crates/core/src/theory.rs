//! Closed-form asymptotic quantities for the truncated kernel estimator and
//! a brute-force Monte Carlo check of the truncated-moment expansion.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::estimate::SpotEstimate;
use crate::kernels::{Kernel, KernelError};
use crate::sim::{standard_symmetric_stable, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("kernel weights sum to zero around tau = {0}")]
    DegenerateDenominator(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Local jump-activity description at one time point: Lévy density
/// `C± |x|^{-1-Y}` scaled by `|χ|`, plus the spot variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpActivityParams {
    pub y: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub chi: f64,
    pub sigma2: f64,
}

impl JumpActivityParams {
    pub fn new(y: f64, c_plus: f64, c_minus: f64, chi: f64, sigma2: f64) -> Result<Self, TheoryError> {
        let p = Self {
            y,
            c_plus,
            c_minus,
            chi,
            sigma2,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters of `σ W + χ J` with `J` symmetric strictly `y`-stable of
    /// scale `scale` (unit-time characteristic function `exp(-scale^y |u|^y)`).
    pub fn from_stable_scale(y: f64, scale: f64, chi: f64, sigma2: f64) -> Result<Self, TheoryError> {
        let c = levy_constant_from_scale(y, scale)?;
        Self::new(y, c, c, chi, sigma2)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.y > 0.0 && self.y < 2.0) || self.y == 1.0 {
            return Err(TheoryError::Domain(format!(
                "activity index must lie in (0, 2) without 1, got {}",
                self.y
            )));
        }
        if !(self.c_plus > 0.0 && self.c_minus > 0.0) {
            return Err(TheoryError::Domain(format!(
                "Lévy constants must be positive, got ({}, {})",
                self.c_plus, self.c_minus
            )));
        }
        if !(self.chi.is_finite() && self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(TheoryError::Domain("chi must be finite and sigma2 non-negative".into()));
        }
        Ok(())
    }

    fn jump_mass(&self) -> f64 {
        (self.c_plus + self.c_minus) * self.chi.abs().powf(self.y)
    }

    /// Stable scale reproducing `(c_plus + c_minus) / 2`.
    pub fn stable_scale(&self) -> Result<f64, TheoryError> {
        if ((self.c_plus - self.c_minus) / (self.c_plus + self.c_minus)).abs() > 1e-12 {
            return Err(TheoryError::Domain(
                "only symmetric Lévy densities can be simulated".into(),
            ));
        }
        let c = 0.5 * (self.c_plus + self.c_minus);
        Ok((c / stable_density_factor(self.y)).powf(1.0 / self.y))
    }
}

fn stable_density_factor(y: f64) -> f64 {
    y * (1.0 - y) / (2.0 * gamma(2.0 - y) * (PI * y / 2.0).cos())
}

/// Lévy density constant `C` (`ν(dx) = C |x|^{-1-y} dx`) of the symmetric
/// stable law with characteristic exponent `scale^y |u|^y`.
pub fn levy_constant_from_scale(y: f64, scale: f64) -> Result<f64, TheoryError> {
    if !(y > 0.0 && y < 2.0) || y == 1.0 {
        return Err(TheoryError::Domain(format!("activity index must lie in (0, 2) without 1, got {y}")));
    }
    if !(scale > 0.0) {
        return Err(TheoryError::Domain(format!("stable scale must be positive, got {scale}")));
    }
    Ok(scale.powf(y) * stable_density_factor(y))
}

/// `C_p = (C₊ + C₋) |χ|^Y / (2p - Y)`.
pub fn c_coeff(p: u32, params: &JumpActivityParams) -> Result<f64, TheoryError> {
    let denom = 2.0 * p as f64 - params.y;
    if p == 0 || denom <= 0.0 {
        return Err(TheoryError::Domain(format!("need 2p > Y, got p = {p}, Y = {}", params.y)));
    }
    Ok(params.jump_mass() / denom)
}

/// `D_1 = (C₊ + C₋)(Y + 1)(Y + 2) / (2Y) · σ² |χ|^Y`, the magnitude of the
/// Brownian smoothing term. Gaussian noise pushes squared mass across the
/// threshold, so it enters the expansions below with a negative sign.
pub fn d_coeff(params: &JumpActivityParams) -> f64 {
    let y = params.y;
    params.jump_mass() * (y + 1.0) * (y + 2.0) / (2.0 * y) * params.sigma2
}

fn double_factorial_odd(p: u32) -> f64 {
    (1..=p).map(|k| (2 * k - 1) as f64).product()
}

fn check_scales(dt: f64, v: f64) -> Result<(), TheoryError> {
    if !(dt > 0.0) {
        return Err(TheoryError::Domain(format!("dt must be positive, got {dt}")));
    }
    if !(v > dt.sqrt()) {
        return Err(TheoryError::Precondition(format!(
            "threshold {v} must exceed sqrt(dt) = {}",
            dt.sqrt()
        )));
    }
    Ok(())
}

/// Small-`Δ` expansion of `E[(ΔX)^{2p} 1{|ΔX| <= v}]`.
///
/// `p = 1`: `σ²Δ + C₁Δv^{2-Y} - D₁Δ²v^{-Y}`;
/// `p >= 2`: `(2p-1)!! σ^{2p} Δ^p + C_p Δ v^{2p-Y}`.
pub fn truncated_moment_expansion(
    p: u32,
    params: &JumpActivityParams,
    dt: f64,
    v: f64,
) -> Result<f64, TheoryError> {
    check_scales(dt, v)?;
    let y = params.y;
    let cp = c_coeff(p, params)?;
    let pf = p as f64;
    if p == 1 {
        Ok(params.sigma2 * dt + cp * dt * v.powf(2.0 - y) - d_coeff(params) * dt * dt * v.powf(-y))
    } else {
        Ok(double_factorial_odd(p) * params.sigma2.powf(pf) * dt.powf(pf) + cp * dt * v.powf(2.0 * pf - y))
    }
}

/// Expansion of `E[(ΔX)² 1{v < |ΔX| <= ζv}]`:
/// `C₁Δ(ζ^{2-Y} - 1)v^{2-Y} - D₁Δ²(ζ^{-Y} - 1)v^{-Y}`.
pub fn truncated_difference_expansion(
    params: &JumpActivityParams,
    dt: f64,
    v: f64,
    zeta: f64,
) -> Result<f64, TheoryError> {
    check_scales(dt, v)?;
    if !(zeta > 1.0) {
        return Err(TheoryError::Domain(format!("zeta must exceed 1, got {zeta}")));
    }
    let y = params.y;
    let c1 = c_coeff(1, params)?;
    Ok(c1 * dt * (zeta.powf(2.0 - y) - 1.0) * v.powf(2.0 - y)
        - d_coeff(params) * dt * dt * (zeta.powf(-y) - 1.0) * v.powf(-y))
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub draws: usize,
}

const MIN_DRAWS: usize = 10_000;

fn mc_band<R: Rng + ?Sized>(
    p: u32,
    params: &JumpActivityParams,
    dt: f64,
    lo: f64,
    hi: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate, TheoryError> {
    params.validate()?;
    if n_draws < MIN_DRAWS {
        return Err(TheoryError::Precondition(format!(
            "need at least {MIN_DRAWS} draws, got {n_draws}"
        )));
    }
    if !(dt > 0.0) {
        return Err(TheoryError::Domain(format!("dt must be positive, got {dt}")));
    }
    let sd = (params.sigma2 * dt).sqrt();
    let jump = if params.chi == 0.0 {
        0.0
    } else {
        params.chi * params.stable_scale()? * dt.powf(1.0 / params.y)
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_draws {
        let z: f64 = rng.sample(StandardNormal);
        let mut dx = sd * z;
        if jump != 0.0 {
            dx += jump * standard_symmetric_stable(params.y, rng);
        }
        let a = dx.abs();
        if a > lo && a <= hi {
            let f = dx.powi(2 * p as i32);
            sum += f;
            sum_sq += f * f;
        }
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(MonteCarloEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        draws: n_draws,
    })
}

/// Monte Carlo estimate of `E[(ΔX)^{2p} 1{|ΔX| <= v}]` for
/// `ΔX = σ√Δ Z + χ ΔJ`. `v = ∞` disables truncation.
pub fn mc_truncated_moment_oracle<R: Rng + ?Sized>(
    p: u32,
    params: &JumpActivityParams,
    dt: f64,
    v: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate, TheoryError> {
    if !(v > 0.0) {
        return Err(TheoryError::Domain(format!("threshold must be positive, got {v}")));
    }
    mc_band(p, params, dt, -1.0, v, n_draws, rng)
}

/// Monte Carlo estimate of `E[(ΔX)^{2p} 1{v < |ΔX| <= ζv}]`.
pub fn mc_truncated_band_oracle<R: Rng + ?Sized>(
    p: u32,
    params: &JumpActivityParams,
    dt: f64,
    v: f64,
    zeta: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate, TheoryError> {
    if !(v > 0.0 && zeta > 1.0) {
        return Err(TheoryError::Domain(format!("need v > 0 and zeta > 1, got {v}, {zeta}")));
    }
    mc_band(p, params, dt, v, zeta * v, n_draws, rng)
}

/// Leading bias of the truncated estimator at `tau`: kernel-weighted average
/// over grid points `t_{i-1} = (i-1)Δ` of `C_{1,i} v^{2-Y} - D_{1,i} Δ v^{-Y}`.
pub fn bias_a(
    v: f64,
    m: f64,
    kernel: &Kernel,
    params: &[JumpActivityParams],
    tau: f64,
    dt: f64,
) -> Result<f64, TheoryError> {
    if !(v > 0.0 && m > 0.0 && dt > 0.0) {
        return Err(TheoryError::Domain("v, m and dt must be positive".into()));
    }
    let b = m * dt;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, p) in params.iter().enumerate() {
        let w = kernel.eval((i as f64 * dt - tau) / b) / b;
        if w == 0.0 {
            continue;
        }
        let term = c_coeff(1, p)? * v.powf(2.0 - p.y) - d_coeff(p) * dt * v.powf(-p.y);
        num += w * term;
        den += w;
    }
    if !(den > 0.0) {
        return Err(TheoryError::DegenerateDenominator(tau));
    }
    Ok(num / den)
}

/// `u_n = Δ^{-1/2} v^{2 - Y/2}`.
pub fn u_rate(dt: f64, v: f64, y: f64) -> Result<f64, TheoryError> {
    if !(dt > 0.0 && v > 0.0) {
        return Err(TheoryError::Domain("dt and v must be positive".into()));
    }
    Ok(dt.powf(-0.5) * v.powf(2.0 - y / 2.0))
}

/// Asymptotic variance of the threshold-difference statistic:
/// `(C₊ + C₋)|χ|^Y / (4 - Y) · (ζ^{4-Y} - 1) · ∫K²`.
pub fn difference_clt_variance(
    zeta: f64,
    params: &JumpActivityParams,
    kernel: &Kernel,
) -> Result<f64, TheoryError> {
    if !(zeta > 1.0) {
        return Err(TheoryError::Domain(format!("zeta must exceed 1, got {zeta}")));
    }
    let y = params.y;
    Ok(params.jump_mass() / (4.0 - y) * (zeta.powf(4.0 - y) - 1.0) * kernel.k_squared_integral()?)
}

/// Variance `2σ⁴ ∫K²` of the Brownian limit term.
pub fn z1_variance(sigma2: f64, kernel: &Kernel) -> Result<f64, TheoryError> {
    Ok(2.0 * sigma2 * sigma2 * kernel.k_squared_integral()?)
}

/// Variance `σ̃² ∫L²` of the volatility-of-volatility limit term, for a
/// caller-supplied `σ̃²`.
pub fn z2_variance(vol_of_vol2: f64, kernel: &Kernel) -> Result<f64, TheoryError> {
    Ok(vol_of_vol2 * kernel.l_squared_integral()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `ĉ ± z · sqrt(2 ĉ² ∫K² / m)`. Valid when `m √Δ → 0`, where the
/// volatility-of-volatility term drops out of the limit.
pub fn feasible_ci(
    estimate: &SpotEstimate,
    m: f64,
    kernel: &Kernel,
    level: f64,
) -> Result<ConfidenceInterval, TheoryError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(TheoryError::Domain(format!("coverage level must lie in (0, 1), got {level}")));
    }
    if !(m > 0.0) {
        return Err(TheoryError::Domain(format!("bandwidth multiplier must be positive, got {m}")));
    }
    let c = estimate.value;
    if !(c >= 0.0) {
        return Err(TheoryError::Precondition(format!("spot estimate must be non-negative, got {c}")));
    }
    let normal = Normal::standard();
    let z = normal.inverse_cdf(0.5 + level / 2.0);
    let half = z * (2.0 * c * c * kernel.k_squared_integral()? / m).sqrt();
    Ok(ConfidenceInterval {
        lower: c - half,
        upper: c + half,
        level,
    })
}

/// Documented regime boundaries in the activity index `y` that a run at
/// `y` crosses.
pub fn regime_notes(y: f64) -> Vec<String> {
    let mut notes = Vec::new();
    if y >= 1.5 {
        notes.push(format!(
            "Y = {y} >= 3/2: the stage-0 estimator has no bias-free feasible CLT at rate dt^(1/4)"
        ));
    }
    if y >= 12.0 / 7.0 {
        notes.push(format!(
            "Y = {y} >= 12/7: the one-step debiased estimator has no rate-optimal CLT with m ~ dt^(-1/2)"
        ));
    }
    if y >= 20.0 / 11.0 {
        notes.push(format!(
            "Y = {y} >= 20/11: the two-step debiased estimator has no rate-optimal CLT with m ~ dt^(-1/2)"
        ));
    }
    notes
}
