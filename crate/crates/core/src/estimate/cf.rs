//! Spot variance from a locally smoothed empirical characteristic function.
//!
//! `S(u, h) = Δ Σ K_h(iΔ - τ) cos(u ΔX_i / √Δ)` estimates
//! `exp(-u² σ²_τ / 2)`; inverting with a floor at `√(Δ/h)` and removing the
//! leading small-sample bias gives
//!
//! `σ̂²(u, h) = σ̄² - 2Δ / (u² h) · sinh(σ̄²)²`, `σ̄² = -2/u² · log(S ∨ √(Δ/h))`.

use super::truncated::{bipower_variation, support_range};
use super::{EstimateError, EstimatorConfig, Flags, GUARD_EPS_ABS, GUARD_EPS_REL};
use crate::kernels::Kernel;
use crate::sim::PathSample;

/// Kernel weights and rescaled increments for a set of evaluation points.
#[derive(Debug, Clone)]
pub struct CfSurface {
    dt: f64,
    h: f64,
    scaled: Vec<f64>,
    points: Vec<f64>,
    windows: Vec<(usize, Vec<f64>)>,
}

impl CfSurface {
    pub fn new(path: &PathSample, points: &[f64], h: f64, kernel: &Kernel) -> Result<Self, EstimateError> {
        if path.x.len() < 3 {
            return Err(EstimateError::TooShort {
                needed: 3,
                got: path.x.len(),
            });
        }
        if !(h > 0.0) {
            return Err(EstimateError::Config(format!("cf bandwidth h must be positive, got {h}")));
        }
        let n = path.n_steps();
        let dt = path.dt();
        let sqrt_dt = dt.sqrt();
        let scaled = path.increments().iter().map(|d| d / sqrt_dt).collect();
        // increment i (0-based) sits at its right endpoint t_{i+1}
        let right = &path.times[1..];
        let windows = points
            .iter()
            .map(|&tau| {
                let (lo, hi) = support_range(kernel, right, n, tau, h);
                let w = (lo..hi).map(|i| kernel.eval((right[i] - tau) / h) / h).collect();
                (lo, w)
            })
            .collect();
        Ok(Self {
            dt,
            h,
            scaled,
            points: points.to_vec(),
            windows,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn smoothed_cosine(&self, point: usize, u: f64) -> f64 {
        let (lo, w) = &self.windows[point];
        let s: f64 = w
            .iter()
            .zip(&self.scaled[*lo..*lo + w.len()])
            .map(|(wi, y)| wi * (u * y).cos())
            .sum();
        self.dt * s
    }

    pub fn floor(&self) -> f64 {
        (self.dt / self.h).sqrt()
    }

    pub fn spot_vol(&self, point: usize, u: f64) -> f64 {
        let s = self.smoothed_cosine(point, u);
        let bar = -2.0 / (u * u) * s.max(self.floor()).ln();
        let sh = bar.sinh();
        bar - 2.0 * self.dt / (u * u * self.h) * sh * sh
    }

    /// Bias-corrected estimate at `tau_point` using the aggregated ratio over
    /// `agg` points. Returns the value and flags (guard when the aggregated
    /// second difference vanishes).
    pub fn debiased(
        &self,
        tau_point: usize,
        agg: &[usize],
        u: f64,
        lambda: f64,
        p: f64,
    ) -> (f64, Flags) {
        let base = self.spot_vol(tau_point, u);
        let diff_tau = (self.spot_vol(tau_point, lambda * u) - base).min(0.0);
        let (num, den, scale) = self.aggregated(agg, u, lambda, p);
        self.apply(base, diff_tau, num, den, scale)
    }

    fn aggregated(&self, agg: &[usize], u: f64, lambda: f64, p: f64) -> (f64, f64, f64) {
        let (mut num, mut den, mut scale) = (0.0, 0.0, 0.0_f64);
        for &g in agg {
            let a = self.spot_vol(g, p * u);
            let b = self.spot_vol(g, lambda * p * u);
            let c = self.spot_vol(g, lambda * lambda * p * u);
            num += b - a;
            den += c - 2.0 * b + a;
            scale = scale.max(a.abs()).max(b.abs()).max(c.abs());
        }
        (num, den, scale * agg.len() as f64)
    }

    fn apply(&self, base: f64, diff_tau: f64, num: f64, den: f64, scale: f64) -> (f64, Flags) {
        if !(den.abs() >= GUARD_EPS_REL * scale.max(GUARD_EPS_ABS)) {
            return (
                base,
                Flags {
                    guard: true,
                    negative: base < 0.0,
                    ..Flags::default()
                },
            );
        }
        let value = base - num * diff_tau / den;
        (
            value,
            Flags {
                negative: value < 0.0,
                ..Flags::default()
            },
        )
    }

    /// Debiased estimates at every point in `taus`, sharing the aggregated
    /// ratio across them.
    pub fn debiased_many(
        &self,
        taus: &[usize],
        agg: &[usize],
        u: f64,
        lambda: f64,
        p: f64,
    ) -> Vec<(f64, Flags)> {
        let (num, den, scale) = self.aggregated(agg, u, lambda, p);
        taus.iter()
            .map(|&t| {
                let base = self.spot_vol(t, u);
                let diff_tau = (self.spot_vol(t, lambda * u) - base).min(0.0);
                self.apply(base, diff_tau, num, den, scale)
            })
            .collect()
    }
}

/// Frequency `u_n = dt^a / √BV` and bandwidth `h = dt^b` for `path`.
pub fn cf_tuning_values(path: &PathSample, config: &EstimatorConfig) -> Result<(f64, f64), EstimateError> {
    let dt = path.dt();
    let bv = bipower_variation(path)?;
    if !(bv > 0.0) {
        return Err(EstimateError::DegenerateBipower);
    }
    Ok((dt.powf(config.cf.u_exponent) / bv.sqrt(), dt.powf(config.cf.h_exponent)))
}

fn check_args(u: f64, h: f64) -> Result<(), EstimateError> {
    if !(u > 0.0) {
        return Err(EstimateError::Config(format!("frequency u must be positive, got {u}")));
    }
    if !(h > 0.0) {
        return Err(EstimateError::Config(format!("bandwidth h must be positive, got {h}")));
    }
    Ok(())
}

/// `Δ Σ K_h(iΔ - τ) cos(u ΔX_i / √Δ)`.
pub fn cf_smoothed_cosine(
    path: &PathSample,
    tau: f64,
    u: f64,
    h: f64,
    kernel: &Kernel,
) -> Result<f64, EstimateError> {
    check_args(u, h)?;
    Ok(CfSurface::new(path, &[tau], h, kernel)?.smoothed_cosine(0, u))
}

/// Floored log-inverted characteristic-function estimate with the `sinh²`
/// bias correction.
pub fn cf_spot_vol(
    path: &PathSample,
    tau: f64,
    u: f64,
    h: f64,
    kernel: &Kernel,
) -> Result<f64, EstimateError> {
    check_args(u, h)?;
    Ok(CfSurface::new(path, &[tau], h, kernel)?.spot_vol(0, u))
}

/// Characteristic-function estimate minus the time-aggregated bias term built
/// from frequencies `pu, λpu, λ²pu` on `{(i-1) m Δ : i = 1..⌊T/(mΔ)⌋}`.
pub fn cf_spot_vol_debiased(
    path: &PathSample,
    tau: f64,
    config: &EstimatorConfig,
) -> Result<f64, EstimateError> {
    config.validate()?;
    let (u, h) = cf_tuning_values(path, config)?;
    let dt = path.dt();
    let b = config.bandwidth.multiplier(dt) * dt;
    let mut points = vec![tau];
    points.extend(cf_aggregation_grid(path.horizon(), b));
    let surface = CfSurface::new(path, &points, h, &config.kernel)?;
    let agg: Vec<usize> = (1..points.len()).collect();
    Ok(surface.debiased(0, &agg, u, config.cf.lambda, config.cf.p).0)
}

/// `{(i - 1) b : i = 1..⌊T / b⌋}`.
pub fn cf_aggregation_grid(horizon: f64, b: f64) -> Vec<f64> {
    let count = (horizon / b + 1e-9).floor() as usize;
    (0..count).map(|i| i as f64 * b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_path(n: usize) -> PathSample {
        PathSample::from_prices(vec![0.0; n + 1], 1.0 / n as f64)
    }

    #[test]
    fn zero_increments_sum_kernel_mass() {
        let p = flat_path(2000);
        let h = 0.05;
        let s = cf_smoothed_cosine(&p, 0.5, 1.3, h, &Kernel::quartic_k3()).unwrap();
        assert!((s - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn floor_arithmetic() {
        // huge frequency on a noisy path: S collapses and the floor binds
        let inc: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64 - 50.0) * 1e-3).collect();
        let mut x = vec![0.0];
        for d in inc {
            x.push(x.last().unwrap() + d);
        }
        let p = PathSample::from_prices(x, 1e-3);
        let h = 0.05;
        let k = Kernel::quartic_k3();
        let u = 1e4;
        let surf = CfSurface::new(&p, &[0.5], h, &k).unwrap();
        let s = surf.smoothed_cosine(0, u);
        let floor = (p.dt() / h).sqrt();
        assert!(s < floor, "S = {s} not below floor {floor}");
        let bar = -2.0 / (u * u) * floor.ln();
        let expected = bar - 2.0 * p.dt() / (u * u * h) * bar.sinh().powi(2);
        assert!((surf.spot_vol(0, u) - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_bar_gives_zero_estimate() {
        // tau between grid points: exactly 200 right endpoints in the window, S = 1
        let p = flat_path(1000);
        let v = cf_spot_vol(&p, 0.5005, 2.0, 0.1, &Kernel::uniform2()).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn argument_checks() {
        let p = flat_path(100);
        assert!(cf_spot_vol(&p, 0.5, 0.0, 0.1, &Kernel::quartic_k3()).is_err());
        assert!(cf_spot_vol(&p, 0.5, 1.0, 0.0, &Kernel::quartic_k3()).is_err());
    }

    #[test]
    fn clamp_zeroes_correction_when_lambda_estimate_is_larger() {
        let inc: Vec<f64> = (0..4000).map(|i| ((i * 7919 % 211) as f64 / 211.0 - 0.5) * 0.03).collect();
        let mut x = vec![0.0];
        for d in inc {
            x.push(x.last().unwrap() + d);
        }
        let p = PathSample::from_prices(x, 1.0 / 4000.0);
        let k = Kernel::quartic_k3();
        let h = 0.05;
        let surf = CfSurface::new(&p, &[0.5, 0.2, 0.4, 0.6, 0.8], h, &k).unwrap();
        let u = 0.7;
        for lambda in [1.2, 1.5, 1.9] {
            let base = surf.spot_vol(0, u);
            let at_lambda = surf.spot_vol(0, lambda * u);
            let (value, _) = surf.debiased(0, &[1, 2, 3, 4], u, lambda, 0.5);
            if at_lambda >= base {
                assert_eq!(value, base);
            }
        }
    }

    #[test]
    fn degenerate_aggregation_keeps_base() {
        let p = flat_path(1000);
        let surf = CfSurface::new(&p, &[0.5, 0.3, 0.7], 0.1, &Kernel::uniform2()).unwrap();
        let (value, flags) = surf.debiased(0, &[1, 2], 1.0, 1.5, 0.5);
        assert!(flags.guard);
        assert_eq!(value, surf.spot_vol(0, 1.0));
    }
}
