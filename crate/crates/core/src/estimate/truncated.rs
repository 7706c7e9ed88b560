use std::f64::consts::FRAC_PI_2;

use super::{Diagnostics, EstimateError, Flags, SpotEstimate, ThresholdRule};
use crate::kernels::{Kernel, Support};
use crate::sim::PathSample;

/// `(π/2) Σ_{i=2}^n |ΔX_i| |ΔX_{i-1}| / T`.
pub fn bipower_variation(path: &PathSample) -> Result<f64, EstimateError> {
    if path.x.len() < 3 {
        return Err(EstimateError::TooShort {
            needed: 3,
            got: path.x.len(),
        });
    }
    let inc = path.increments();
    let sum: f64 = inc.windows(2).map(|w| w[0].abs() * w[1].abs()).sum();
    Ok(FRAC_PI_2 * sum / path.horizon())
}

/// Truncation level from the bipower variation; `+∞` when `bv == 0` so a
/// degenerate path keeps every increment.
pub fn threshold_v(bv: f64, dt: f64, rule: &ThresholdRule) -> f64 {
    if let ThresholdRule::Fixed { v } = *rule {
        return v;
    }
    if bv <= 0.0 {
        return f64::INFINITY;
    }
    match *rule {
        ThresholdRule::DtPower { alpha } => bv.sqrt() * dt.powf(alpha),
        ThresholdRule::Scaled { v0 } => bv.sqrt() * v0,
        ThresholdRule::Fixed { v } => v,
    }
}

/// Evaluation points `{i b : i = 1..⌊T / b⌋}` used to aggregate debias ratios.
pub fn aggregation_grid(horizon: f64, bandwidth: f64) -> Vec<f64> {
    let count = (horizon / bandwidth + 1e-9).floor() as usize;
    (1..=count).map(|i| i as f64 * bandwidth).collect()
}

fn check_tau(path: &PathSample, tau: f64) -> Result<(), EstimateError> {
    let horizon = path.horizon();
    if !(tau > 0.0 && tau < horizon) {
        return Err(EstimateError::TauOutOfRange { tau, horizon });
    }
    Ok(())
}

/// Index range `[lo, hi)` of increments `i` (0-based, left endpoint
/// `times[i]`) whose kernel weight can be non-zero.
pub(crate) fn support_range(
    kernel: &Kernel,
    times: &[f64],
    n: usize,
    tau: f64,
    bandwidth: f64,
) -> (usize, usize) {
    match kernel.support() {
        Support::Unbounded => (0, n),
        Support::Bounded { lo, hi } => {
            let a = tau + lo * bandwidth;
            let b = tau + hi * bandwidth;
            let start = times[..n].partition_point(|&t| t < a).saturating_sub(1);
            let end = (times[..n].partition_point(|&t| t <= b) + 1).min(n);
            (start, end.max(start))
        }
    }
}

/// Truncated kernel estimator of the spot variance at `tau`:
///
/// `Σ K_b(t_{i-1} - τ) (ΔX_i)^2 1{|ΔX_i| <= v} / (Δ Σ K_b(t_{j-1} - τ))`
/// with bandwidth `b = m Δ`.
pub fn spot_vol_truncated(
    path: &PathSample,
    tau: f64,
    m: f64,
    v: f64,
    kernel: &Kernel,
) -> Result<SpotEstimate, EstimateError> {
    check_tau(path, tau)?;
    if !(m >= 1.0) {
        return Err(EstimateError::Config(format!("bandwidth multiplier must be >= 1, got {m}")));
    }
    if !(v > 0.0) {
        return Err(EstimateError::Config(format!("threshold must be positive, got {v}")));
    }
    let n = path.n_steps();
    let dt = path.dt();
    let b = m * dt;
    let (lo, hi) = support_range(kernel, &path.times, n, tau, b);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut truncated = 0;
    for i in 0..n {
        let dx = path.x[i + 1] - path.x[i];
        if dx.abs() > v {
            truncated += 1;
        }
        if i < lo || i >= hi {
            continue;
        }
        let w = kernel.eval((path.times[i] - tau) / b) / b;
        den += w;
        if dx.abs() <= v {
            num += w * dx * dx;
        }
    }
    let den = dt * den;
    if !(den > 0.0) {
        return Err(EstimateError::DegenerateDenominator { tau });
    }
    let value = num / den;
    Ok(SpotEstimate {
        tau,
        value,
        stage: 0,
        diagnostics: Diagnostics {
            numerator: None,
            denominator: None,
            truncated,
            flags: Flags {
                negative: value < 0.0,
                ..Flags::default()
            },
        },
    })
}

/// Stage-0 estimator at many evaluation points for arbitrary thresholds.
///
/// Increments are sorted by absolute size once; for each point the kernel
/// weighted squared increments are accumulated in that order, so the
/// truncated numerator for any threshold is a single prefix lookup.
#[derive(Debug, Clone)]
pub struct SpotSurface {
    points: Vec<f64>,
    sorted_abs: Vec<f64>,
    prefix: Vec<f64>,
    denom: Vec<f64>,
    stride: usize,
}

impl SpotSurface {
    pub fn new(
        path: &PathSample,
        points: &[f64],
        bandwidth: f64,
        kernel: &Kernel,
    ) -> Result<Self, EstimateError> {
        if path.x.len() < 3 {
            return Err(EstimateError::TooShort {
                needed: 3,
                got: path.x.len(),
            });
        }
        if !(bandwidth > 0.0) {
            return Err(EstimateError::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let n = path.n_steps();
        let dt = path.dt();
        let inc = path.increments();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| inc[a].abs().total_cmp(&inc[b].abs()).then(a.cmp(&b)));
        let sorted_abs: Vec<f64> = order.iter().map(|&i| inc[i].abs()).collect();
        let sorted_sq: Vec<f64> = order.iter().map(|&i| inc[i] * inc[i]).collect();
        let sorted_t: Vec<f64> = order.iter().map(|&i| path.times[i]).collect();

        let stride = n + 1;
        let mut prefix = vec![0.0; points.len() * stride];
        let mut denom = Vec::with_capacity(points.len());
        let inv_b = 1.0 / bandwidth;
        for (p, &tau) in points.iter().enumerate() {
            let (lo, hi) = support_range(kernel, &path.times, n, tau, bandwidth);
            let den: f64 = (lo..hi)
                .map(|i| kernel.eval((path.times[i] - tau) * inv_b) * inv_b)
                .sum();
            let den = dt * den;
            if !(den > 0.0) {
                return Err(EstimateError::DegenerateDenominator { tau });
            }
            denom.push(den);
            let row = &mut prefix[p * stride..(p + 1) * stride];
            let mut acc = 0.0;
            for k in 0..n {
                acc += kernel.eval((sorted_t[k] - tau) * inv_b) * inv_b * sorted_sq[k];
                row[k + 1] = acc;
            }
        }
        Ok(Self {
            points: points.to_vec(),
            sorted_abs,
            prefix,
            denom,
            stride,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    fn rank(&self, v: f64) -> usize {
        self.sorted_abs.partition_point(|&a| a <= v)
    }

    /// Number of increments with `|ΔX| > v`.
    pub fn truncated_count(&self, v: f64) -> usize {
        self.sorted_abs.len() - self.rank(v)
    }

    pub fn value(&self, point: usize, v: f64) -> f64 {
        let r = self.rank(v);
        self.prefix[point * self.stride + r] / self.denom[point]
    }

    pub fn values(&self, v: f64) -> Vec<f64> {
        let r = self.rank(v);
        (0..self.points.len())
            .map(|p| self.prefix[p * self.stride + r] / self.denom[p])
            .collect()
    }
}
