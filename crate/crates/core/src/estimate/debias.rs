//! Threshold debiasing.
//!
//! The pointwise recursion eliminates a power-law bias `a v^β` by combining
//! the estimator at thresholds `v, ζv, ζ²v`:
//!
//! `c̃_k(v) = c̃_{k-1}(v) - (c̃_{k-1}(ζv) - c̃_{k-1}(v))² / (c̃_{k-1}(ζ²v) - 2 c̃_{k-1}(ζv) + c̃_{k-1}(v))`
//!
//! The practical variant replaces the pointwise ratio by one aggregated over
//! a time grid at auxiliary thresholds `p_k v`, sign-constrained, and applied
//! to the non-negative part of the first difference at `τ`.

use std::collections::HashMap;
use std::rc::Rc;

use super::truncated::{aggregation_grid, bipower_variation, threshold_v, SpotSurface};
use super::{
    Diagnostics, EstimateError, EstimatorConfig, Flags, PracticalSign, SpotEstimate,
};
use crate::sim::PathSample;

pub const GUARD_EPS_REL: f64 = 1e-10;
pub const GUARD_EPS_ABS: f64 = 1e-14;

/// One debias step; returns the corrected value and whether the guard fired.
pub fn debias_step_guarded(c_v: f64, c_zv: f64, c_z2v: f64) -> (f64, bool) {
    let den = c_z2v - 2.0 * c_zv + c_v;
    let scale = c_v.abs().max(c_zv.abs()).max(c_z2v.abs()).max(GUARD_EPS_ABS);
    if !(den.abs() >= GUARD_EPS_REL * scale) {
        return (c_v, true);
    }
    let d = c_zv - c_v;
    (c_v - d * d / den, false)
}

/// One debias step from the estimator at thresholds `v`, `ζv`, `ζ²v`.
pub fn debias_step(c_v: f64, c_zv: f64, c_z2v: f64) -> f64 {
    debias_step_guarded(c_v, c_zv, c_z2v).0
}

#[derive(Debug, Clone, Copy, Default)]
struct PointDiag {
    numerator: f64,
    denominator: f64,
    flags: Flags,
}

#[derive(Debug)]
struct Layer {
    values: Vec<f64>,
    diag: Vec<PointDiag>,
}

#[derive(Debug, Clone, Copy)]
struct Ratio {
    /// Multiplier applied to the clamped first difference.
    factor: f64,
    numerator: f64,
    denominator: f64,
    flags: Flags,
}

/// Memoised evaluation of debiased estimators over every point of a
/// [`SpotSurface`].
///
/// Aggregated ratios sum over the points with indices in `agg`.
pub struct DebiasEngine<'a> {
    surface: &'a SpotSurface,
    agg: std::ops::Range<usize>,
    zeta: Vec<f64>,
    p_scalers: Vec<f64>,
    sign: PracticalSign,
    theoretical: HashMap<(usize, u64), Rc<Layer>>,
    practical: HashMap<(usize, u64), Rc<Layer>>,
    ratios: HashMap<(usize, u64), Ratio>,
}

impl<'a> DebiasEngine<'a> {
    pub fn new(
        surface: &'a SpotSurface,
        agg: std::ops::Range<usize>,
        zeta: &[f64],
        p_scalers: &[f64],
        sign: PracticalSign,
    ) -> Self {
        Self {
            surface,
            agg,
            zeta: zeta.to_vec(),
            p_scalers: p_scalers.to_vec(),
            sign,
            theoretical: HashMap::new(),
            practical: HashMap::new(),
            ratios: HashMap::new(),
        }
    }

    fn base(&self, v: f64) -> Rc<Layer> {
        let values = self.surface.values(v);
        let diag = values
            .iter()
            .map(|&x| PointDiag {
                flags: Flags {
                    negative: x < 0.0,
                    ..Flags::default()
                },
                ..PointDiag::default()
            })
            .collect();
        Rc::new(Layer { values, diag })
    }

    fn theoretical_layer(&mut self, stage: usize, v: f64) -> Rc<Layer> {
        if let Some(l) = self.theoretical.get(&(stage, v.to_bits())) {
            return Rc::clone(l);
        }
        let layer = if stage == 0 {
            self.base(v)
        } else {
            let z = self.zeta[stage - 1];
            let a = self.theoretical_layer(stage - 1, v);
            let b = self.theoretical_layer(stage - 1, z * v);
            let c = self.theoretical_layer(stage - 1, z * z * v);
            let mut values = Vec::with_capacity(a.values.len());
            let mut diag = Vec::with_capacity(a.values.len());
            for i in 0..a.values.len() {
                let (cv, czv, cz2v) = (a.values[i], b.values[i], c.values[i]);
                let (value, guard) = debias_step_guarded(cv, czv, cz2v);
                let inherited = a.diag[i].flags.merge(b.diag[i].flags).merge(c.diag[i].flags);
                values.push(value);
                diag.push(PointDiag {
                    numerator: (czv - cv) * (czv - cv),
                    denominator: cz2v - 2.0 * czv + cv,
                    flags: Flags {
                        guard: guard || inherited.guard,
                        negative: value < 0.0,
                        sign_clamp: inherited.sign_clamp,
                    },
                });
            }
            Rc::new(Layer { values, diag })
        };
        self.theoretical.insert((stage, v.to_bits()), Rc::clone(&layer));
        layer
    }

    fn ratio(&mut self, stage: usize, v: f64) -> Ratio {
        if let Some(r) = self.ratios.get(&(stage, v.to_bits())) {
            return *r;
        }
        let z = self.zeta[stage - 1];
        let q = self.p_scalers[stage - 1] * v;
        let a = self.practical_layer(stage - 1, q);
        let b = self.practical_layer(stage - 1, z * q);
        let c = self.practical_layer(stage - 1, z * z * q);
        let (mut num, mut den) = (0.0, 0.0);
        let (mut sa, mut sb, mut sc) = (0.0_f64, 0.0_f64, 0.0_f64);
        let mut inherited = Flags::default();
        for g in self.agg.clone() {
            num += b.values[g] - a.values[g];
            den += c.values[g] - 2.0 * b.values[g] + a.values[g];
            sa += a.values[g].abs();
            sb += b.values[g].abs();
            sc += c.values[g].abs();
            inherited = inherited
                .merge(a.diag[g].flags)
                .merge(b.diag[g].flags)
                .merge(c.diag[g].flags);
        }
        let scale = sa.max(sb).max(sc).max(GUARD_EPS_ABS);
        let mut flags = Flags {
            guard: inherited.guard,
            ..Flags::default()
        };
        let factor = if self.agg.is_empty() || !(den.abs() >= GUARD_EPS_REL * scale) {
            flags.guard = true;
            0.0
        } else {
            let raw = num / den;
            // stage 1 bias grows with v (positive ratio), stage 2 decays (negative)
            let expected_sign = if stage % 2 == 1 { 1.0 } else { -1.0 };
            let oriented = expected_sign * raw;
            if oriented < 0.0 {
                flags.sign_clamp = true;
            }
            let clamped = oriented.max(0.0);
            match self.sign {
                PracticalSign::Constrained => expected_sign * clamped,
                PracticalSign::Flipped => clamped,
            }
        };
        let r = Ratio {
            factor,
            numerator: num,
            denominator: den,
            flags,
        };
        self.ratios.insert((stage, v.to_bits()), r);
        r
    }

    fn practical_layer(&mut self, stage: usize, v: f64) -> Rc<Layer> {
        if let Some(l) = self.practical.get(&(stage, v.to_bits())) {
            return Rc::clone(l);
        }
        let layer = if stage == 0 {
            self.base(v)
        } else {
            let z = self.zeta[stage - 1];
            let ratio = self.ratio(stage, v);
            let a = self.practical_layer(stage - 1, v);
            let b = self.practical_layer(stage - 1, z * v);
            let mut values = Vec::with_capacity(a.values.len());
            let mut diag = Vec::with_capacity(a.values.len());
            for i in 0..a.values.len() {
                let diff = (b.values[i] - a.values[i]).max(0.0);
                let value = a.values[i] - ratio.factor * diff;
                let inherited = a.diag[i].flags.merge(b.diag[i].flags).merge(ratio.flags);
                values.push(value);
                diag.push(PointDiag {
                    numerator: ratio.numerator,
                    denominator: ratio.denominator,
                    flags: Flags {
                        guard: inherited.guard,
                        negative: value < 0.0,
                        sign_clamp: inherited.sign_clamp,
                    },
                });
            }
            Rc::new(Layer { values, diag })
        };
        self.practical.insert((stage, v.to_bits()), Rc::clone(&layer));
        layer
    }

    fn check_stage(&self, stage: usize, practical: bool) -> Result<(), EstimateError> {
        if stage > 2 {
            return Err(EstimateError::Config(format!("debias stage must be 0, 1 or 2, got {stage}")));
        }
        if self.zeta.len() < stage {
            return Err(EstimateError::Config(format!(
                "stage {stage} needs {stage} zeta values, got {}",
                self.zeta.len()
            )));
        }
        if practical && self.p_scalers.len() < stage {
            return Err(EstimateError::Config(format!(
                "stage {stage} needs {stage} p scalers, got {}",
                self.p_scalers.len()
            )));
        }
        Ok(())
    }

    fn collect(&self, layer: &Layer, stage: usize, v: f64) -> Vec<SpotEstimate> {
        let truncated = self.surface.truncated_count(v);
        self.surface
            .points()
            .iter()
            .enumerate()
            .map(|(i, &tau)| {
                let d = layer.diag[i];
                SpotEstimate {
                    tau,
                    value: layer.values[i],
                    stage: stage as u8,
                    diagnostics: Diagnostics {
                        numerator: (stage > 0).then_some(d.numerator),
                        denominator: (stage > 0).then_some(d.denominator),
                        truncated,
                        flags: d.flags,
                    },
                }
            })
            .collect()
    }

    /// Pointwise recursion at every surface point.
    pub fn theoretical(&mut self, stage: usize, v: f64) -> Result<Vec<SpotEstimate>, EstimateError> {
        self.check_stage(stage, false)?;
        let layer = self.theoretical_layer(stage, v);
        Ok(self.collect(&layer, stage, v))
    }

    /// Aggregated, sign-constrained recursion at every surface point.
    pub fn practical(&mut self, stage: usize, v: f64) -> Result<Vec<SpotEstimate>, EstimateError> {
        self.check_stage(stage, true)?;
        let layer = self.practical_layer(stage, v);
        Ok(self.collect(&layer, stage, v))
    }

    /// Number of distinct stage-0 thresholds evaluated so far by the
    /// pointwise recursion.
    pub fn theoretical_base_thresholds(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .theoretical
            .keys()
            .filter(|(s, _)| *s == 0)
            .map(|(_, bits)| f64::from_bits(*bits))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

fn check_tau(path: &PathSample, tau: f64) -> Result<(), EstimateError> {
    let horizon = path.horizon();
    if !(tau > 0.0 && tau < horizon) {
        return Err(EstimateError::TauOutOfRange { tau, horizon });
    }
    Ok(())
}

/// Stage-`k` pointwise debiased estimate at `tau` with the configured rules.
pub fn spot_vol_debiased_theoretical(
    path: &PathSample,
    tau: f64,
    config: &EstimatorConfig,
    k: usize,
) -> Result<SpotEstimate, EstimateError> {
    config.validate()?;
    check_tau(path, tau)?;
    let dt = path.dt();
    let m = config.bandwidth.multiplier(dt);
    let v = threshold_v(bipower_variation(path)?, dt, &config.threshold);
    let surface = SpotSurface::new(path, &[tau], m * dt, &config.kernel)?;
    let mut engine = DebiasEngine::new(&surface, 0..0, &config.zeta, &config.p_scalers, config.sign);
    Ok(engine.theoretical(k, v)?[0])
}

/// Stage-`k` practical debiased estimate at `tau`; the aggregation grid is
/// `{i m Δ : i = 1..⌊T / (m Δ)⌋}`.
pub fn spot_vol_debiased_practical(
    path: &PathSample,
    tau: f64,
    config: &EstimatorConfig,
    k: usize,
) -> Result<SpotEstimate, EstimateError> {
    config.validate()?;
    check_tau(path, tau)?;
    let dt = path.dt();
    let m = config.bandwidth.multiplier(dt);
    let b = m * dt;
    let v = threshold_v(bipower_variation(path)?, dt, &config.threshold);
    let mut points = vec![tau];
    points.extend(aggregation_grid(path.horizon(), b));
    let surface = SpotSurface::new(path, &points, b, &config.kernel)?;
    let mut engine = DebiasEngine::new(
        &surface,
        1..points.len(),
        &config.zeta,
        &config.p_scalers,
        config.sign,
    );
    Ok(engine.practical(k, v)?[0])
}
