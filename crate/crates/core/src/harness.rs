//! Monte Carlo experiments: path replication, estimator evaluation on a
//! fixed grid of evaluation times, error aggregation, tuning search and
//! report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{
    aggregation_grid, bipower_variation, cf_tuning_values, threshold_v, BandwidthRule, CfSurface,
    CfTuning, DebiasEngine, EstimateError, EstimatorConfig, Flags, SpotSurface, ThresholdRule,
};
use crate::kernels::Kernel;
use crate::sim::{path_seed, simulate_path, ModelSpec, PathSample, SimError};
use crate::theory::regime_notes;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("evaluation grid needs a path of at least 100 steps, got {0}")]
    TauGrid(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),
    #[error("unknown preset `{0}` (expected liu2018 or realistic)")]
    UnknownPreset(String),
}

pub const DEFAULT_EPS_TRUTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Truncated kernel estimator.
    Truncated,
    /// Time-aggregated, sign-constrained debiasing of `stage` steps.
    Practical,
    /// Pointwise debiasing recursion of `stage` steps.
    Pointwise,
    /// Characteristic-function estimator.
    Cf,
    /// Characteristic-function estimator with aggregated bias correction.
    CfDebiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub name: String,
    pub kind: EstimatorKind,
    #[serde(default)]
    pub stage: u8,
    #[serde(default)]
    pub config: EstimatorConfig,
}

impl EstimatorSpec {
    pub fn new(name: &str, kind: EstimatorKind, stage: u8, config: EstimatorConfig) -> Self {
        Self {
            name: name.to_string(),
            kind,
            stage,
            config,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.config.validate()?;
        let stage = self.stage as usize;
        match self.kind {
            EstimatorKind::Practical | EstimatorKind::Pointwise => {
                if stage > 2 {
                    return Err(HarnessError::Config(format!(
                        "{}: stage must be 0, 1 or 2, got {stage}",
                        self.name
                    )));
                }
                if self.config.zeta.len() < stage {
                    return Err(HarnessError::Config(format!(
                        "{}: stage {stage} needs {stage} zeta values",
                        self.name
                    )));
                }
                if self.kind == EstimatorKind::Practical && self.config.p_scalers.len() < stage {
                    return Err(HarnessError::Config(format!(
                        "{}: stage {stage} needs {stage} p scalers",
                        self.name
                    )));
                }
            }
            _ if stage != 0 => {
                return Err(HarnessError::Config(format!(
                    "{}: stage only applies to debiased estimators",
                    self.name
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Tuning actually used by this estimator.
    pub fn tuning(&self) -> Tuning {
        let k = self.stage as usize;
        match self.kind {
            EstimatorKind::Practical => Tuning {
                zeta: self.config.zeta[..k.min(self.config.zeta.len())].to_vec(),
                p: self.config.p_scalers[..k.min(self.config.p_scalers.len())].to_vec(),
            },
            EstimatorKind::Pointwise => Tuning {
                zeta: self.config.zeta[..k.min(self.config.zeta.len())].to_vec(),
                p: Vec::new(),
            },
            EstimatorKind::CfDebiased => Tuning {
                zeta: vec![self.config.cf.lambda],
                p: vec![self.config.cf.p],
            },
            _ => Tuning::default(),
        }
    }

    /// Copy with `tuning` applied.
    pub fn with_tuning(&self, tuning: &Tuning) -> Self {
        let mut out = self.clone();
        match self.kind {
            EstimatorKind::CfDebiased => {
                if let Some(&l) = tuning.zeta.first() {
                    out.config.cf.lambda = l;
                }
                if let Some(&p) = tuning.p.first() {
                    out.config.cf.p = p;
                }
            }
            EstimatorKind::Practical | EstimatorKind::Pointwise => {
                out.config.zeta = tuning.zeta.clone();
                if self.kind == EstimatorKind::Practical {
                    out.config.p_scalers = tuning.p.clone();
                }
            }
            _ => {}
        }
        out
    }

    fn tuning_label(&self) -> String {
        self.tuning().label(self.kind)
    }
}

/// Debias tuning. For the characteristic-function estimator `zeta` holds
/// `lambda` and `p` the frequency scaler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub zeta: Vec<f64>,
    pub p: Vec<f64>,
}

impl Tuning {
    pub fn label(&self, kind: EstimatorKind) -> String {
        let list = |v: &[f64]| {
            let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            if parts.len() == 1 {
                parts[0].clone()
            } else {
                format!("({})", parts.join(", "))
            }
        };
        match kind {
            EstimatorKind::CfDebiased => format!("lambda = {}, p = {}", list(&self.zeta), list(&self.p)),
            EstimatorKind::Practical if !self.zeta.is_empty() => {
                format!("zeta = {}, p = {}", list(&self.zeta), list(&self.p))
            }
            EstimatorKind::Pointwise if !self.zeta.is_empty() => format!("zeta = {}", list(&self.zeta)),
            _ => "-".to_string(),
        }
    }
}

/// Evaluation indices `l_i = i ⌊n / parts⌋` for `i = first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauGridRule {
    pub first: usize,
    pub last: usize,
    pub parts: usize,
}

impl Default for TauGridRule {
    fn default() -> Self {
        Self {
            first: 10,
            last: 90,
            parts: 100,
        }
    }
}

impl TauGridRule {
    pub fn indices(&self, n: usize) -> Result<Vec<usize>, HarnessError> {
        if self.parts == 0 || n < self.parts {
            return Err(HarnessError::TauGrid(n));
        }
        if !(self.first >= 1 && self.first <= self.last && self.last < self.parts) {
            return Err(HarnessError::Config(format!(
                "tau grid needs 1 <= first <= last < parts, got {}..{} of {}",
                self.first, self.last, self.parts
            )));
        }
        let step = n / self.parts;
        Ok((self.first..=self.last).map(|i| i * step).collect())
    }
}

/// `l_i = i ⌊n/100⌋`, `i = 10..=90`.
pub fn tau_grid(n: usize) -> Result<Vec<usize>, HarnessError> {
    TauGridRule::default().indices(n)
}

fn default_eps() -> f64 {
    DEFAULT_EPS_TRUTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub estimators: Vec<EstimatorSpec>,
    pub n_paths: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub tau_grid: TauGridRule,
    #[serde(default = "default_eps")]
    pub eps_truth: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        if self.n_paths == 0 {
            return Err(HarnessError::Config("need at least one path".into()));
        }
        if self.estimators.is_empty() {
            return Err(HarnessError::Config("no estimators configured".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.estimators {
            if !seen.insert(e.name.as_str()) {
                return Err(HarnessError::Config(format!("duplicate estimator name `{}`", e.name)));
            }
            e.validate()?;
        }
        let idx = self.tau_grid.indices(self.model.n_steps)?;
        if idx.iter().any(|&i| i == 0 || i >= self.model.n_steps) {
            return Err(HarnessError::Config("tau grid indices must lie strictly inside (0, n)".into()));
        }
        if !(self.eps_truth >= 0.0) {
            return Err(HarnessError::Config("eps_truth must be non-negative".into()));
        }
        Ok(())
    }

    pub fn estimator(&self, name: &str) -> Result<&EstimatorSpec, HarnessError> {
        self.estimators
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| HarnessError::UnknownEstimator(name.to_string()))
    }
}

/// Number of evaluation points flagged, summed over paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagTally {
    pub guard: usize,
    pub negative: usize,
    pub sign_clamp: usize,
}

impl FlagTally {
    fn add(&mut self, f: Flags) {
        self.guard += f.guard as usize;
        self.negative += f.negative as usize;
        self.sign_clamp += f.sign_clamp as usize;
    }

    fn merge(&mut self, o: FlagTally) {
        self.guard += o.guard;
        self.negative += o.negative;
        self.sign_clamp += o.sign_clamp;
    }
}

/// Pathwise errors and their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub are: f64,
    pub re: f64,
    pub mse_paths: Vec<f64>,
    pub ae_paths: Vec<f64>,
    pub e_paths: Vec<f64>,
    /// Evaluation points left out of the relative errors because the truth
    /// was below the floor.
    pub excluded_truths: usize,
}

/// Pathwise `MSE_j`, `AE_j`, `E_j` and `RMSE = sqrt(mean MSE_j)`,
/// `ARE = mean AE_j`, `RE = mean E_j`. Points with truth below `eps_truth`
/// are left out of `AE_j` and `E_j`; a path with no usable point has `NaN`
/// relative errors and is skipped by the means.
pub fn compute_metrics(
    estimates: &[Vec<f64>],
    truths: &[Vec<f64>],
    eps_truth: f64,
) -> Result<Metrics, HarnessError> {
    if estimates.len() != truths.len() {
        return Err(HarnessError::Shape(format!(
            "{} estimate paths vs {} truth paths",
            estimates.len(),
            truths.len()
        )));
    }
    let mut mse_paths = Vec::with_capacity(estimates.len());
    let mut ae_paths = Vec::with_capacity(estimates.len());
    let mut e_paths = Vec::with_capacity(estimates.len());
    let mut excluded = 0;
    for (j, (est, tru)) in estimates.iter().zip(truths).enumerate() {
        if est.len() != tru.len() || est.is_empty() {
            return Err(HarnessError::Shape(format!(
                "path {j}: {} estimates vs {} truths",
                est.len(),
                tru.len()
            )));
        }
        let k = est.len() as f64;
        let mse = est.iter().zip(tru).map(|(e, c)| (e - c) * (e - c)).sum::<f64>() / k;
        let (mut ae, mut e, mut used) = (0.0, 0.0, 0usize);
        for (x, c) in est.iter().zip(tru) {
            if *c < eps_truth {
                excluded += 1;
                continue;
            }
            ae += (x - c).abs() / c;
            e += (x - c) / c;
            used += 1;
        }
        mse_paths.push(mse);
        if used == 0 {
            ae_paths.push(f64::NAN);
            e_paths.push(f64::NAN);
        } else {
            ae_paths.push(ae / used as f64);
            e_paths.push(e / used as f64);
        }
    }
    let mean = |v: &[f64]| {
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    };
    let rmse = if mse_paths.is_empty() {
        f64::NAN
    } else {
        (mse_paths.iter().sum::<f64>() / mse_paths.len() as f64).sqrt()
    };
    Ok(Metrics {
        rmse,
        are: mean(&ae_paths),
        re: mean(&e_paths),
        mse_paths,
        ae_paths,
        e_paths,
        excluded_truths: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub name: String,
    pub kind: EstimatorKind,
    pub stage: u8,
    pub tuning: String,
    pub rmse: f64,
    pub are: f64,
    pub re: f64,
    pub paths_used: usize,
    pub failures: usize,
    /// First error message per distinct failure, with its count.
    pub failure_reasons: BTreeMap<String, usize>,
    pub flags: FlagTally,
    pub excluded_truths: usize,
    pub mse_paths: Vec<f64>,
    pub ae_paths: Vec<f64>,
    pub e_paths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
    pub estimators: Vec<EstimatorReport>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const SUMMARY_CSV_HEADER: &str = "Estimator,RMSE,ARE,RE,Tuning";

/// `x` rounded to five significant digits.
pub fn format_sig5(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = 4 - exp;
    if (0..=12).contains(&decimals) {
        format!("{:.*}", decimals as usize, x)
    } else {
        format!("{x:.4e}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ExperimentReport {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary table, one row per estimator.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_CSV_HEADER);
        out.push('\n');
        for e in &self.estimators {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&e.name),
                format_sig5(e.rmse),
                format_sig5(e.are),
                format_sig5(e.re),
                csv_field(&e.tuning)
            );
        }
        out
    }
}

/// Per-path cache of the quantities shared between estimators.
struct PathContext<'a> {
    path: &'a PathSample,
    taus: Vec<f64>,
    bv: Option<Result<f64, EstimateError>>,
    surfaces: Vec<(String, u64, SpotSurface)>,
    cf_surfaces: Vec<(String, u64, u64, CfSurface)>,
}

impl<'a> PathContext<'a> {
    fn new(path: &'a PathSample, indices: &[usize]) -> Self {
        Self {
            path,
            taus: indices.iter().map(|&i| path.times[i]).collect(),
            bv: None,
            surfaces: Vec::new(),
            cf_surfaces: Vec::new(),
        }
    }

    fn bv(&mut self) -> Result<f64, EstimateError> {
        if self.bv.is_none() {
            self.bv = Some(bipower_variation(self.path));
        }
        self.bv.clone().expect("set above")
    }

    fn surface(&mut self, kernel: &Kernel, bandwidth: f64) -> Result<usize, EstimateError> {
        let key = (kernel.name().to_string(), bandwidth.to_bits());
        if let Some(i) = self.surfaces.iter().position(|(k, b, _)| *k == key.0 && *b == key.1) {
            return Ok(i);
        }
        let mut points = self.taus.clone();
        points.extend(aggregation_grid(self.path.horizon(), bandwidth));
        let s = SpotSurface::new(self.path, &points, bandwidth, kernel)?;
        self.surfaces.push((key.0, key.1, s));
        Ok(self.surfaces.len() - 1)
    }

    fn cf_surface(&mut self, kernel: &Kernel, h: f64, agg_b: f64) -> Result<usize, EstimateError> {
        let name = kernel.name().to_string();
        let (hb, ab) = (h.to_bits(), agg_b.to_bits());
        if let Some(i) = self
            .cf_surfaces
            .iter()
            .position(|(k, x, y, _)| *k == name && *x == hb && *y == ab)
        {
            return Ok(i);
        }
        let mut points = self.taus.clone();
        points.extend(crate::estimate::cf_aggregation_grid(self.path.horizon(), agg_b));
        let s = CfSurface::new(self.path, &points, h, kernel)?;
        self.cf_surfaces.push((name, hb, ab, s));
        Ok(self.cf_surfaces.len() - 1)
    }
}

/// Values and flag tally of one estimator at the context's evaluation times.
fn evaluate(ctx: &mut PathContext<'_>, spec: &EstimatorSpec) -> Result<(Vec<f64>, FlagTally), EstimateError> {
    let cfg = &spec.config;
    let dt = ctx.path.dt();
    let n_tau = ctx.taus.len();
    let mut tally = FlagTally::default();
    match spec.kind {
        EstimatorKind::Truncated | EstimatorKind::Practical | EstimatorKind::Pointwise => {
            let v = threshold_v(ctx.bv()?, dt, &cfg.threshold);
            let b = cfg.bandwidth.multiplier(dt) * dt;
            let si = ctx.surface(&cfg.kernel, b)?;
            let surface = &ctx.surfaces[si].2;
            let mut engine =
                DebiasEngine::new(surface, n_tau..surface.len(), &cfg.zeta, &cfg.p_scalers, cfg.sign);
            let est = match spec.kind {
                EstimatorKind::Truncated => engine.practical(0, v)?,
                EstimatorKind::Practical => engine.practical(spec.stage as usize, v)?,
                _ => engine.theoretical(spec.stage as usize, v)?,
            };
            let values = est[..n_tau]
                .iter()
                .map(|e| {
                    tally.add(e.diagnostics.flags);
                    e.value
                })
                .collect();
            Ok((values, tally))
        }
        EstimatorKind::Cf | EstimatorKind::CfDebiased => {
            let (u, h) = cf_tuning_values(ctx.path, cfg)?;
            let agg_b = cfg.bandwidth.multiplier(dt) * dt;
            let si = ctx.cf_surface(&cfg.kernel, h, agg_b)?;
            let surface = &ctx.cf_surfaces[si].3;
            let values = if spec.kind == EstimatorKind::Cf {
                (0..n_tau)
                    .map(|i| {
                        let x = surface.spot_vol(i, u);
                        tally.add(Flags {
                            negative: x < 0.0,
                            ..Flags::default()
                        });
                        x
                    })
                    .collect()
            } else {
                let taus: Vec<usize> = (0..n_tau).collect();
                let agg: Vec<usize> = (n_tau..surface.points().len()).collect();
                surface
                    .debiased_many(&taus, &agg, u, cfg.cf.lambda, cfg.cf.p)
                    .into_iter()
                    .map(|(x, f)| {
                        tally.add(f);
                        x
                    })
                    .collect()
            };
            Ok((values, tally))
        }
    }
}

type EstimatorOutcome = Result<(Vec<f64>, FlagTally), String>;

struct PathOutcome {
    truths: Vec<f64>,
    per_estimator: Vec<EstimatorOutcome>,
}

fn run_path(
    model: &ModelSpec,
    estimators: &[EstimatorSpec],
    indices: &[usize],
    seed: u64,
) -> Result<PathOutcome, SimError> {
    let path = simulate_path(model, seed)?;
    let mut ctx = PathContext::new(&path, indices);
    let per_estimator = estimators
        .iter()
        .map(|spec| evaluate(&mut ctx, spec).map_err(|e| e.to_string()))
        .collect();
    Ok(PathOutcome {
        truths: indices.iter().map(|&i| path.v[i]).collect(),
        per_estimator,
    })
}

/// Every estimator of `estimators` at the grid points `indices` of an
/// observed path, with intermediate surfaces shared across estimators.
pub fn evaluate_path(
    path: &PathSample,
    estimators: &[EstimatorSpec],
    indices: &[usize],
) -> Vec<Result<(Vec<f64>, FlagTally), EstimateError>> {
    let mut ctx = PathContext::new(path, indices);
    estimators.iter().map(|spec| evaluate(&mut ctx, spec)).collect()
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Simulates `n_paths` paths (path `j` seeded by `path_seed(master_seed, j)`)
/// on `workers` threads and aggregates every estimator's errors. The report
/// does not depend on `workers`.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let indices = config.tau_grid.indices(config.model.n_steps)?;
    let outcomes: Vec<Result<PathOutcome, SimError>> = with_pool(workers, || {
        (0..config.n_paths)
            .into_par_iter()
            .map(|j| {
                run_path(
                    &config.model,
                    &config.estimators,
                    &indices,
                    path_seed(config.master_seed, j as u64),
                )
            })
            .collect()
    })?;
    let outcomes: Vec<PathOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    let mut estimators = Vec::with_capacity(config.estimators.len());
    for (k, spec) in config.estimators.iter().enumerate() {
        let mut est = Vec::new();
        let mut tru = Vec::new();
        let mut flags = FlagTally::default();
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        let mut failures = 0;
        for o in &outcomes {
            match &o.per_estimator[k] {
                Ok((values, tally)) => {
                    est.push(values.clone());
                    tru.push(o.truths.clone());
                    flags.merge(*tally);
                }
                Err(msg) => {
                    failures += 1;
                    *reasons.entry(msg.clone()).or_default() += 1;
                }
            }
        }
        let m = compute_metrics(&est, &tru, config.eps_truth)?;
        estimators.push(EstimatorReport {
            name: spec.name.clone(),
            kind: spec.kind,
            stage: spec.stage,
            tuning: spec.tuning_label(),
            rmse: m.rmse,
            are: m.are,
            re: m.re,
            paths_used: est.len(),
            failures,
            failure_reasons: reasons,
            flags,
            excluded_truths: m.excluded_truths,
            mse_paths: m.mse_paths,
            ae_paths: m.ae_paths,
            e_paths: m.e_paths,
        });
    }
    Ok(ExperimentReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.master_seed,
        config: config.clone(),
        notes: regime_notes(config.model.jump_y),
        estimators,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Candidate values for the tuning search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub zeta: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e6).round() / 1e6).collect()
}

impl TuningGrid {
    /// `zeta, lambda ∈ {1.1, 1.15, ..., 1.9}`, `p ∈ {0.1, 0.15, ..., 0.9}`.
    pub fn standard() -> Self {
        Self {
            zeta: steps(1.1, 1.9, 0.05),
            p: steps(0.1, 0.9, 0.05),
            lambda: steps(1.1, 1.9, 0.05),
        }
    }

    /// Every tuning of `spec` the grid spans.
    pub fn candidates(&self, spec: &EstimatorSpec) -> Vec<Tuning> {
        let k = spec.stage as usize;
        match spec.kind {
            EstimatorKind::CfDebiased => {
                let mut out = Vec::new();
                for &l in &self.lambda {
                    for &p in &self.p {
                        out.push(Tuning {
                            zeta: vec![l],
                            p: vec![p],
                        });
                    }
                }
                out
            }
            EstimatorKind::Practical | EstimatorKind::Pointwise if k > 0 => {
                let zetas = product(&self.zeta, k);
                let ps = if spec.kind == EstimatorKind::Practical {
                    product(&self.p, k)
                } else {
                    vec![Vec::new()]
                };
                let mut out = Vec::with_capacity(zetas.len() * ps.len());
                for z in &zetas {
                    for p in &ps {
                        out.push(Tuning {
                            zeta: z.clone(),
                            p: p.clone(),
                        });
                    }
                }
                out
            }
            _ => vec![spec.tuning()],
        }
    }
}

fn product(values: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub tuning: Tuning,
    pub rmse: f64,
    /// Paths on which every evaluation point hit the debias guard.
    pub guarded_paths: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub estimator: String,
    pub best: Tuning,
    pub best_rmse: f64,
    pub pilot_paths: usize,
    pub independent_pilot: bool,
    pub surface: Vec<GridPoint>,
}

struct CandidateScore {
    mse: f64,
    guarded: bool,
    failed: bool,
}

fn score(
    ctx: &mut PathContext<'_>,
    spec: &EstimatorSpec,
    truths: &[f64],
) -> CandidateScore {
    match evaluate(ctx, spec) {
        Ok((values, tally)) => {
            let k = values.len() as f64;
            let mse = values.iter().zip(truths).map(|(e, c)| (e - c) * (e - c)).sum::<f64>() / k;
            CandidateScore {
                mse,
                guarded: tally.guard == values.len(),
                failed: false,
            }
        }
        Err(_) => CandidateScore {
            mse: f64::NAN,
            guarded: false,
            failed: true,
        },
    }
}

/// Exhaustive RMSE minimisation of one estimator's tuning over `grid`.
///
/// By default every candidate is scored on the same `pilot_m` paths; with
/// `independent_pilot` each candidate draws its own paths. Candidates that
/// hit the debias guard on every pilot path rank after all others.
pub fn grid_search(
    config: &ExperimentConfig,
    estimator: &str,
    grid: &TuningGrid,
    pilot_m: usize,
    independent_pilot: bool,
    workers: usize,
) -> Result<GridSearchResult, HarnessError> {
    config.validate()?;
    if pilot_m == 0 {
        return Err(HarnessError::Config("pilot_m must be positive".into()));
    }
    let base = config.estimator(estimator)?.clone();
    let candidates = grid.candidates(&base);
    if candidates.is_empty() {
        return Err(HarnessError::Config("tuning grid is empty".into()));
    }
    let specs: Vec<EstimatorSpec> = candidates.iter().map(|t| base.with_tuning(t)).collect();
    for s in &specs {
        s.validate()?;
    }
    let indices = config.tau_grid.indices(config.model.n_steps)?;
    let model = &config.model;
    let seed = config.master_seed;

    // scores[path][candidate]
    let scores: Vec<Vec<CandidateScore>> = with_pool(workers, || {
        (0..pilot_m)
            .into_par_iter()
            .map(|j| -> Result<Vec<CandidateScore>, SimError> {
                if independent_pilot {
                    specs
                        .iter()
                        .enumerate()
                        .map(|(c, spec)| {
                            let s = path_seed(path_seed(seed, c as u64 + 1), j as u64);
                            let path = simulate_path(model, s)?;
                            let truths: Vec<f64> = indices.iter().map(|&i| path.v[i]).collect();
                            let mut ctx = PathContext::new(&path, &indices);
                            Ok(score(&mut ctx, spec, &truths))
                        })
                        .collect()
                } else {
                    let path = simulate_path(model, path_seed(seed, j as u64))?;
                    let truths: Vec<f64> = indices.iter().map(|&i| path.v[i]).collect();
                    let mut ctx = PathContext::new(&path, &indices);
                    Ok(specs.iter().map(|spec| score(&mut ctx, spec, &truths)).collect())
                }
            })
            .collect::<Result<Vec<_>, _>>()
    })??;

    let mut surface = Vec::with_capacity(candidates.len());
    for (c, tuning) in candidates.iter().enumerate() {
        let (mut sum, mut used, mut guarded, mut failures) = (0.0, 0usize, 0usize, 0usize);
        for row in &scores {
            let s = &row[c];
            if s.failed {
                failures += 1;
                continue;
            }
            sum += s.mse;
            used += 1;
            guarded += s.guarded as usize;
        }
        let rmse = if used == 0 { f64::NAN } else { (sum / used as f64).sqrt() };
        surface.push(GridPoint {
            tuning: tuning.clone(),
            rmse,
            guarded_paths: guarded,
            failures,
        });
    }
    let rank = |g: &GridPoint| {
        let all_guarded = g.guarded_paths > 0 && g.guarded_paths + g.failures == pilot_m;
        (all_guarded || !g.rmse.is_finite(), if g.rmse.is_finite() { g.rmse } else { f64::INFINITY })
    };
    let best = surface
        .iter()
        .min_by(|a, b| {
            let (ga, ra) = rank(a);
            let (gb, rb) = rank(b);
            ga.cmp(&gb).then(ra.total_cmp(&rb))
        })
        .expect("non-empty grid")
        .clone();
    Ok(GridSearchResult {
        estimator: estimator.to_string(),
        best: best.tuning,
        best_rmse: best.rmse,
        pilot_paths: pilot_m,
        independent_pilot,
        surface,
    })
}

/// Per-cell tunings found by the reference grid search.
#[derive(Debug, Clone, Copy)]
struct CellTuning {
    cf: (f64, f64),
    exp1: (f64, f64),
    exp2: ([f64; 2], [f64; 2]),
    unif1: (f64, f64),
    unif2: ([f64; 2], [f64; 2]),
}

fn liu2018_tuning(y: f64, n_steps: usize) -> CellTuning {
    let five_minute = [
        (0.8, CellTuning {
            cf: (1.6, 0.9),
            exp1: (1.8, 0.6),
            exp2: ([1.7, 1.8], [0.5, 0.85]),
            unif1: (1.85, 0.85),
            unif2: ([1.6, 1.9], [0.5, 0.9]),
        }),
        (1.2, CellTuning {
            cf: (1.25, 0.2),
            exp1: (1.7, 0.85),
            exp2: ([1.9, 1.25], [0.5, 0.65]),
            unif1: (1.65, 0.8),
            unif2: ([1.9, 1.25], [0.6, 0.15]),
        }),
        (1.6, CellTuning {
            cf: (1.9, 0.1),
            exp1: (1.75, 0.75),
            exp2: ([1.9, 1.75], [0.7, 0.25]),
            unif1: (1.9, 0.65),
            unif2: ([1.9, 1.9], [0.6, 0.15]),
        }),
        (1.75, CellTuning {
            cf: (1.9, 0.25),
            exp1: (1.65, 0.1),
            exp2: ([1.8, 1.55], [0.2, 0.35]),
            unif1: (1.8, 0.1),
            unif2: ([1.9, 1.9], [0.1, 0.2]),
        }),
    ];
    let one_minute = [
        (0.8, CellTuning {
            cf: (1.85, 0.8),
            exp1: (1.55, 0.9),
            exp2: ([1.7, 1.9], [0.5, 0.75]),
            unif1: (1.65, 0.8),
            unif2: ([1.7, 1.9], [0.5, 0.75]),
        }),
        (1.2, CellTuning {
            cf: (1.85, 0.9),
            exp1: (1.7, 0.8),
            exp2: ([1.9, 1.25], [0.6, 0.5]),
            unif1: (1.65, 0.75),
            unif2: ([1.9, 1.75], [0.4, 0.8]),
        }),
        (1.6, CellTuning {
            cf: (1.85, 0.1),
            exp1: (1.9, 0.1),
            exp2: ([1.9, 1.65], [0.1, 0.3]),
            unif1: (1.7, 0.1),
            unif2: ([1.9, 1.65], [0.1, 0.3]),
        }),
        (1.75, CellTuning {
            cf: (1.85, 0.55),
            exp1: (1.75, 0.25),
            exp2: ([1.4, 1.9], [0.3, 0.2]),
            unif1: (1.4, 0.2),
            unif2: ([1.5, 1.85], [0.2, 0.2]),
        }),
    ];
    let table = if n_steps >= 20_000 { &one_minute } else { &five_minute };
    nearest(table, y)
}

fn nearest<T: Copy>(table: &[(f64, T)], y: f64) -> T {
    table
        .iter()
        .min_by(|a, b| (a.0 - y).abs().total_cmp(&(b.0 - y).abs()))
        .expect("non-empty table")
        .1
}

fn cf_config(lambda: f64, p: f64) -> EstimatorConfig {
    EstimatorConfig {
        kernel: Kernel::quartic_k3(),
        cf: CfTuning {
            lambda,
            p,
            ..CfTuning::default()
        },
        ..EstimatorConfig::default()
    }
}

fn truncated_family(
    out: &mut Vec<EstimatorSpec>,
    suffix: &str,
    base: EstimatorConfig,
    one: (f64, f64),
    two: ([f64; 2], [f64; 2]),
) {
    out.push(EstimatorSpec::new(
        &format!("truncated_{suffix}"),
        EstimatorKind::Truncated,
        0,
        base.clone(),
    ));
    out.push(EstimatorSpec::new(
        &format!("debiased1_{suffix}"),
        EstimatorKind::Practical,
        1,
        base.clone().with_debias(&[one.0], &[one.1]),
    ));
    out.push(EstimatorSpec::new(
        &format!("debiased2_{suffix}"),
        EstimatorKind::Practical,
        2,
        base.with_debias(&two.0, &two.1),
    ));
}

/// Stable-jump Heston experiment with the reference tunings for the
/// nearest tabulated `y` (five-minute table for `n < 20000`, one-minute
/// table otherwise).
pub fn liu2018_experiment(y: f64, n_steps: usize, n_paths: usize, seed: u64) -> ExperimentConfig {
    let mut model = ModelSpec::liu2018(y);
    model.n_steps = n_steps;
    let t = liu2018_tuning(y, n_steps);
    let mut estimators = vec![
        EstimatorSpec::new("cf", EstimatorKind::Cf, 0, cf_config(t.cf.0, t.cf.1)),
        EstimatorSpec::new("cf_debiased", EstimatorKind::CfDebiased, 0, cf_config(t.cf.0, t.cf.1)),
    ];
    truncated_family(&mut estimators, "exp", EstimatorConfig::with_kernel(Kernel::exponential()), t.exp1, t.exp2);
    truncated_family(&mut estimators, "unif", EstimatorConfig::with_kernel(Kernel::uniform2()), t.unif1, t.unif2);
    ExperimentConfig {
        model,
        estimators,
        n_paths,
        master_seed: seed,
        tau_grid: TauGridRule::default(),
        eps_truth: DEFAULT_EPS_TRUTH,
    }
}

type RealisticCell = ((f64, f64), ([f64; 2], [f64; 2]));

fn realistic_tuning(y: f64, v0_exponent: u32) -> (RealisticCell, (f64, f64)) {
    let y16: [(f64, RealisticCell); 4] = [
        (19.0, ((1.4, 0.2), ([1.4, 1.9], [0.3, 0.2]))),
        (20.0, ((1.9, 0.9), ([1.9, 1.7], [0.8, 0.2]))),
        (21.0, ((1.7, 0.9), ([1.5, 1.2], [0.9, 0.4]))),
        (22.0, ((1.8, 0.8), ([1.8, 1.9], [0.7, 0.9]))),
    ];
    let y175: [(f64, RealisticCell); 4] = [
        (19.0, ((1.5, 0.3), ([1.5, 1.9], [0.3, 0.2]))),
        (20.0, ((1.7, 0.3), ([1.7, 1.9], [0.2, 0.2]))),
        (21.0, ((1.6, 0.9), ([1.7, 1.9], [0.8, 0.2]))),
        (22.0, ((1.8, 0.8), ([1.9, 1.2], [0.9, 0.6]))),
    ];
    if (y - 1.6).abs() <= (y - 1.75).abs() {
        (nearest(&y16, v0_exponent as f64), (1.9, 0.35))
    } else {
        (nearest(&y175, v0_exponent as f64), (1.9, 0.1))
    }
}

/// Realistic-parameter experiment with threshold `v = sqrt(BV) Δ^{k/48}`
/// and exponential-kernel estimators.
pub fn realistic_experiment(y: f64, v0_exponent: u32, n_paths: usize, seed: u64) -> ExperimentConfig {
    let model = ModelSpec::realistic(y);
    let dt = model.dt();
    let ((one, two), cf) = realistic_tuning(y, v0_exponent);
    let base = EstimatorConfig {
        kernel: Kernel::exponential(),
        threshold: ThresholdRule::Scaled {
            v0: dt.powf(v0_exponent as f64 / 48.0),
        },
        bandwidth: BandwidthRule::default(),
        ..EstimatorConfig::default()
    };
    let mut estimators = vec![
        EstimatorSpec::new("cf", EstimatorKind::Cf, 0, cf_config(cf.0, cf.1)),
        EstimatorSpec::new("cf_debiased", EstimatorKind::CfDebiased, 0, cf_config(cf.0, cf.1)),
    ];
    truncated_family(&mut estimators, "exp", base, one, two);
    ExperimentConfig {
        model,
        estimators,
        n_paths,
        master_seed: seed,
        tau_grid: TauGridRule::default(),
        eps_truth: DEFAULT_EPS_TRUTH,
    }
}

pub const PRESETS: [&str; 2] = ["liu2018", "realistic"];

/// Named preset at activity index `y` with its default sampling settings.
pub fn preset_experiment(name: &str, y: f64, n_paths: usize, seed: u64) -> Result<ExperimentConfig, HarnessError> {
    match name {
        "liu2018" => Ok(liu2018_experiment(y, 8580, n_paths, seed)),
        "realistic" => Ok(realistic_experiment(y, 20, n_paths, seed)),
        other => Err(HarnessError::UnknownPreset(other.to_string())),
    }
}
