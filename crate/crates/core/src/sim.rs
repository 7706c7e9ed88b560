//! Sample paths of a Heston-type log-price with symmetric stable jumps.
//!
//! The variance follows a full-truncation Euler scheme, the Brownian drivers
//! of price and variance are correlated, and the jump component is a strictly
//! symmetric `Y`-stable Lévy process whose unit-time characteristic function
//! is `exp(-c^Y |u|^Y)`. An optional cap replaces each jump increment `J` by
//! `min(J, cap)`.

use std::f64::consts::FRAC_PI_2;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("stability index must lie in (0, 2), got {0}")]
    StabilityIndex(f64),
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("stable scale must be non-negative, got {0}")]
    Scale(f64),
    #[error("invalid model: {0}")]
    Model(String),
}

/// Full description of one simulated market model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub x0: f64,
    pub v0: f64,
    pub drift_b: f64,
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    pub jump_y: f64,
    pub jump_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_cap: Option<f64>,
    pub horizon_t: f64,
    pub n_steps: usize,
}

impl ModelSpec {
    /// Heston setting with strictly stable jumps of scale 1, one month as
    /// the time unit and 5-minute sampling (`n = 8580`).
    pub fn liu2018(jump_y: f64) -> Self {
        Self {
            x0: 1.0,
            v0: 0.0,
            drift_b: 1.0,
            kappa: 0.03,
            theta: 1.0,
            xi: 1.5,
            rho: 0.0,
            jump_y,
            jump_scale: 1.0,
            jump_cap: None,
            horizon_t: 1.0,
            n_steps: 8580,
        }
    }

    /// Annualised setting: 0.4 average volatility, leverage, jump increments
    /// capped at 0.005, a quarter of 5-minute bars over 6.5-hour days.
    pub fn realistic(jump_y: f64) -> Self {
        let dt = 1.0 / (252.0 * 6.5 * 12.0);
        let n_steps = 4914;
        Self {
            x0: 0.0,
            v0: 0.16,
            drift_b: 0.0,
            kappa: 5.0,
            theta: 0.16,
            xi: 0.5,
            rho: -0.5,
            jump_y,
            jump_scale: 0.5,
            jump_cap: Some(0.005),
            horizon_t: dt * n_steps as f64,
            n_steps,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon_t / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("x0", self.x0),
            ("v0", self.v0),
            ("drift_b", self.drift_b),
            ("kappa", self.kappa),
            ("theta", self.theta),
            ("xi", self.xi),
            ("rho", self.rho),
            ("jump_scale", self.jump_scale),
            ("horizon_t", self.horizon_t),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SimError::Model(format!("{name} must be finite")));
        }
        if !(self.jump_y > 0.0 && self.jump_y < 2.0) {
            return Err(SimError::StabilityIndex(self.jump_y));
        }
        if self.kappa < 0.0 || self.theta < 0.0 || self.xi < 0.0 {
            return Err(SimError::Model(
                "kappa, theta and xi must be non-negative".into(),
            ));
        }
        if self.v0 < 0.0 {
            return Err(SimError::Model("v0 must be non-negative".into()));
        }
        if self.rho.abs() > 1.0 {
            return Err(SimError::Model(format!("|rho| must be <= 1, got {}", self.rho)));
        }
        if self.jump_scale < 0.0 {
            return Err(SimError::Scale(self.jump_scale));
        }
        if let Some(cap) = self.jump_cap {
            if cap.is_nan() {
                return Err(SimError::Model("jump_cap must not be NaN".into()));
            }
        }
        if self.n_steps < 2 {
            return Err(SimError::Model(format!("n_steps must be >= 2, got {}", self.n_steps)));
        }
        if !(self.horizon_t > 0.0) {
            return Err(SimError::Model("horizon_t must be positive".into()));
        }
        if !(self.dt() > 0.0) {
            return Err(SimError::TimeStep(self.dt()));
        }
        Ok(())
    }
}

/// One simulated path on the grid `t_i = i * dt`, `i = 0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub seed: u64,
}

impl PathSample {
    /// Builds a path from observed log-prices on an even grid with step `dt`.
    /// Latent variances are unknown and set to zero.
    pub fn from_prices(x: Vec<f64>, dt: f64) -> Self {
        let times = (0..x.len()).map(|i| i as f64 * dt).collect();
        let v = vec![0.0; x.len()];
        Self { times, x, v, seed: 0 }
    }

    pub fn n_steps(&self) -> usize {
        self.x.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn dt(&self) -> f64 {
        self.horizon() / self.n_steps() as f64
    }

    /// Log-price increments `x[i] - x[i-1]`, `i = 1..=n`.
    pub fn increments(&self) -> Vec<f64> {
        self.x.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x,v")?;
        for ((t, x), v) in self.times.iter().zip(&self.x).zip(&self.v) {
            writeln!(out, "{t:e},{x:e},{v:e}")?;
        }
        Ok(())
    }

    /// Reads the `t,x,v` format written by [`PathSample::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("t,x,v") => {}
            other => {
                return Err(SimError::Model(format!(
                    "expected header `t,x,v`, found {other:?}"
                )))
            }
        }
        let (mut times, mut x, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(SimError::Model(format!("row {}: expected 3 columns", lineno + 2)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| SimError::Model(format!("row {}: {e}", lineno + 2)))
            };
            times.push(parse(cols[0])?);
            x.push(parse(cols[1])?);
            v.push(parse(cols[2])?);
        }
        if times.len() < 3 {
            return Err(SimError::Model("path needs at least 3 rows".into()));
        }
        Ok(Self { times, x, v, seed: 0 })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of path `index` under `master_seed`; independent of run order.
pub fn path_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One draw of a standard symmetric `y`-stable variable
/// (`E exp(iuS) = exp(-|u|^y)`) by the Chambers–Mallows–Stuck transform.
pub fn standard_symmetric_stable<R: Rng + ?Sized>(y: f64, rng: &mut R) -> f64 {
    let u = (rng.random::<f64>() - 0.5) * std::f64::consts::PI;
    // guard the open interval: u = ±π/2 has probability ~2^-53 but cos(u) = 0 there
    let u = u.clamp(-FRAC_PI_2 + 1e-15, FRAC_PI_2 - 1e-15);
    if (y - 1.0).abs() < 1e-12 {
        return u.tan();
    }
    let w: f64 = rng.sample(Exp1);
    let w = w.max(f64::MIN_POSITIVE);
    (y * u).sin() / u.cos().powf(1.0 / y) * ((((1.0 - y) * u).cos()) / w).powf((1.0 - y) / y)
}

/// `count` i.i.d. increments over `dt` of a symmetric strictly `y`-stable
/// Lévy process of scale `scale`.
pub fn stable_increments<R: Rng + ?Sized>(
    y: f64,
    scale: f64,
    dt: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    if !(y > 0.0 && y < 2.0) {
        return Err(SimError::StabilityIndex(y));
    }
    if !(dt > 0.0) {
        return Err(SimError::TimeStep(dt));
    }
    if !(scale >= 0.0) {
        return Err(SimError::Scale(scale));
    }
    if scale == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let factor = dt.powf(1.0 / y) * scale;
    Ok((0..count)
        .map(|_| factor * standard_symmetric_stable(y, rng))
        .collect())
}

/// Simulates one path from a fresh stream seeded with `seed`.
pub fn simulate_path(model: &ModelSpec, seed: u64) -> Result<PathSample, SimError> {
    let mut rng = rng_from_seed(seed);
    simulate_path_with(model, &mut rng, seed)
}

/// Simulates one path drawing from `rng`; `seed` is recorded on the sample.
pub fn simulate_path_with<R: Rng + ?Sized>(
    model: &ModelSpec,
    rng: &mut R,
    seed: u64,
) -> Result<PathSample, SimError> {
    model.validate()?;
    let n = model.n_steps;
    let dt = model.dt();
    let sqrt_dt = dt.sqrt();
    let rho_c = (1.0 - model.rho * model.rho).max(0.0).sqrt();
    let jump_factor = if model.jump_scale > 0.0 {
        dt.powf(1.0 / model.jump_y) * model.jump_scale
    } else {
        0.0
    };

    let mut times = Vec::with_capacity(n + 1);
    let mut x = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    times.push(0.0);
    x.push(model.x0);
    v.push(model.v0);

    let mut xi = model.x0;
    let mut vi = model.v0;
    for i in 1..=n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let dw = sqrt_dt * z1;
        let db = sqrt_dt * (model.rho * z1 + rho_c * z2);
        let mut jump = if jump_factor > 0.0 {
            jump_factor * standard_symmetric_stable(model.jump_y, rng)
        } else {
            0.0
        };
        if let Some(cap) = model.jump_cap {
            jump = jump.min(cap);
        }
        let vp = vi.max(0.0);
        let sd = vp.sqrt();
        xi += model.drift_b * dt + sd * dw + jump;
        vi = (vi + model.kappa * (model.theta - vp) * dt + model.xi * sd * db).max(0.0);
        times.push(i as f64 * dt);
        x.push(xi);
        v.push(vi);
    }
    Ok(PathSample { times, x, v, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_zero_increments() {
        let mut rng = rng_from_seed(1);
        let inc = stable_increments(1.5, 0.0, 0.1, 50, &mut rng).unwrap();
        assert!(inc.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn domain_errors() {
        let mut rng = rng_from_seed(1);
        assert_eq!(
            stable_increments(2.0, 1.0, 0.1, 1, &mut rng),
            Err(SimError::StabilityIndex(2.0))
        );
        assert_eq!(
            stable_increments(0.0, 1.0, 0.1, 1, &mut rng),
            Err(SimError::StabilityIndex(0.0))
        );
        assert_eq!(
            stable_increments(1.5, 1.0, 0.0, 1, &mut rng),
            Err(SimError::TimeStep(0.0))
        );
    }

    #[test]
    fn stable_median_near_zero() {
        let mut rng = rng_from_seed(11);
        let mut draws = stable_increments(1.5, 1.0, 1.0, 100_000, &mut rng).unwrap();
        draws.sort_by(f64::total_cmp);
        let median = 0.5 * (draws[49_999] + draws[50_000]);
        // standard error of the sample median: 1 / (2 f(0) sqrt(N)),
        // f(0) = Γ(1 + 1/y) / π for the standard symmetric stable density
        let f0 = statrs::function::gamma::gamma(1.0 + 1.0 / 1.5) / std::f64::consts::PI;
        let se = 1.0 / (2.0 * f0 * (100_000f64).sqrt());
        assert!(median.abs() < 3.0 * se, "median {median} se {se}");
    }

    #[test]
    fn pure_drift_path_is_exact() {
        let model = ModelSpec {
            x0: 0.25,
            v0: 0.0,
            drift_b: 1.3,
            kappa: 1.0,
            theta: 0.0,
            xi: 0.0,
            rho: 0.0,
            jump_y: 1.5,
            jump_scale: 0.0,
            jump_cap: None,
            horizon_t: 2.0,
            n_steps: 50,
        };
        let path = simulate_path(&model, 3).unwrap();
        for (t, x) in path.times.iter().zip(&path.x) {
            let expected = 0.25 + 1.3 * t;
            assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
        }
        assert!(path.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_variance_follows_ode_recursion() {
        let model = ModelSpec {
            x0: 0.0,
            v0: 0.1,
            drift_b: 0.0,
            kappa: 2.0,
            theta: 0.5,
            xi: 0.0,
            rho: 0.3,
            jump_y: 1.2,
            jump_scale: 0.0,
            jump_cap: None,
            horizon_t: 3.0,
            n_steps: 300,
        };
        let path = simulate_path(&model, 9).unwrap();
        let dt = model.dt();
        let mut v = 0.1;
        for i in 1..=300 {
            v += 2.0 * (0.5 - v) * dt;
            assert!((path.v[i] - v).abs() < 1e-14);
        }
        assert!((path.v[300] - 0.5).abs() < 0.01);
    }

    #[test]
    fn grid_and_lengths() {
        let model = ModelSpec::realistic(1.6);
        let path = simulate_path(&model, 5).unwrap();
        assert_eq!(path.times.len(), 4915);
        assert_eq!(path.x.len(), 4915);
        assert_eq!(path.v.len(), 4915);
        let dt = model.dt();
        for (i, t) in path.times.iter().enumerate() {
            assert_eq!(*t, i as f64 * dt);
        }
        assert!(path.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identical_seed_identical_path() {
        let model = ModelSpec::liu2018(1.2);
        let a = simulate_path(&model, 77).unwrap();
        let b = simulate_path(&model, 77).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&model, 78).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn validation_rejects_bad_models() {
        let mut m = ModelSpec::liu2018(1.5);
        m.rho = 1.5;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::liu2018(1.5);
        m.n_steps = 1;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::liu2018(2.5);
        m.jump_y = 2.5;
        assert_eq!(m.validate(), Err(SimError::StabilityIndex(2.5)));
    }

    #[test]
    fn csv_round_trip() {
        let mut m = ModelSpec::liu2018(1.5);
        m.n_steps = 10;
        let path = simulate_path(&m, 2).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,v\n"));
        let back = PathSample::read_csv(&text).unwrap();
        assert_eq!(back.x, path.x);
        assert_eq!(back.v, path.v);
    }

    #[test]
    fn path_seeds_differ_by_index() {
        let a = path_seed(7, 0);
        let b = path_seed(7, 1);
        let c = path_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, path_seed(7, 0));
    }
}
