//! Smoothing kernels and the functionals entering the limit variances.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::quad::{integrate, QuadError, QuadOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("unknown kernel `{0}` (expected exponential, uniform2 or quartic_k3)")]
    UnknownName(String),
    #[error("invalid kernel table: {0}")]
    Table(String),
}

/// Where the kernel can be non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Support {
    Bounded { lo: f64, hi: f64 },
    Unbounded,
}

type KernelFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Shape {
    Exponential,
    Uniform,
    Quartic,
    Tabulated { xs: Vec<f64>, ks: Vec<f64> },
    Function(KernelFn),
}

/// A kernel `K` together with its support and known non-smooth points.
#[derive(Clone)]
pub struct Kernel {
    name: String,
    shape: Shape,
    support: Support,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("name", &self.name)
            .field("support", &self.support)
            .finish()
    }
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl Kernel {
    /// `K(x) = exp(-|x|) / 2`.
    pub fn exponential() -> Self {
        Self {
            name: "exponential".into(),
            shape: Shape::Exponential,
            support: Support::Unbounded,
            breakpoints: vec![0.0],
        }
    }

    /// Two-sided uniform `K(x) = 1{|x| <= 1} / 2`.
    pub fn uniform2() -> Self {
        Self {
            name: "uniform2".into(),
            shape: Shape::Uniform,
            support: Support::Bounded { lo: -1.0, hi: 1.0 },
            breakpoints: vec![-1.0, 1.0],
        }
    }

    /// Quartic (biweight) `K(x) = 15/16 (1 - x^2)^2 1{|x| <= 1}`.
    pub fn quartic_k3() -> Self {
        Self {
            name: "quartic_k3".into(),
            shape: Shape::Quartic,
            support: Support::Bounded { lo: -1.0, hi: 1.0 },
            breakpoints: vec![-1.0, 1.0],
        }
    }

    pub fn by_name(name: &str) -> Result<Self, KernelError> {
        match name {
            "exponential" | "exp" => Ok(Self::exponential()),
            "uniform2" | "uniform" | "unif" => Ok(Self::uniform2()),
            "quartic_k3" | "k3" | "quartic" => Ok(Self::quartic_k3()),
            other => Err(KernelError::UnknownName(other.to_string())),
        }
    }

    /// Arbitrary kernel from a closure. `breakpoints` lists points where `K`
    /// or its derivative jumps; quadrature splits there.
    pub fn custom<F>(name: &str, f: F, support: Support, breakpoints: Vec<f64>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            shape: Shape::Function(Arc::new(f)),
            support,
            breakpoints,
        }
    }

    /// Piecewise-linear kernel through the tabulated nodes, zero outside.
    pub fn tabulated(name: &str, xs: Vec<f64>, ks: Vec<f64>) -> Result<Self, KernelError> {
        if xs.len() != ks.len() || xs.len() < 2 {
            return Err(KernelError::Table(
                "need at least two (x, K) rows of matching length".into(),
            ));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(KernelError::Table("x values must be strictly increasing".into()));
        }
        if xs.iter().chain(&ks).any(|v| !v.is_finite()) {
            return Err(KernelError::Table("non-finite entry".into()));
        }
        let support = Support::Bounded {
            lo: xs[0],
            hi: xs[xs.len() - 1],
        };
        Ok(Self {
            name: name.to_string(),
            breakpoints: xs.clone(),
            shape: Shape::Tabulated { xs, ks },
            support,
        })
    }

    /// Parses a two-column `x,K` CSV (an optional non-numeric header line is
    /// skipped) into a tabulated kernel.
    pub fn from_csv(name: &str, text: &str) -> Result<Self, KernelError> {
        let mut xs = Vec::new();
        let mut ks = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                return Err(KernelError::Table(format!("line {}: expected `x,K`", i + 1)));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(k)) => {
                    xs.push(x);
                    ks.push(k);
                }
                _ if xs.is_empty() => continue,
                _ => return Err(KernelError::Table(format!("line {}: not numeric", i + 1))),
            }
        }
        Self::tabulated(name, xs, ks)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Exponential => 0.5 * (-x.abs()).exp(),
            Shape::Uniform => {
                if x.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Shape::Quartic => {
                if x.abs() <= 1.0 {
                    let s = 1.0 - x * x;
                    0.9375 * s * s
                } else {
                    0.0
                }
            }
            Shape::Tabulated { xs, ks } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                let j = xs.partition_point(|&p| p <= x);
                if j == 0 {
                    return ks[0];
                }
                if j >= xs.len() {
                    return ks[ks.len() - 1];
                }
                let w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
                ks[j - 1] + w * (ks[j] - ks[j - 1])
            }
            Shape::Function(f) => f(x),
        }
    }

    /// `K_b(u) = K(u / b) / b`.
    pub fn eval_scaled(&self, b: f64, u: f64) -> Result<f64, KernelError> {
        if !(b > 0.0) {
            return Err(KernelError::Bandwidth(b));
        }
        Ok(self.eval(u / b) / b)
    }

    fn bounds(&self) -> (f64, f64) {
        match self.support {
            Support::Bounded { lo, hi } => (lo, hi),
            Support::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn integrate_over<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64, KernelError> {
        let opts = QuadOptions::default();
        Ok(integrate(f, a, b, &self.breakpoints, &opts)?.value)
    }

    pub fn integral(&self) -> Result<f64, KernelError> {
        let (lo, hi) = self.bounds();
        self.integrate_over(|x| self.eval(x), lo, hi)
    }

    /// `∫ K(x)^2 dx`.
    pub fn k_squared_integral(&self) -> Result<f64, KernelError> {
        let (lo, hi) = self.bounds();
        self.integrate_over(
            |x| {
                let k = self.eval(x);
                k * k
            },
            lo,
            hi,
        )
    }

    /// `L(t) = ∫_t^∞ K` for `t >= 0` and `-∫_{-∞}^t K` for `t < 0`.
    pub fn l_function(&self, t: f64) -> Result<f64, KernelError> {
        let (lo, hi) = self.bounds();
        if t >= 0.0 {
            if t >= hi {
                return Ok(0.0);
            }
            self.integrate_over(|x| self.eval(x), t.max(lo), hi)
        } else {
            if t <= lo {
                return Ok(0.0);
            }
            Ok(-self.integrate_over(|x| self.eval(x), lo, t.min(hi))?)
        }
    }

    /// `∫ L(t)^2 dt`.
    pub fn l_squared_integral(&self) -> Result<f64, KernelError> {
        let (lo, hi) = self.bounds();
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        // L is smooth away from 0 and the kernel's own breakpoints; the inner
        // integral cannot fail where the outer one has already succeeded on K.
        let inner = |t: f64| match self.l_function(t) {
            Ok(l) => l * l,
            Err(_) => f64::NAN,
        };
        let mut pts = self.breakpoints.clone();
        pts.push(0.0);
        let opts = QuadOptions::default();
        Ok(integrate(inner, lo, hi, &pts, &opts)?.value)
    }

    /// Numerically checks the regularity conditions imposed on kernels.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();
        let mut push = |name: &str, passed: bool, residual: f64, detail: String| {
            checks.push(KernelCheck {
                name: name.to_string(),
                passed,
                residual,
                detail,
            })
        };

        match self.integral() {
            Ok(total) => push(
                "normalization",
                (total - 1.0).abs() <= 1e-8,
                (total - 1.0).abs(),
                format!("integral = {total:.12}"),
            ),
            Err(e) => push("normalization", false, f64::NAN, e.to_string()),
        }

        let (lo, hi) = self.bounds();
        let span_lo = if lo.is_finite() { lo - 1.0 } else { -50.0 };
        let span_hi = if hi.is_finite() { hi + 1.0 } else { 50.0 };
        let samples = 20_001;
        let grid: Vec<f64> = (0..samples)
            .map(|i| span_lo + (span_hi - span_lo) * i as f64 / (samples - 1) as f64)
            .collect();
        let values: Vec<f64> = grid.iter().map(|&x| self.eval(x)).collect();

        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        push(
            "nonnegative",
            min >= 0.0,
            (-min).max(0.0),
            format!("minimum sampled value {min:.3e}"),
        );
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        push(
            "bounded",
            max.is_finite(),
            max,
            format!("maximum sampled value {max:.6}"),
        );

        // Slope estimate on cells that do not straddle a declared breakpoint.
        let h = (span_hi - span_lo) / (samples - 1) as f64;
        let mut slope: f64 = 0.0;
        for i in 0..samples - 1 {
            let (a, b) = (grid[i], grid[i + 1]);
            if self.breakpoints.iter().any(|&p| p >= a - 1e-12 && p <= b + 1e-12) {
                continue;
            }
            slope = slope.max(((values[i + 1] - values[i]) / h).abs());
        }
        push(
            "lipschitz",
            slope.is_finite() && slope < 1e6,
            slope,
            format!("max |dK/dx| off breakpoints ≈ {slope:.4}"),
        );

        match self.integrate_over(|x| (x * self.eval(x)).abs(), lo, hi) {
            Ok(m) => push(
                "first_absolute_moment",
                m.is_finite(),
                m,
                format!("∫|x K(x)| dx = {m:.6}"),
            ),
            Err(e) => push("first_absolute_moment", false, f64::NAN, e.to_string()),
        }

        let tail = [1e3, -1e3, 1e6, -1e6]
            .iter()
            .map(|&y| (self.eval(y) * y * y).abs())
            .fold(0.0_f64, f64::max);
        push(
            "tail_decay",
            tail <= 1e-6,
            tail,
            format!("max |K(y) y^2| at |y| in {{1e3, 1e6}} = {tail:.3e}"),
        );

        ValidationReport {
            kernel: self.name.clone(),
            checks,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub kernel: String,
    pub checks: Vec<KernelCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&KernelCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kernel {}", self.kernel)?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {:<22} residual {:.3e}  {}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.residual,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Fits `K` through the rows of a tabulated kernel CSV.
pub fn kernel_from_spec(name: &str, table: Option<&str>) -> Result<Kernel, KernelError> {
    match table {
        Some(text) => Kernel::from_csv(name, text),
        None => Kernel::by_name(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_evaluations() {
        assert_eq!(Kernel::exponential().eval_scaled(1.0, 0.0).unwrap(), 0.5);
        assert_eq!(Kernel::uniform2().eval_scaled(0.5, 0.6).unwrap(), 0.0);
        assert_eq!(Kernel::quartic_k3().eval_scaled(2.0, 0.0).unwrap(), 0.46875);
        assert_eq!(
            Kernel::exponential().eval_scaled(0.0, 1.0),
            Err(KernelError::Bandwidth(0.0))
        );
    }

    #[test]
    fn squared_integrals() {
        let e = Kernel::exponential().k_squared_integral().unwrap();
        let u = Kernel::uniform2().k_squared_integral().unwrap();
        let q = Kernel::quartic_k3().k_squared_integral().unwrap();
        assert!((e - 0.25).abs() < 1e-9);
        assert!((u - 0.5).abs() < 1e-9);
        assert!((q - 5.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn l_function_values() {
        let k = Kernel::exponential();
        assert!((k.l_function(0.0).unwrap() - 0.5).abs() < 1e-10);
        assert!(k.l_function(60.0).unwrap().abs() < 1e-20);
        for t in [0.1, 0.7, 2.5] {
            let pos = k.l_function(t).unwrap();
            let neg = k.l_function(-t).unwrap();
            assert!((pos + neg).abs() < 1e-10);
            assert!((pos - 0.5 * (-t as f64).exp()).abs() < 1e-10);
        }
        let u = Kernel::uniform2();
        assert_eq!(u.l_function(1.5).unwrap(), 0.0);
        assert!((u.l_function(0.5).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn l_squared_integrals() {
        assert!((Kernel::exponential().l_squared_integral().unwrap() - 0.25).abs() < 1e-8);
        // L(t) = (1 - |t|) sign(t) / 2 on [-1, 1]
        assert!((Kernel::uniform2().l_squared_integral().unwrap() - 1.0 / 6.0).abs() < 1e-8);
        assert!(Kernel::quartic_k3().l_squared_integral().unwrap() > 0.0);
    }

    #[test]
    fn builtins_validate() {
        for k in [Kernel::exponential(), Kernel::uniform2(), Kernel::quartic_k3()] {
            let report = k.validate();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn linear_ramp_fails_normalization() {
        let k = Kernel::custom(
            "ramp",
            |x| if (0.0..=1.0).contains(&x) { x } else { 0.0 },
            Support::Bounded { lo: 0.0, hi: 1.0 },
            vec![0.0, 1.0],
        );
        let report = k.validate();
        let norm = report.check("normalization").unwrap();
        assert!(!norm.passed);
        assert!((norm.residual - 0.5).abs() < 1e-10);
    }

    #[test]
    fn doubled_gaussian_fails_normalization() {
        let k = Kernel::custom(
            "gauss2",
            |x| 2.0 * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Support::Unbounded,
            vec![],
        );
        let report = k.validate();
        let norm = report.check("normalization").unwrap();
        assert!(!norm.passed);
        assert!((norm.residual - 1.0).abs() < 1e-8);
        assert!(report.check("tail_decay").unwrap().passed);
    }

    #[test]
    fn tabulated_interpolates_linearly() {
        let k = Kernel::from_csv("tri", "x,K\n-1,0\n0,1\n1,0\n").unwrap();
        assert!((k.eval(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(k.eval(1.5), 0.0);
        assert!((k.integral().unwrap() - 1.0).abs() < 1e-12);
        assert!((k.k_squared_integral().unwrap() - 2.0 / 3.0).abs() < 1e-10);
        assert!(k.validate().passed());
    }

    #[test]
    fn tabulated_rejects_bad_tables() {
        assert!(Kernel::from_csv("bad", "0,1\n0,2\n").is_err());
        assert!(Kernel::from_csv("bad", "0,1\n").is_err());
        assert!(Kernel::from_csv("bad", "0,1\n1,x\n").is_err());
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(Kernel::by_name("gauss"), Err(KernelError::UnknownName(_))));
    }
}
