//! `--assert <estimator>.<metric><op><value>` thresholds on a report.

use spotvol::harness::ExperimentReport;

use crate::config::nearest;
use crate::CliError;

const METRICS: &[&str] = &["rmse", "are", "re"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Op::Lt => lhs < rhs,
            Op::Le => lhs <= rhs,
            Op::Gt => lhs > rhs,
            Op::Ge => lhs >= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub estimator: String,
    pub metric: String,
    pub op: Op,
    pub value: f64,
}

impl Threshold {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("assertion `{text}` must look like <estimator>.<metric><op><value>"));
        let (pos, op, len) = [("<=", Op::Le), (">=", Op::Ge), ("<", Op::Lt), (">", Op::Gt)]
            .iter()
            .filter_map(|(s, op)| text.find(s).map(|p| (p, *op, s.len())))
            .min_by_key(|(p, _, len)| (*p, std::cmp::Reverse(*len)))
            .ok_or_else(bad)?;
        let lhs = text[..pos].trim();
        let value: f64 = text[pos + len..].trim().parse().map_err(|_| bad())?;
        let (estimator, metric) = lhs.rsplit_once('.').ok_or_else(bad)?;
        if !METRICS.contains(&metric) {
            return Err(CliError::Config(format!(
                "unknown metric `{metric}`; did you mean `{}`?",
                nearest(metric, METRICS)
            )));
        }
        Ok(Self {
            estimator: estimator.to_string(),
            metric: metric.to_string(),
            op,
            value,
        })
    }

    /// `Ok(None)` when the threshold holds, `Ok(Some(message))` otherwise.
    pub fn check(&self, report: &ExperimentReport) -> Result<Option<String>, CliError> {
        let est = report.estimator(&self.estimator).ok_or_else(|| {
            let names: Vec<&str> = report.estimators.iter().map(|e| e.name.as_str()).collect();
            CliError::Config(format!(
                "unknown estimator `{}` in assertion; did you mean `{}`?",
                self.estimator,
                nearest(&self.estimator, &names)
            ))
        })?;
        let actual = match self.metric.as_str() {
            "rmse" => est.rmse,
            "are" => est.are,
            _ => est.re,
        };
        if self.op.holds(actual, self.value) {
            Ok(None)
        } else {
            Ok(Some(format!(
                "{}.{} = {actual} is not {} {}",
                self.estimator,
                self.metric,
                self.op.symbol(),
                self.value
            )))
        }
    }
}
