//! Resolution of config files and command-line overrides into an
//! [`ExperimentConfig`].
//!
//! The config file is TOML with three sections:
//!
//! ```toml
//! [experiment]
//! preset = "liu2018"
//! y = 1.6
//! n_paths = 200
//!
//! [model]
//! kappa = 0.5
//!
//! [estimator.debiased2_exp]
//! zeta = [1.9, 1.75]
//! p = [0.7, 0.25]
//! ```

use std::path::Path;

use serde_json::Value as Json;
use spotvol::estimate::{BandwidthRule, PracticalSign, ThresholdRule};
use spotvol::harness::{
    liu2018_experiment, realistic_experiment, EstimatorKind, EstimatorSpec, ExperimentConfig, PRESETS,
};
use spotvol::kernels::Kernel;
use toml::{Table, Value};

use crate::CliError;

pub const SECTIONS: &[&str] = &["experiment", "model", "estimator"];

pub const EXPERIMENT_KEYS: &[&str] = &[
    "preset",
    "y",
    "n_paths",
    "seed",
    "workers",
    "n_steps",
    "v0_exponent",
    "eps_truth",
    "tau_first",
    "tau_last",
    "tau_parts",
    "select",
];

pub const MODEL_KEYS: &[&str] = &[
    "x0",
    "v0",
    "drift_b",
    "kappa",
    "theta",
    "xi",
    "rho",
    "jump_y",
    "jump_scale",
    "jump_cap",
    "horizon_t",
    "n_steps",
];

pub const ESTIMATOR_KEYS: &[&str] = &[
    "kind",
    "stage",
    "kernel",
    "zeta",
    "p",
    "alpha",
    "v0",
    "v",
    "bandwidth_exponent",
    "m",
    "h_exponent",
    "u_exponent",
    "lambda",
    "cf_p",
    "sign",
];

const KINDS: &[&str] = &["truncated", "practical", "pointwise", "cf", "cf_debiased"];

pub const DEFAULT_PRESET: &str = "liu2018";
pub const DEFAULT_Y: f64 = 1.6;
pub const DEFAULT_PATHS: usize = 200;

/// Experiment plus the worker count, which is not part of the report.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub workers: usize,
}

/// Closest entry of `valid` to `key` by edit distance.
pub fn nearest<'a>(key: &str, valid: &[&'a str]) -> &'a str {
    valid
        .iter()
        .min_by_key(|v| strsim::levenshtein(key, v))
        .copied()
        .unwrap_or("")
}

fn unknown(what: &str, key: &str, valid: &[&str]) -> CliError {
    CliError::Config(format!("unknown {what} `{key}`; did you mean `{}`?", nearest(key, valid)))
}

fn check_keys(section: &str, table: &Table, valid: &[&str]) -> Result<(), CliError> {
    for key in table.keys() {
        if !valid.contains(&key.as_str()) {
            return Err(unknown(&format!("key in [{section}]"), key, valid));
        }
    }
    Ok(())
}

pub fn load_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))
}

pub fn parse_toml(text: &str) -> Result<Table, CliError> {
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("config is not valid TOML: {e}")))
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `section.key` (or `estimator.name.key`) in `table`.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key `{path}` must look like section.key or estimator.<name>.key"
        )));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{part}` in `{path}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `KEY=VALUE` override strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{o}` is not of the form key=value")))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(CliError::Config(format!("`{key}` must be a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(CliError::Config(format!("`{key}` must be a non-negative integer, got {v}"))),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, CliError> {
    v.as_str()
        .ok_or_else(|| CliError::Config(format!("`{key}` must be a string, got {v}")))
}

fn as_f64_list(key: &str, v: &Value) -> Result<Vec<f64>, CliError> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_f64(key, x)).collect(),
        other => Ok(vec![as_f64(key, other)?]),
    }
}

fn section<'a>(table: &'a Table, name: &str) -> Result<Option<&'a Table>, CliError> {
    match table.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(CliError::Config(format!("`{name}` must be a section"))),
    }
}

fn toml_to_json(v: &Value) -> Json {
    match v {
        Value::String(s) if s == "none" => Json::Null,
        Value::String(s) => Json::String(s.clone()),
        Value::Integer(i) => Json::from(*i),
        Value::Float(f) => Json::from(*f),
        Value::Boolean(b) => Json::Bool(*b),
        Value::Array(a) => Json::Array(a.iter().map(toml_to_json).collect()),
        other => Json::String(other.to_string()),
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn parse_kind(name: &str) -> Result<EstimatorKind, CliError> {
    serde_json::from_value(Json::String(name.to_string())).map_err(|_| unknown("estimator kind", name, KINDS))
}

fn apply_estimator(spec: &mut EstimatorSpec, t: &Table) -> Result<(), CliError> {
    let cfg = &mut spec.config;
    for (key, v) in t {
        match key.as_str() {
            "kind" => spec.kind = parse_kind(as_str(key, v)?)?,
            "stage" => {
                spec.stage = u8::try_from(as_usize(key, v)?)
                    .map_err(|_| CliError::Config(format!("`stage` out of range: {v}")))?
            }
            "kernel" => {
                cfg.kernel = Kernel::by_name(as_str(key, v)?).map_err(|e| CliError::Config(e.to_string()))?
            }
            "zeta" => cfg.zeta = as_f64_list(key, v)?,
            "p" => cfg.p_scalers = as_f64_list(key, v)?,
            "alpha" => cfg.threshold = ThresholdRule::DtPower { alpha: as_f64(key, v)? },
            "v0" => cfg.threshold = ThresholdRule::Scaled { v0: as_f64(key, v)? },
            "v" => cfg.threshold = ThresholdRule::Fixed { v: as_f64(key, v)? },
            "bandwidth_exponent" => {
                cfg.bandwidth = BandwidthRule::DtPower {
                    exponent: as_f64(key, v)?,
                }
            }
            "m" => cfg.bandwidth = BandwidthRule::Fixed { m: as_f64(key, v)? },
            "h_exponent" => cfg.cf.h_exponent = as_f64(key, v)?,
            "u_exponent" => cfg.cf.u_exponent = as_f64(key, v)?,
            "lambda" => cfg.cf.lambda = as_f64(key, v)?,
            "cf_p" => cfg.cf.p = as_f64(key, v)?,
            "sign" => {
                cfg.sign = match as_str(key, v)? {
                    "constrained" => PracticalSign::Constrained,
                    "flipped" => PracticalSign::Flipped,
                    other => return Err(unknown("sign convention", other, &["constrained", "flipped"])),
                }
            }
            other => return Err(unknown("key in [estimator]", other, ESTIMATOR_KEYS)),
        }
    }
    Ok(())
}

/// Builds the experiment described by `table`.
pub fn resolve(table: &Table) -> Result<Resolved, CliError> {
    for key in table.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(unknown("section", key, SECTIONS));
        }
    }
    let empty = Table::new();
    let exp = section(table, "experiment")?.unwrap_or(&empty);
    check_keys("experiment", exp, EXPERIMENT_KEYS)?;

    let preset = match exp.get("preset") {
        Some(v) => as_str("preset", v)?,
        None => DEFAULT_PRESET,
    };
    let y = exp.get("y").map(|v| as_f64("y", v)).transpose()?.unwrap_or(DEFAULT_Y);
    let n_paths = exp
        .get("n_paths")
        .map(|v| as_usize("n_paths", v))
        .transpose()?
        .unwrap_or(DEFAULT_PATHS);
    let seed = exp.get("seed").map(|v| as_usize("seed", v)).transpose()?.unwrap_or(0) as u64;
    let workers = exp
        .get("workers")
        .map(|v| as_usize("workers", v))
        .transpose()?
        .unwrap_or_else(default_workers);
    let n_steps = exp.get("n_steps").map(|v| as_usize("n_steps", v)).transpose()?;
    let v0_exponent = exp
        .get("v0_exponent")
        .map(|v| as_usize("v0_exponent", v))
        .transpose()?
        .unwrap_or(20) as u32;

    let mut config = match preset {
        "liu2018" => liu2018_experiment(y, n_steps.unwrap_or(8580), n_paths, seed),
        "realistic" => {
            let mut c = realistic_experiment(y, v0_exponent, n_paths, seed);
            if let Some(n) = n_steps {
                let dt = c.model.dt();
                c.model.n_steps = n;
                c.model.horizon_t = dt * n as f64;
            }
            c
        }
        other => return Err(unknown("preset", other, &PRESETS)),
    };

    if let Some(model) = section(table, "model")? {
        check_keys("model", model, MODEL_KEYS)?;
        let mut json = serde_json::to_value(&config.model).expect("model serializes");
        let obj = json.as_object_mut().expect("model is an object");
        for (k, v) in model {
            obj.insert(k.clone(), toml_to_json(v));
        }
        config.model =
            serde_json::from_value(json).map_err(|e| CliError::Config(format!("invalid [model]: {e}")))?;
    }

    if let Some(select) = exp.get("select") {
        let names: Vec<&str> = match select {
            Value::Array(a) => a.iter().map(|v| as_str("select", v)).collect::<Result<_, _>>()?,
            other => vec![as_str("select", other)?],
        };
        let known: Vec<&str> = config.estimators.iter().map(|e| e.name.as_str()).collect();
        for n in &names {
            if !known.contains(n) {
                return Err(unknown("estimator", n, &known));
            }
        }
        config.estimators.retain(|e| names.contains(&e.name.as_str()));
    }

    if let Some(ests) = section(table, "estimator")? {
        for (name, v) in ests {
            let t = match v {
                Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("[estimator.{name}] must be a section"))),
            };
            check_keys(&format!("estimator.{name}"), t, ESTIMATOR_KEYS)?;
            match config.estimators.iter_mut().find(|e| &e.name == name) {
                Some(spec) => apply_estimator(spec, t)?,
                None => {
                    let kind = t.get("kind").ok_or_else(|| {
                        CliError::Config(format!("new estimator `{name}` needs a `kind`"))
                    })?;
                    let mut spec = EstimatorSpec::new(name, parse_kind(as_str("kind", kind)?)?, 0, Default::default());
                    apply_estimator(&mut spec, t)?;
                    config.estimators.push(spec);
                }
            }
        }
    }

    if let Some(v) = exp.get("eps_truth") {
        config.eps_truth = as_f64("eps_truth", v)?;
    }
    if let Some(v) = exp.get("tau_first") {
        config.tau_grid.first = as_usize("tau_first", v)?;
    }
    if let Some(v) = exp.get("tau_last") {
        config.tau_grid.last = as_usize("tau_last", v)?;
    }
    if let Some(v) = exp.get("tau_parts") {
        config.tau_grid.parts = as_usize("tau_parts", v)?;
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Resolved {
        experiment: config,
        workers,
    })
}

/// Reads a resolved experiment from JSON: either a bare config or a report
/// embedding one under `config`.
pub fn from_json(text: &str) -> Result<ExperimentConfig, CliError> {
    let v: Json = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON config: {e}")))?;
    let inner = v.get("config").cloned().unwrap_or(v);
    let config: ExperimentConfig =
        serde_json::from_value(inner).map_err(|e| CliError::Config(format!("invalid JSON config: {e}")))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_str(text: &str) -> Result<Resolved, CliError> {
        resolve(&parse_toml(text).unwrap())
    }

    #[test]
    fn defaults_to_liu2018() {
        let r = resolve_str("").unwrap();
        assert_eq!(r.experiment.model.n_steps, 8580);
        assert_eq!(r.experiment.n_paths, DEFAULT_PATHS);
        assert_eq!(r.experiment.model.jump_y, DEFAULT_Y);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = resolve_str("[model]\nkapa = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kapa") && msg.contains("kappa"), "{msg}");
        let err = resolve_str("[experimnt]\n").unwrap_err();
        assert!(err.to_string().contains("experiment"));
        let err = resolve_str("[estimator.debiased2_exp]\nzeeta = [1.5, 1.5]\n").unwrap_err();
        assert!(err.to_string().contains("zeta"));
    }

    #[test]
    fn overrides_reach_model_and_estimators() {
        let mut t = parse_toml("[experiment]\npreset = \"realistic\"\n").unwrap();
        apply_overrides(
            &mut t,
            &[
                "model.kappa=2".into(),
                "estimator.debiased1_exp.zeta=1.3".into(),
                "experiment.n_paths=3".into(),
            ],
        )
        .unwrap();
        let r = resolve(&t).unwrap();
        assert_eq!(r.experiment.model.kappa, 2.0);
        assert_eq!(r.experiment.n_paths, 3);
        let e = r.experiment.estimator("debiased1_exp").unwrap();
        assert_eq!(e.config.zeta, vec![1.3]);
    }

    #[test]
    fn new_estimator_needs_kind() {
        assert!(resolve_str("[estimator.mine]\nstage = 1\n").is_err());
        let r = resolve_str("[estimator.mine]\nkind = \"pointwise\"\nstage = 1\nzeta = [1.5]\n").unwrap();
        assert_eq!(r.experiment.estimator("mine").unwrap().kind, EstimatorKind::Pointwise);
    }

    #[test]
    fn select_keeps_named_estimators() {
        let r = resolve_str("[experiment]\nselect = [\"cf\", \"truncated_exp\"]\n").unwrap();
        let names: Vec<&str> = r.experiment.estimators.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["cf", "truncated_exp"]);
        assert!(resolve_str("[experiment]\nselect = [\"truncated_xp\"]\n").is_err());
    }

    #[test]
    fn jump_cap_none() {
        let r = resolve_str("[experiment]\npreset = \"realistic\"\n[model]\njump_cap = \"none\"\n").unwrap();
        assert_eq!(r.experiment.model.jump_cap, None);
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("1.5"), Value::Float(1.5));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("exp"), Value::String("exp".into()));
    }
}
