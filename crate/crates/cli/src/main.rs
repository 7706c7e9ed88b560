use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spotvol::harness::{evaluate_path, grid_search, run_experiment, TuningGrid};
use spotvol::kernels::Kernel;
use spotvol::sim::{path_seed, rng_from_seed, simulate_path, PathSample};
use spotvol::theory::{
    mc_truncated_band_oracle, mc_truncated_moment_oracle, truncated_difference_expansion,
    truncated_moment_expansion, JumpActivityParams,
};
use spotvol_cli::check::Threshold;
use spotvol_cli::config::{self, Resolved};
use spotvol_cli::CliError;
use toml::{Table, Value};

#[derive(Debug, Parser)]
#[command(name = "spotvol", version, about = "Spot-volatility estimation experiments under stable jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config with [experiment], [model] and [estimator.<name>]
    /// sections, or a JSON report whose embedded config is rerun.
    #[arg(long)]
    config: Option<PathBuf>,
    /// liu2018 or realistic.
    #[arg(long)]
    preset: Option<String>,
    /// Jump activity index.
    #[arg(long)]
    y: Option<f64>,
    /// Number of Monte Carlo paths.
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Override any config entry, e.g. `model.kappa=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate paths and write one `t,x,v` CSV per path.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        paths: usize,
    },
    /// Evaluate the configured estimators on an observed path.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// `t,x,v` CSV as written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Evaluation times, snapped to the sampling grid; defaults to the
        /// experiment's evaluation grid.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// Restrict to these estimators.
        #[arg(long, value_delimiter = ',')]
        estimator: Vec<String>,
    },
    /// Run a Monte Carlo experiment and write report.json and summary.csv.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Threshold such as `debiased2_exp.rmse<=0.14`; exit code 3 if any fails.
        #[arg(long = "assert", value_name = "EXPR")]
        asserts: Vec<String>,
    },
    /// Exhaustive tuning search for one estimator.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: String,
        /// Pilot paths per candidate.
        #[arg(long, default_value_t = 100)]
        pilot_m: usize,
        /// Draw fresh paths for every candidate instead of sharing them.
        #[arg(long)]
        independent_pilot: bool,
        #[arg(long, value_delimiter = ',')]
        zeta_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        p_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Vec<f64>,
    },
    /// Check a kernel's integrability conditions and functionals.
    ValidateKernel {
        /// exponential, uniform2, quartic_k3, or a name for `--table`.
        #[arg(long)]
        kernel: String,
        /// CSV of `x,k` samples for a tabulated kernel.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Compare the truncated-moment expansion with a Monte Carlo estimate.
    Oracle {
        #[arg(long, default_value_t = 1)]
        p: u32,
        #[arg(long)]
        y: f64,
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
        #[arg(long, default_value = "1e6", value_parser = parse_count)]
        draws: usize,
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
        /// Stable scale of the jump component.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Threshold `v = dt^alpha`.
        #[arg(long, default_value_t = 5.0 / 12.0)]
        alpha: f64,
        /// Also compare the band `v < |x| <= zeta v`.
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_count(s: &str) -> Result<usize, String> {
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if x >= 1.0 && x.fract() == 0.0 && x <= 1e15 {
        Ok(x as usize)
    } else {
        Err(format!("`{s}` is not a positive whole number"))
    }
}

fn resolve(common: &Common) -> Result<Resolved, CliError> {
    if let Some(path) = &common.config {
        if path.extension().is_some_and(|e| e == "json") {
            if !common.set.is_empty() || common.preset.is_some() || common.y.is_some() {
                return Err(CliError::Config(
                    "a JSON config is already resolved; only --M, --seed and --workers apply".into(),
                ));
            }
            let mut experiment = config::from_json(&config::load_file(path)?)?;
            if let Some(m) = common.m {
                experiment.n_paths = m;
            }
            if let Some(s) = common.seed {
                experiment.master_seed = s;
            }
            let workers = common
                .workers
                .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
            return Ok(Resolved { experiment, workers });
        }
    }
    let mut table = match &common.config {
        Some(path) => config::parse_toml(&config::load_file(path)?)?,
        None => Table::new(),
    };
    let flags: [(&str, Option<Value>); 5] = [
        ("experiment.preset", common.preset.clone().map(Value::String)),
        ("experiment.y", common.y.map(Value::Float)),
        ("experiment.n_paths", common.m.map(|m| Value::Integer(m as i64))),
        ("experiment.seed", common.seed.map(|s| Value::Integer(s as i64))),
        ("experiment.workers", common.workers.map(|w| Value::Integer(w as i64))),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config::set_path(&mut table, key, v)?;
        }
    }
    config::apply_overrides(&mut table, &common.set)?;
    config::resolve(&table)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

fn simulate(common: &Common, paths: usize) -> Result<(), CliError> {
    let r = resolve(common)?;
    let model = &r.experiment.model;
    fs::create_dir_all(&common.out)?;
    for j in 0..paths {
        let path = simulate_path(model, path_seed(r.experiment.master_seed, j as u64)).map_err(run_err)?;
        let file = common.out.join(format!("path_{j:04}.csv"));
        let mut out = std::io::BufWriter::new(fs::File::create(&file)?);
        path.write_csv(&mut out)?;
        println!("{}", file.display());
    }
    Ok(())
}

fn estimate(common: &Common, input: &Path, taus: &[f64], names: &[String]) -> Result<(), CliError> {
    let r = resolve(common)?;
    let text = fs::read_to_string(input)?;
    let path = PathSample::read_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let n = path.n_steps();
    let dt = path.dt();
    let indices: Vec<usize> = if taus.is_empty() {
        r.experiment.tau_grid.indices(n).map_err(|e| CliError::Config(e.to_string()))?
    } else {
        taus.iter()
            .map(|&t| {
                let l = (t / dt).round();
                if t > 0.0 && l >= 1.0 && l < n as f64 {
                    Ok(l as usize)
                } else {
                    Err(CliError::Config(format!("tau = {t} is outside the path (0, {})", path.horizon())))
                }
            })
            .collect::<Result<_, _>>()?
    };
    let mut specs = r.experiment.estimators.clone();
    if !names.is_empty() {
        let known: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let known_ref: Vec<&str> = known.iter().map(String::as_str).collect();
        for n in names {
            if !known.contains(n) {
                return Err(CliError::Config(format!(
                    "unknown estimator `{n}`; did you mean `{}`?",
                    config::nearest(n, &known_ref)
                )));
            }
        }
        specs.retain(|s| names.contains(&s.name));
    }
    let mut csv = String::from("estimator,tau,value\n");
    for (spec, result) in specs.iter().zip(evaluate_path(&path, &specs, &indices)) {
        match result {
            Ok((values, _)) => {
                for (&l, v) in indices.iter().zip(values) {
                    csv.push_str(&format!("{},{},{v}\n", spec.name, path.times[l]));
                }
            }
            Err(e) => eprintln!("{}: {e}", spec.name),
        }
    }
    let file = write(&common.out, "estimates.csv", &csv)?;
    println!("{}", file.display());
    Ok(())
}

fn experiment(common: &Common, asserts: &[String]) -> Result<(), CliError> {
    let thresholds: Vec<Threshold> = asserts.iter().map(|a| Threshold::parse(a)).collect::<Result<_, _>>()?;
    let r = resolve(common)?;
    let report = run_experiment(&r.experiment, r.workers).map_err(run_err)?;
    write(&common.out, "report.json", &report.to_json())?;
    let csv = report.summary_csv();
    write(&common.out, "summary.csv", &csv)?;
    print!("{csv}");
    eprintln!("{} paths in {:.1}s", r.experiment.n_paths, report.wall_clock_secs);
    let mut failures = Vec::new();
    for t in &thresholds {
        if let Some(msg) = t.check(&report)? {
            failures.push(msg);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(failures.join("; ")))
    }
}

#[allow(clippy::too_many_arguments)]
fn gridsearch(
    common: &Common,
    estimator: &str,
    pilot_m: usize,
    independent: bool,
    zeta: &[f64],
    p: &[f64],
    lambda: &[f64],
) -> Result<(), CliError> {
    let r = resolve(common)?;
    let std = TuningGrid::standard();
    let pick = |v: &[f64], d: Vec<f64>| if v.is_empty() { d } else { v.to_vec() };
    let grid = TuningGrid {
        zeta: pick(zeta, std.zeta),
        p: pick(p, std.p),
        lambda: pick(lambda, std.lambda),
    };
    r.experiment
        .estimator(estimator)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let result = grid_search(&r.experiment, estimator, &grid, pilot_m, independent, r.workers).map_err(run_err)?;
    let json = serde_json::to_string_pretty(&result).expect("grid result serializes");
    write(&common.out, "gridsearch.json", &json)?;
    let spec = r.experiment.estimator(estimator).expect("checked above");
    println!(
        "{estimator}: best {} with pilot RMSE {}",
        result.best.label(spec.kind),
        result.best_rmse
    );
    Ok(())
}

fn validate_kernel(name: &str, table: Option<&Path>) -> Result<(), CliError> {
    let kernel = match table {
        Some(p) => Kernel::from_csv(name, &fs::read_to_string(p)?),
        None => Kernel::by_name(name),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    let report = kernel.validate();
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("kernel `{name}` failed validation")))
    }
}

#[allow(clippy::too_many_arguments)]
fn oracle(
    p: u32,
    y: f64,
    dt: f64,
    draws: usize,
    sigma: f64,
    scale: f64,
    alpha: f64,
    zeta: Option<f64>,
    seed: u64,
) -> Result<(), CliError> {
    let cfg = |e: spotvol::theory::TheoryError| CliError::Config(e.to_string());
    let params = JumpActivityParams::from_stable_scale(y, scale, 1.0, sigma * sigma).map_err(cfg)?;
    let v = dt.powf(alpha);
    let expansion = truncated_moment_expansion(p, &params, dt, v).map_err(cfg)?;
    let mc = mc_truncated_moment_oracle(p, &params, dt, v, draws, &mut rng_from_seed(seed)).map_err(cfg)?;
    println!(
        "moment p={p} Y={y} dt={dt:e} v={v:.4e}: expansion {expansion:.5e}, monte carlo {:.5e} ± {:.2e} ({:+.2} SE)",
        mc.estimate,
        mc.std_error,
        (expansion - mc.estimate) / mc.std_error
    );
    if let Some(z) = zeta {
        let expansion = truncated_difference_expansion(&params, dt, v, z).map_err(cfg)?;
        let mc = mc_truncated_band_oracle(1, &params, dt, v, z, draws, &mut rng_from_seed(seed.wrapping_add(1)))
            .map_err(cfg)?;
        println!(
            "band zeta={z} Y={y} dt={dt:e} v={v:.4e}: expansion {expansion:.5e}, monte carlo {:.5e} ± {:.2e} ({:+.2} SE)",
            mc.estimate,
            mc.std_error,
            (expansion - mc.estimate) / mc.std_error
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, paths } => simulate(common, *paths),
        Command::Estimate {
            common,
            input,
            tau,
            estimator,
        } => estimate(common, input, tau, estimator),
        Command::Experiment { common, asserts } => experiment(common, asserts),
        Command::Gridsearch {
            common,
            estimator,
            pilot_m,
            independent_pilot,
            zeta_grid,
            p_grid,
            lambda_grid,
        } => gridsearch(common, estimator, *pilot_m, *independent_pilot, zeta_grid, p_grid, lambda_grid),
        Command::ValidateKernel { kernel, table } => validate_kernel(kernel, table.as_deref()),
        Command::Oracle {
            p,
            y,
            dt,
            draws,
            sigma,
            scale,
            alpha,
            zeta,
            seed,
        } => oracle(*p, *y, *dt, *draws, *sigma, *scale, *alpha, *zeta, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spotvol: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
