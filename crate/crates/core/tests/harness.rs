use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use spotvol::estimate::{spot_vol_truncated, EstimatorConfig, ThresholdRule};
use spotvol::harness::{
    compute_metrics, grid_search, liu2018_experiment, run_experiment, tau_grid, EstimatorKind, EstimatorSpec,
    ExperimentConfig, TauGridRule, Tuning, TuningGrid, DEFAULT_EPS_TRUTH,
};
use spotvol::kernels::Kernel;
use spotvol::sim::{path_seed, rng_from_seed, simulate_path, ModelSpec};

fn flat_model(v0: f64, n: usize) -> ModelSpec {
    ModelSpec {
        x0: 0.0,
        v0,
        drift_b: 0.0,
        kappa: 0.0,
        theta: v0,
        xi: 0.0,
        rho: 0.0,
        jump_y: 1.5,
        jump_scale: 0.0,
        jump_cap: None,
        horizon_t: 1.0,
        n_steps: n,
    }
}

fn small_liu(n_paths: usize, seed: u64) -> ExperimentConfig {
    let mut config = liu2018_experiment(1.6, 1000, n_paths, seed);
    config.model.v0 = 1.0;
    config
}

#[test]
fn hand_worked_metrics() {
    let m = compute_metrics(&[vec![1.1, 3.6]], &[vec![1.0, 4.0]], DEFAULT_EPS_TRUTH).unwrap();
    assert!((m.mse_paths[0] - (0.01 + 0.16) / 2.0).abs() < 1e-12);
    assert!((m.are - 0.1).abs() < 1e-12);
    assert!(m.re.abs() < 1e-12);
}

#[test]
fn doubled_estimates_have_unit_relative_error() {
    let truths = vec![vec![0.5, 1.0, 2.0], vec![3.0, 1.5, 0.25]];
    let est: Vec<Vec<f64>> = truths.iter().map(|r| r.iter().map(|c| 2.0 * c).collect()).collect();
    let m = compute_metrics(&est, &truths, DEFAULT_EPS_TRUTH).unwrap();
    assert!((m.re - 1.0).abs() < 1e-12 && (m.are - 1.0).abs() < 1e-12);
    let expected: f64 = truths
        .iter()
        .map(|r| r.iter().map(|c| c * c).sum::<f64>() / r.len() as f64)
        .sum::<f64>()
        / truths.len() as f64;
    assert!((m.rmse - expected.sqrt()).abs() < 1e-12);
}

#[test]
fn tiny_truths_are_excluded_from_relative_errors() {
    let m = compute_metrics(&[vec![1.0, 0.3]], &[vec![1.0, 0.0]], DEFAULT_EPS_TRUTH).unwrap();
    assert_eq!(m.excluded_truths, 1);
    assert_eq!(m.re, 0.0);
    assert!((m.rmse - (0.09f64 / 2.0).sqrt()).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(compute_metrics(&[vec![1.0]], &[vec![1.0, 2.0]], DEFAULT_EPS_TRUTH).is_err());
    assert!(compute_metrics(&[vec![1.0]], &[], DEFAULT_EPS_TRUTH).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_squared_is_mean_mse(
        rows in prop::collection::vec(prop::collection::vec((0.01f64..5.0, -3.0f64..3.0), 5), 1..20)
    ) {
        let truths: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
        let est: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0 + p.1).collect()).collect();
        let m = compute_metrics(&est, &truths, DEFAULT_EPS_TRUTH).unwrap();
        let mean = m.mse_paths.iter().sum::<f64>() / m.mse_paths.len() as f64;
        prop_assert!((m.rmse * m.rmse - mean).abs() <= 4.0 * f64::EPSILON * mean);
    }
}

#[test]
fn added_noise_raises_rmse_squared_by_its_variance() {
    let mut rng = rng_from_seed(17);
    let (paths, points) = (400, 81);
    let truths: Vec<Vec<f64>> = (0..paths).map(|j| vec![1.0 + j as f64 / paths as f64; points]).collect();
    let base: Vec<Vec<f64>> = truths
        .iter()
        .map(|r| r.iter().map(|c| c + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let r0 = compute_metrics(&base, &truths, DEFAULT_EPS_TRUTH).unwrap().rmse;
    for w in [0.01f64, 0.04] {
        let noisy: Vec<Vec<f64>> = base
            .iter()
            .map(|r| r.iter().map(|e| e + w.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let r = compute_metrics(&noisy, &truths, DEFAULT_EPS_TRUTH).unwrap().rmse;
        let gain = r * r - r0 * r0;
        // sd of the gain ≈ sqrt(2 w² + 4 w·0.01) / sqrt(paths · points)
        let sd = (2.0 * w * w + 0.04 * w).sqrt() / ((paths * points) as f64).sqrt();
        assert!((gain - w).abs() < 5.0 * sd, "w = {w}: gain {gain}");
    }
}

#[test]
fn single_path_report_matches_direct_computation() {
    let config = ExperimentConfig {
        model: flat_model(0.3, 2000),
        estimators: vec![EstimatorSpec::new(
            "trunc",
            EstimatorKind::Truncated,
            0,
            EstimatorConfig::with_kernel(Kernel::quartic_k3()),
        )],
        n_paths: 1,
        master_seed: 21,
        tau_grid: TauGridRule::default(),
        eps_truth: DEFAULT_EPS_TRUTH,
    };
    let report = run_experiment(&config, 1).unwrap();
    let path = simulate_path(&config.model, path_seed(21, 0)).unwrap();
    let dt = path.dt();
    let bv = spotvol::estimate::bipower_variation(&path).unwrap();
    let v = spotvol::estimate::threshold_v(bv, dt, &ThresholdRule::default());
    let m = config.estimators[0].config.bandwidth.multiplier(dt);
    let grid = tau_grid(2000).unwrap();
    let mse: f64 = grid
        .iter()
        .map(|&l| {
            let c = spot_vol_truncated(&path, path.times[l], m, v, &Kernel::quartic_k3()).unwrap().value;
            (c - path.v[l]).powi(2)
        })
        .sum::<f64>()
        / grid.len() as f64;
    let r = &report.estimators[0];
    assert!((r.mse_paths[0] - mse).abs() <= 1e-12 * mse, "{} vs {mse}", r.mse_paths[0]);
}

#[test]
fn report_is_independent_of_worker_count() {
    let config = small_liu(6, 99);
    let one = run_experiment(&config, 1).unwrap().to_json();
    let three = run_experiment(&config, 3).unwrap().to_json();
    assert_eq!(one, three);
}

#[test]
fn summary_csv_has_fixed_header_and_one_row_per_estimator() {
    let config = small_liu(2, 5);
    let report = run_experiment(&config, 1).unwrap();
    let csv = report.summary_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Estimator,RMSE,ARE,RE,Tuning");
    assert_eq!(lines.len(), config.estimators.len() + 1);
}

#[test]
fn json_report_round_trips_config() {
    let config = small_liu(2, 5);
    let report = run_experiment(&config, 1).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    let back: ExperimentConfig = serde_json::from_value(parsed["config"].clone()).unwrap();
    assert_eq!(back, config);
    assert_eq!(run_experiment(&back, 2).unwrap().to_json(), report.to_json());
}

#[test]
fn single_point_grid_returns_that_point() {
    let config = small_liu(4, 3);
    let grid = TuningGrid {
        zeta: vec![1.4],
        p: vec![0.3],
        lambda: vec![1.5],
    };
    let r = grid_search(&config, "debiased2_exp", &grid, 4, false, 1).unwrap();
    assert_eq!(
        r.best,
        Tuning {
            zeta: vec![1.4, 1.4],
            p: vec![0.3, 0.3]
        }
    );
    assert_eq!(r.surface.len(), 1);
}

#[test]
fn grid_search_is_deterministic() {
    let config = small_liu(4, 12);
    let grid = TuningGrid {
        zeta: vec![1.3, 1.7],
        p: vec![0.2, 0.6],
        lambda: vec![1.5],
    };
    let a = grid_search(&config, "debiased1_exp", &grid, 4, false, 1).unwrap();
    let b = grid_search(&config, "debiased1_exp", &grid, 4, false, 2).unwrap();
    assert_eq!(a, b);
    let c = grid_search(&config, "debiased1_exp", &grid, 4, true, 1).unwrap();
    let d = grid_search(&config, "debiased1_exp", &grid, 4, true, 2).unwrap();
    assert_eq!(c, d);
    assert!(c.independent_pilot);
}

#[test]
fn always_guarded_candidate_loses() {
    // a straight-line path: every increment equals d, so the aggregated
    // thresholds p v, ζ p v, ζ² p v with p v = d / 1.5 straddle d only when ζ² > 1.5
    let n = 1000;
    let mut model = flat_model(0.0, n);
    model.drift_b = 1.0;
    let d = model.dt();
    let spec = EstimatorSpec::new(
        "stage1",
        EstimatorKind::Practical,
        1,
        EstimatorConfig {
            threshold: ThresholdRule::Fixed { v: 2.0 * d / 1.5 },
            ..EstimatorConfig::default()
        }
        .with_debias(&[1.5], &[0.5]),
    );
    let config = ExperimentConfig {
        model,
        estimators: vec![spec],
        n_paths: 3,
        master_seed: 1,
        tau_grid: TauGridRule::default(),
        eps_truth: DEFAULT_EPS_TRUTH,
    };
    let grid = TuningGrid {
        zeta: vec![1.1, 1.9],
        p: vec![0.5],
        lambda: vec![1.5],
    };
    let r = grid_search(&config, "stage1", &grid, 3, false, 1).unwrap();
    let guarded = r.surface.iter().find(|g| g.tuning.zeta == [1.1]).unwrap();
    assert_eq!(guarded.guarded_paths, 3);
    assert_eq!(r.best.zeta, vec![1.9]);
}

#[test]
fn unknown_estimator_name_is_an_error() {
    let config = small_liu(2, 1);
    assert!(grid_search(&config, "nope", &TuningGrid::standard(), 2, false, 1).is_err());
}
