use std::path::{Path, PathBuf};
use std::process::Command;

use derl::autodiff::DerivOrder;
use derl::eval::MetricsReport;
use derl::losses::{CollocationSet, Method, Region};
use derl::problems::{AnalyticModel, ProblemName, ProblemSpec};
use derl_cli::config::{self, LoadOptions};
use derl_cli::data::generate;
use derl_cli::{report, runner, CliError};
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled(name: &str) -> PathBuf {
    configs_dir().join(name)
}

fn load_with(name: &str, overrides: &[(&str, &str)]) -> Result<config::ExperimentConfig, CliError> {
    let opts = LoadOptions {
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        ..LoadOptions::default()
    };
    config::load(bundled(name), &opts)
}

fn schema_path(r: Result<config::ExperimentConfig, CliError>) -> String {
    match r {
        Err(CliError::Schema { path, .. }) => path,
        other => panic!("expected a schema error, got {other:?}"),
    }
}

fn derl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_derl"))
}

#[test]
fn every_bundled_config_validates_at_both_scales() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        for full in [false, true] {
            let opts = LoadOptions {
                full,
                ..LoadOptions::default()
            };
            config::load(&path, &opts).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn full_table_raises_the_budget() {
    let desk = load_with("kdv_transfer.toml", &[]).unwrap();
    let full = config::load(
        bundled("kdv_transfer.toml"),
        &LoadOptions {
            full: true,
            ..LoadOptions::default()
        },
    )
    .unwrap();
    let steps = |c: &config::ExperimentConfig| c.transfer_plan().unwrap().total_steps();
    assert_eq!(steps(&desk), 10_000);
    assert_eq!(steps(&full), 100_000);
    assert_eq!(desk.model, full.model);
}

#[test]
fn validation_names_the_offending_field() {
    assert_eq!(
        schema_path(load_with("allen_cahn_derl.toml", &[("data.derivative_source", "\"none\"")])),
        "data.derivative_source"
    );
    assert_eq!(
        schema_path(load_with("allen_cahn_empirical.toml", &[("data.h", "-1.0")])),
        "data.h"
    );
    let text = std::fs::read_to_string(bundled("allen_cahn_empirical.toml"))
        .unwrap()
        .replace("h = 1e-3\n", "");
    let cfg = config::parse(&text, &LoadOptions::default()).unwrap();
    assert_eq!(cfg.data.step(), 1e-3);
    assert_eq!(
        schema_path(load_with("kdv_transfer.toml", &[("loss.method", "\"DERL\"")])),
        "loss.method"
    );
    assert_eq!(
        schema_path(load_with("allen_cahn_derl.toml", &[("model.layer_dims", "[3, 10, 1]")])),
        "model.layer_dims"
    );
    assert_eq!(schema_path(load_with("allen_cahn_derl.toml", &[("spec_version", "7")])), "spec_version");
    assert_eq!(schema_path(load_with("allen_cahn_derl.toml", &[("train.lrr", "0.1")])), "train.lrr");
    assert_eq!(
        schema_path(load_with("allen_cahn_derl.toml", &[("train.optimizer", "\"sgd\"")])),
        "train.optimizer"
    );
    assert_eq!(
        schema_path(load_with("pendulum_derl.toml", &[("data.derivative_source", "\"analytic\"")])),
        "data.derivative_source"
    );
    assert_eq!(
        schema_path(load_with("allen_cahn_derl.toml", &[("data.derivative_source", "\"solver\"")])),
        "data.derivative_source"
    );
    assert_eq!(
        schema_path(load_with("pendulum_derl.toml", &[("loss.method", "\"HESL\"")])),
        "data.derivative_source"
    );
    assert_eq!(
        schema_path(load_with("allen_cahn_derl.toml", &[("train.noise_sigma", "0.1")])),
        "train.noise_sigma"
    );
    assert_eq!(
        schema_path(load_with(
            "kdv_transfer.toml",
            &[("transfer.stages", "[{ region = { kind = \"box\", lower = [0.0, -1.0], upper = [0.5, 1.0] }, steps = 1 }, { region = { kind = \"box\", lower = [0.4, -1.0], upper = [1.0, 1.0] }, steps = 1 }]")]
        )),
        "transfer.stages[1].region"
    );
}

#[test]
fn schema_violation_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = derl()
        .args(["run", "--config"])
        .arg(bundled("allen_cahn_derl.toml"))
        .arg("--out")
        .arg(dir.path())
        .env("DERL__DATA__DERIVATIVE_SOURCE", "none")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.derivative_source"), "{err}");
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn training_failure_exits_with_status_one_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = derl()
        .args(["train", "--config"])
        .arg(bundled("allen_cahn_derl.toml"))
        .arg("--out")
        .arg(dir.path())
        .env("DERL__TRAIN__OPTIMIZER", "\"adam\"")
        .env("DERL__TRAIN__EPOCHS", "3")
        .env("DERL__TRAIN__LR", "1e300")
        .env("DERL__DATA__N_COLLOCATION", "50")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `train`"), "{err}");
    // the last finite network is kept
    assert!(dir.path().join("net.json").exists());
}

#[test]
fn env_overrides_reach_nested_keys() {
    let vars = [
        ("DERL__TRAIN__LBFGS_ITERS", "7"),
        ("DERL__DATA__SOLVER__NX", "64"),
        ("OTHER__TRAIN__LR", "5"),
    ]
    .map(|(k, v)| (k.to_string(), v.to_string()));
    let cfg = config::load(bundled("allen_cahn_derl.toml"), &LoadOptions::default().with_vars(vars)).unwrap();
    assert_eq!(cfg.train.lbfgs_iters, 7);
    assert_eq!(cfg.data.solver.nx, 64);
    assert_eq!(cfg.train.lr, 1e-3);
}

#[test]
fn allen_cahn_boundary_targets_are_exactly_zero() {
    let cfg = load_with("allen_cahn_derl.toml", &[]).unwrap();
    let d = generate(&cfg).unwrap();
    assert_eq!(d.interior.len(), 1000);
    assert_eq!(d.boundary.len(), 251);
    assert!(d.boundary.values.as_ref().unwrap().iter().all(|&v| v == 0.0));
    assert!(d.interior.jacobians.is_some());
}

fn sorted_unique(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    v
}

#[test]
fn continuity_downsampling_by_ten_gives_tenth_spacing() {
    let cfg = load_with(
        "continuity_derl.toml",
        &[
            ("data.solver", "{ cells = 300, dt = 0.001, out_every = 1, downsample = 10, t_end = 0.05 }"),
            ("data.n_collocation", "1000000"),
        ],
    )
    .unwrap();
    let d = generate(&cfg).unwrap();
    let pts = &d.interior.points;
    let ts = sorted_unique(pts.column(0).iter().copied());
    let xs = sorted_unique(pts.column(1).iter().copied());
    assert_eq!(ts.len(), 6);
    assert_eq!(xs.len(), 30);
    for w in ts.windows(2) {
        assert!((w[1] - w[0] - 0.01).abs() < 1e-9);
    }
    for w in xs.windows(2) {
        assert!((w[1] - w[0] - 0.1).abs() < 1e-9);
    }
    assert_eq!(d.interior.len(), 6 * 30 * 30);
    assert_eq!(d.interior.meta.derivative_source.as_deref(), Some("solver"));
}

#[test]
fn empirical_forward_jacobians_match_analytic() {
    let cfg = load_with("allen_cahn_empirical.toml", &[]).unwrap();
    let d = generate(&cfg).unwrap();
    let p = ProblemSpec::new(ProblemName::AllenCahn);
    let exact = CollocationSet::from_model(
        &AnalyticModel::new(&p).unwrap(),
        d.interior.points.clone(),
        Region::Interior,
        DerivOrder::First,
    )
    .unwrap();
    let (a, b) = (d.interior.jacobians.unwrap(), exact.jacobians.unwrap());
    let worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 5e-3, "{worst}");
    assert!(worst > 0.0);
    assert_eq!(d.interior.meta.h, Some(1e-3));
}

#[test]
fn pendulum_solver_sensitivities_match_differences() {
    let cfg = load_with("pendulum_derl.toml", &[("data.n_collocation", "20"), ("data.test_grid", "[3, 2, 2]")]).unwrap();
    let solver = generate(&cfg).unwrap().interior;
    let cfg = load_with(
        "pendulum_derl.toml",
        &[
            ("data.n_collocation", "20"),
            ("data.test_grid", "[3, 2, 2]"),
            ("data.derivative_source", "\"empirical\""),
            ("data.h", "1e-5"),
        ],
    )
    .unwrap();
    let fd = generate(&cfg).unwrap().interior;
    assert_eq!(solver.points, fd.points);
    let (a, b) = (solver.jacobians.unwrap(), fd.jacobians.unwrap());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn kdv_solver_targets_start_from_the_initial_profile() {
    let cfg = load_with("kdv_transfer.toml", &[("data.n_collocation", "200")]).unwrap();
    let d = generate(&cfg).unwrap();
    let init = d.initial.unwrap();
    assert!(init.points.column(0).iter().all(|&t| t == 0.0));
    let test = &d.test;
    assert_eq!(test.shape(), vec![101, 128]);
    for (j, x) in test.axes[1].iter().enumerate() {
        assert!((test.data[j] - (std::f64::consts::PI * x).cos()).abs() < 1e-12);
    }
}

fn quick(name: &str) -> config::ExperimentConfig {
    load_with(
        name,
        &[("train.lbfgs_iters", "5"), ("data.n_collocation", "200"), ("data.test_grid", "[21, 21]")],
    )
    .unwrap()
}

#[test]
fn reruns_reproduce_metrics_bitwise_and_evaluate_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick("allen_cahn_derl.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    runner::train_run(&cfg, &a).unwrap();
    runner::train_run(&cfg, &b).unwrap();
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("metrics.json")), read(b.join("metrics.json")));
    assert_eq!(read(a.join("net.json")), read(b.join("net.json")));
    assert_eq!(read(a.join("data/interior.csv")), read(b.join("data/interior.csv")));

    let manifest: serde_json::Value = serde_json::from_slice(&read(a.join("manifest.json"))).unwrap();
    let arts = manifest["artifacts"].as_object().unwrap();
    for f in ["metrics.json", "net.json", "history.csv", "data/interior.csv", "error_field.bin"] {
        assert_eq!(arts[f].as_str().unwrap(), runner::sha256_file(&a.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest["method"], "DERL");

    let e = dir.path().join("e");
    runner::evaluate_run(&cfg, &a.join("net.json"), &e).unwrap();
    assert_eq!(read(a.join("metrics.json")), read(e.join("metrics.json")));

    let d = runner::diff_runs(&a, &e, &dir.path().join("diff/field")).unwrap();
    assert!(d.data.iter().all(|&v| v == 0.0));
}

#[test]
fn other_seed_changes_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick("allen_cahn_derl.toml");
    let a = runner::train_run(&cfg, &dir.path().join("a")).unwrap();
    cfg.seed = 1;
    let b = runner::train_run(&cfg, &dir.path().join("b")).unwrap();
    assert_ne!(a.l2_u, b.l2_u);
}

#[test]
fn report_orders_rows_by_method_and_flags_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for name in ["allen_cahn_pinn.toml", "allen_cahn_sob.toml", "allen_cahn_outl.toml", "allen_cahn_derl.toml"] {
        let d = dir.path().join(name.trim_end_matches(".toml"));
        runner::train_run(&quick(name), &d).unwrap();
        dirs.push(d);
    }
    let t = report::build(&dirs[..1]).unwrap();
    assert_eq!(t.rows.len(), 1);

    let t = report::build(&dirs).unwrap();
    let methods: Vec<Method> = t.rows.iter().map(|r| r.method.unwrap()).collect();
    assert_eq!(methods, vec![Method::Derl, Method::Outl, Method::Sob, Method::Pinn]);
    assert_eq!(t.columns, vec!["l2_u", "residual"]);
    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("run,problem,method,seed,status,l2_u,residual\n"));
    assert!(!t.has_missing());

    let mut with_missing = dirs.clone();
    with_missing.push(dir.path().join("nowhere"));
    let t = report::build(&with_missing).unwrap();
    assert!(t.has_missing());
    let out = derl().arg("report").args(&with_missing).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
}

#[test]
fn report_rejects_mixed_problems() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("ac");
    runner::train_run(&quick("allen_cahn_derl.toml"), &a).unwrap();
    let k = dir.path().join("kov");
    let cfg = load_with(
        "kovasznay_derl.toml",
        &[("train.lbfgs_iters", "2"), ("data.n_collocation", "50"), ("data.test_grid", "[5, 5]")],
    )
    .unwrap();
    runner::train_run(&cfg, &k).unwrap();
    match report::build(&[a.clone(), k.clone()]) {
        Err(e @ CliError::Rejected(_)) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("kovasznay"));
        }
        other => panic!("{other:?}"),
    }
    let out = derl().arg("report").arg(&a).arg(&k).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parameter_transfer_through_the_driver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_with(
        "allen_cahn_1p_transfer.toml",
        &[
            ("transfer.n_interior", "40"),
            ("data.test_grid", "[9, 9, 5]"),
            ("transfer.stages", "[{ region = { kind = \"params\", values = [[0.5]] }, steps = 3 }, { region = { kind = \"params\", values = [[2.0]] }, steps = 3 }]"),
        ],
    )
    .unwrap();
    let out = runner::transfer_run(&cfg, dir.path()).unwrap();
    assert_eq!(out.variants.len(), 3);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    for v in ["derl", "replay", "none"] {
        assert_eq!(summary["variants"][v].as_array().unwrap().len(), 2, "{v}");
    }
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("derl/stage2/net.json").exists());
}

#[test]
fn several_seeds_fan_out_to_worker_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out = derl()
        .args(["train", "--seed", "3,4", "--jobs", "2", "--config"])
        .arg(bundled("allen_cahn_outl.toml"))
        .arg("--out")
        .arg(dir.path())
        .env("DERL__TRAIN__LBFGS_ITERS", "2")
        .env("DERL__DATA__N_COLLOCATION", "40")
        .env("DERL__DATA__TEST_GRID", "[5, 5]")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [3, 4] {
        let m = MetricsReport::load(dir.path().join(format!("seed{s}/metrics.json"))).unwrap();
        assert_eq!(m.grid.n_points, 25);
    }
    let t = report::build(&[dir.path().join("seed4"), dir.path().join("seed3")]).unwrap();
    assert_eq!(t.rows[0].seed, Some(3));
}

fn fake_run(dir: &Path, method: Method, seed: u64, l2: f64) {
    std::fs::create_dir_all(dir).unwrap();
    let m = serde_json::json!({ "method": method, "seed": seed });
    std::fs::write(dir.join("manifest.json"), m.to_string()).unwrap();
    let r = MetricsReport {
        problem: ProblemName::AllenCahn,
        units: derl::eval::UNITS.into(),
        l2_u: l2,
        l2_du: None,
        residual: 2.0 * l2,
        residual_norms: vec![2.0 * l2],
        vorticity_err: None,
        g_residual: None,
        field_err_t0: None,
        grid: derl::eval::GridDescriptor {
            n_points: 1,
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            counts: None,
        },
    };
    r.save(dir.join("metrics.json")).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn report_order_ignores_argument_order(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle()) {
        let dir = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = perm.iter().map(|&i| {
            let d = dir.path().join(format!("r{i}"));
            fake_run(&d, Method::ALL[i], i as u64, i as f64 + 1.0);
            d
        }).collect();
        let t = report::build(&dirs).unwrap();
        let got: Vec<Method> = t.rows.iter().map(|r| r.method.unwrap()).collect();
        prop_assert_eq!(got, Method::ALL.to_vec());
    }

    #[test]
    fn numeric_overrides_round_trip(lr in 1e-8f64..10.0, iters in 0usize..100_000) {
        let opts = LoadOptions {
            overrides: vec![
                ("train.lr".into(), format!("{lr:?}")),
                ("train.lbfgs_iters".into(), iters.to_string()),
            ],
            ..LoadOptions::default()
        };
        let cfg = config::load(bundled("allen_cahn_derl.toml"), &opts).unwrap();
        prop_assert_eq!(cfg.train.lr, lr);
        prop_assert_eq!(cfg.train.lbfgs_iters, iters);
        let again = config::parse(&cfg.to_toml(), &LoadOptions::default()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}
