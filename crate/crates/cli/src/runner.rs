//! Verbs that produce run directories.
//!
//! A training run directory holds `config.toml` (resolved), `data/`,
//! `net.json`, `history.csv`, `metrics.json`, `error_field.{json,bin}` and
//! `manifest.json` with SHA-256 hashes of everything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use derl::autodiff::Network;
use derl::eval::{diff_fields, error_field, evaluate_grid, MetricsReport};
use derl::losses::composite_objective;
use derl::solvers::GridField;
use derl::train::train;
use derl::transfer::{run_transfer_pipeline, StageReport, TransferOutcome};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SPEC_VERSION};
use crate::data::{generate, test_grid, transfer_test_set, Dataset};
use crate::{at, CliError};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `manifest.json` listing `files` (relative to `dir`) with hashes.
fn write_manifest(dir: &Path, verb: &str, cfg: &ExperimentConfig, files: &[String]) -> Result<(), CliError> {
    let mut artifacts = BTreeMap::new();
    for f in files {
        artifacts.insert(f.clone(), sha256_file(&dir.join(f))?);
    }
    let manifest = serde_json::json!({
        "tool": format!("derl {}", env!("CARGO_PKG_VERSION")),
        "spec_version": SPEC_VERSION,
        "verb": verb,
        "seed": cfg.seed,
        "method": cfg.loss.method,
        "problem": cfg.problem_spec().manifest(),
        "config": cfg,
        "artifacts": artifacts,
    });
    write(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n"),
    )
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<String, CliError> {
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok("config.toml".into())
}

/// Samples the datasets and writes them to `<out>/data`.
pub fn generate_run(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset, CliError> {
    let data = generate(cfg).map_err(at("generate"))?;
    create_dir(&out.join("data"))?;
    let mut files = vec![save_config(out, cfg)?];
    files.extend(
        data.save(&out.join("data"))
            .map_err(at("generate"))?
            .into_iter()
            .map(|f| format!("data/{f}")),
    );
    write_manifest(out, "generate", cfg, &files)?;
    Ok(data)
}

/// Evaluation outputs of a network against a reference grid.
fn write_evaluation(
    cfg: &ExperimentConfig,
    net: &Network,
    test: &GridField,
    out: &Path,
) -> Result<(MetricsReport, Vec<String>), CliError> {
    let problem = cfg.problem_spec();
    let report = evaluate_grid(&problem, net, test).map_err(at("evaluate"))?;
    report.save(out.join("metrics.json")).map_err(at("evaluate"))?;
    let field = error_field(&problem, net, test).map_err(at("evaluate"))?;
    field.save(out.join("error_field")).map_err(at("evaluate"))?;
    Ok((
        report,
        vec!["metrics.json".into(), "error_field.json".into(), "error_field.bin".into()],
    ))
}

/// generate, train, evaluate.
pub fn train_run(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport, CliError> {
    create_dir(out)?;
    let data = generate(cfg).map_err(at("generate"))?;
    create_dir(&out.join("data"))?;
    let mut files = vec![save_config(out, cfg)?];
    files.extend(
        data.save(&out.join("data"))
            .map_err(at("generate"))?
            .into_iter()
            .map(|f| format!("data/{f}")),
    );

    let problem = cfg.problem_spec();
    let objective = composite_objective(&cfg.loss, &problem, &data.interior, &data.boundary, data.initial.as_ref())
        .map_err(at("loss"))?;
    let net = Network::init(&cfg.model.layer_dims, cfg.seed).map_err(at("init"))?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let (net, history) = match train(&net, &objective, &tc) {
        Ok(r) => r,
        Err(e) => {
            if let derl::Error::Aborted { last_good, .. } = &e {
                last_good.save(out.join("net.json")).map_err(at("train"))?;
            }
            return Err(at("train")(e));
        }
    };
    net.save(out.join("net.json")).map_err(at("train"))?;
    history.write_csv(out.join("history.csv")).map_err(at("train"))?;
    files.push("net.json".into());
    files.push("history.csv".into());

    let (report, eval_files) = write_evaluation(cfg, &net, &data.test, out)?;
    files.extend(eval_files);
    write_manifest(out, "train", cfg, &files)?;
    Ok(report)
}

/// Metrics of a saved network on the config's test grid.
pub fn evaluate_run(cfg: &ExperimentConfig, net_path: &Path, out: &Path) -> Result<MetricsReport, CliError> {
    create_dir(out)?;
    let net = Network::load(net_path).map_err(at("load"))?;
    if net.layer_dims() != cfg.model.layer_dims.as_slice() {
        return Err(CliError::schema(
            "model.layer_dims",
            format!("checkpoint has {:?}, config {:?}", net.layer_dims(), cfg.model.layer_dims),
        ));
    }
    let test = test_grid(cfg).map_err(at("generate"))?;
    let mut files = vec![save_config(out, cfg)?];
    let (report, eval_files) = write_evaluation(cfg, &net, &test, out)?;
    files.extend(eval_files);
    write_manifest(out, "evaluate", cfg, &files)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct TransferSummary<'a> {
    units: &'static str,
    variants: BTreeMap<&'a str, &'a [StageReport]>,
}

/// The staged transfer pipeline; per-stage artifacts come from the library,
/// plus a top-level `metrics.json` with every stage report.
pub fn transfer_run(cfg: &ExperimentConfig, out: &Path) -> Result<TransferOutcome, CliError> {
    let plan = cfg
        .transfer_plan()
        .ok_or_else(|| CliError::schema("transfer", "the config has no transfer block"))?;
    create_dir(out)?;
    save_config(out, cfg)?;
    let problem = cfg.problem_spec();
    let test = transfer_test_set(cfg).map_err(at("generate"))?;
    let outcome = run_transfer_pipeline(&problem, &plan, &test, Some(out)).map_err(at("transfer"))?;
    let mut variants = BTreeMap::new();
    for v in &outcome.variants {
        variants.insert(v.name.as_str(), v.reports.as_slice());
    }
    if let Some(v) = &outcome.pinn_full {
        variants.insert("pinn_full", v.reports.as_slice());
    }
    let summary = TransferSummary {
        units: derl::eval::UNITS,
        variants,
    };
    write(
        &out.join("metrics.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n"),
    )?;
    Ok(outcome)
}

/// What `run` produced.
#[derive(Debug)]
pub enum RunResult {
    Train(MetricsReport),
    Transfer(TransferOutcome),
}

/// Training or transfer, depending on whether the config has a transfer block.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult, CliError> {
    if cfg.transfer.is_some() {
        transfer_run(cfg, out).map(RunResult::Transfer)
    } else {
        train_run(cfg, out).map(RunResult::Train)
    }
}

/// Error field of run `a` minus that of run `b`, written to `out`.
pub fn diff_runs(a: &Path, b: &Path, out: &Path) -> Result<GridField, CliError> {
    let load = |dir: &Path| GridField::load(dir.join("error_field")).map_err(at("load"));
    let d = diff_fields(&load(a)?, &load(b)?).map_err(|e| CliError::Rejected(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    d.save(out).map_err(at("diff"))?;
    Ok(d)
}

/// Output directory of a run: `--out`, else the config's `output`, else
/// `runs/<config stem>`.
pub fn output_dir(cfg: &ExperimentConfig, config_path: &Path, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| {
            Path::new("runs").join(config_path.file_stem().unwrap_or_default())
        })
}
