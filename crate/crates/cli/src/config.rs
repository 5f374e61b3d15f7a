//! Experiment configuration: a TOML file with a versioned schema.
//!
//! Layering, last wins: the file, its `[full]` table when full-scale
//! budgets are requested, `DERL__SECTION__KEY` environment overrides, then
//! an explicit seed.

use std::path::{Path, PathBuf};

use derl::losses::{LossSpec, Method};
use derl::problems::{ProblemName, ProblemSpec, Reference};
use derl::solvers::Scheme;
use derl::train::TrainConfig;
use derl::transfer::{Stage, TransferPlan, TransferWeights, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SPEC_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "DERL__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub problem: ProblemBlock,
    #[serde(default)]
    pub data: DataBlock,
    pub model: ModelBlock,
    pub loss: LossSpec,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub name: ProblemName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_over_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_over_m: Option<f64>,
}

impl ProblemBlock {
    pub fn spec(&self) -> ProblemSpec {
        let mut p = ProblemSpec::new(self.name);
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.nu {
            p.nu = v;
        }
        if let Some(v) = self.g_over_l {
            p.g_over_l = v;
        }
        if let Some(v) = self.b_over_m {
            p.b_over_m = v;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeSource {
    /// closed-form solution
    Analytic,
    /// finite differences of sampled values with step `h`
    Empirical,
    /// reference solver output
    Solver,
    /// points only
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub n_collocation: usize,
    /// defaults to `n_collocation / 4 + 1`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_boundary: Option<usize>,
    /// defaults to the boundary count on time-dependent problems
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_initial: Option<usize>,
    pub derivative_source: DerivativeSource,
    /// difference step; [`DEFAULT_H`] when unset
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    pub scheme: Scheme,
    pub noise_sigma: f64,
    /// nodes per axis of the analytic or pendulum test grid
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_grid: Option<Vec<usize>>,
    pub solver: SolverBlock,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            n_collocation: 1000,
            n_boundary: None,
            n_initial: None,
            derivative_source: DerivativeSource::Analytic,
            h: None,
            scheme: Scheme::Forward,
            noise_sigma: 0.0,
            test_grid: None,
            solver: SolverBlock::default(),
        }
    }
}

pub const DEFAULT_H: f64 = 1e-3;

impl DataBlock {
    pub fn step(&self) -> f64 {
        self.h.unwrap_or(DEFAULT_H)
    }

    pub fn n_boundary(&self) -> usize {
        self.n_boundary.unwrap_or(self.n_collocation / 4 + 1)
    }
}

/// Reference solver settings; unused fields are ignored by other problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    /// continuity: cells per spatial axis
    pub cells: usize,
    /// internal time step; problem default when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// continuity: steps between stored snapshots
    pub out_every: usize,
    /// end of the simulated interval; the domain's end time when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// continuity: stride on every axis of the stored grid for training nodes
    pub downsample: usize,
    /// stride on every axis of the stored grid (KdV: space only) for the test grid
    pub test_stride: usize,
    /// KdV: Fourier modes
    pub nx: usize,
    /// KdV: output interval
    pub out_dt: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            cells: 150,
            dt: None,
            out_every: 1,
            t_end: None,
            downsample: 1,
            test_stride: 1,
            nx: 256,
            out_dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub layer_dims: Vec<usize>,
}

/// The transfer plan minus what the rest of the config already fixes
/// (network shape, optimiser, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferBlock {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_interior: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_boundary: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_initial: Option<usize>,
    #[serde(default)]
    pub weights: TransferWeights,
    #[serde(default = "default_replay")]
    pub replay_fraction: f64,
    #[serde(default)]
    pub pinn_full: bool,
}

fn default_replay() -> f64 {
    0.2
}

/// How a config is resolved before deserialisation.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// merge the `[full]` table
    pub full: bool,
    pub seed: Option<u64>,
    /// dotted key paths (`train.lr`) with TOML-literal values
    pub overrides: Vec<(String, String)>,
}

impl LoadOptions {
    /// Adds every `DERL__A__B=v` environment variable as the override `a.b = v`.
    pub fn with_env(self) -> Self {
        self.with_vars(std::env::vars())
    }

    /// [`with_env`](Self::with_env) over an explicit variable list.
    pub fn with_vars(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
            })
            .collect();
        found.sort();
        self.overrides.extend(found);
        self
    }
}

pub fn load(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<ExperimentConfig, CliError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, opts)
}

pub fn parse(text: &str, opts: &LoadOptions) -> Result<ExperimentConfig, CliError> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::schema("<document>", e.message().to_string()))?;
    let full = table.remove("full");
    if opts.full {
        match full {
            Some(Value::Table(f)) => merge(&mut table, f),
            Some(_) => return Err(CliError::schema("full", "must be a table")),
            None => {}
        }
    }
    for (key, raw) in &opts.overrides {
        set_path(&mut table, key, literal(raw))?;
    }
    if let Some(seed) = opts.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::schema("seed", "does not fit a TOML integer"))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::schema(if path == "." { "<document>".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive table merge; non-table values in `over` replace.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::schema(parts[..=i].join("."), "override descends into a non-table value")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn cfg_err(e: derl::Error) -> CliError {
    crate::at("validate")(e)
}

impl ExperimentConfig {
    pub fn problem_spec(&self) -> ProblemSpec {
        self.problem.spec()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.spec_version != SPEC_VERSION {
            return Err(CliError::schema(
                "spec_version",
                format!("unsupported version {}, expected {SPEC_VERSION}", self.spec_version),
            ));
        }
        let problem = self.problem_spec();
        problem.validate().map_err(cfg_err)?;

        let dims = &self.model.layer_dims;
        if dims.len() < 2
            || dims.contains(&0)
            || dims[0] != problem.input_dim()
            || dims[dims.len() - 1] != problem.output_dim()
        {
            return Err(CliError::schema(
                "model.layer_dims",
                format!(
                    "{} needs {} inputs, {} outputs and nonzero widths, got {dims:?}",
                    problem.name,
                    problem.input_dim(),
                    problem.output_dim()
                ),
            ));
        }

        self.loss.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if self.train.noise_sigma != 0.0 {
            return Err(CliError::schema("train.noise_sigma", "set the noise level as data.noise_sigma"));
        }
        if self.train.fd_step_h.is_some() {
            return Err(CliError::schema("train.fd_step_h", "set the difference step as data.h"));
        }
        if self.train.seed != 0 {
            return Err(CliError::schema("train.seed", "the top-level seed drives every random stream"));
        }
        if let Some(t) = &self.transfer {
            if self.loss.method != Method::Pinn {
                return Err(CliError::schema(
                    "loss.method",
                    format!("transfer stages train a PINN, got {}", self.loss.method),
                ));
            }
            if let Some(n) = t.n_initial {
                if n > 0 && !problem.is_time_dependent() {
                    return Err(CliError::schema("transfer.n_initial", "problem has no time axis"));
                }
            }
            self.transfer_plan().expect("block present").validate(&problem).map_err(cfg_err)?;
        }
        self.validate_data(&problem)?;

        Ok(())
    }

    fn validate_data(&self, problem: &ProblemSpec) -> Result<(), CliError> {
        let d = &self.data;
        let needs = self.loss.method.needs();
        let wants_targets = needs.values || needs.jacobians || needs.hessians;
        if d.n_collocation == 0 {
            return Err(CliError::schema("data.n_collocation", "must be positive"));
        }
        match d.derivative_source {
            DerivativeSource::None if wants_targets => {
                return Err(CliError::schema(
                    "data.derivative_source",
                    format!(
                        "{} needs {} targets but the source is `none`",
                        self.loss.method,
                        if needs.jacobians {
                            "jacobian"
                        } else if needs.hessians {
                            "hessian"
                        } else {
                            "value"
                        }
                    ),
                ));
            }
            DerivativeSource::Analytic if problem.reference != Reference::Analytic && wants_targets => {
                return Err(CliError::schema(
                    "data.derivative_source",
                    format!("{} has no closed form; use `solver` or `empirical`", problem.name),
                ));
            }
            DerivativeSource::Solver if problem.reference != Reference::Solver => {
                return Err(CliError::schema(
                    "data.derivative_source",
                    format!("{} has no reference solver; use `analytic` or `empirical`", problem.name),
                ));
            }
            DerivativeSource::Empirical | DerivativeSource::Solver if needs.hessians => {
                return Err(CliError::schema(
                    "data.derivative_source",
                    format!("{} needs hessian targets, which only the analytic source provides", self.loss.method),
                ));
            }
            _ => {}
        }
        if let Some(h) = d.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::schema("data.h", format!("step {h} must be positive")));
            }
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(CliError::schema("data.noise_sigma", "must be finite and nonnegative"));
        }
        if d.n_initial.is_some_and(|n| n > 0) && !problem.is_time_dependent() {
            return Err(CliError::schema("data.n_initial", "problem has no time axis"));
        }
        if let Some(g) = &d.test_grid {
            if g.len() != problem.input_dim() || g.iter().any(|&c| c < 2) {
                return Err(CliError::schema(
                    "data.test_grid",
                    format!("needs {} counts of at least 2", problem.input_dim()),
                ));
            }
        }
        let s = &d.solver;
        for (v, path) in [
            (s.out_every, "data.solver.out_every"),
            (s.downsample, "data.solver.downsample"),
            (s.test_stride, "data.solver.test_stride"),
            (s.cells, "data.solver.cells"),
        ] {
            if v == 0 {
                return Err(CliError::schema(path, "must be at least 1"));
            }
        }
        if let Some(dt) = s.dt {
            if !(dt > 0.0) {
                return Err(CliError::schema("data.solver.dt", "must be positive"));
            }
        }
        if let Some(t) = s.t_end {
            let ta = problem.domain.time_axis;
            if !(t > 0.0) || ta.is_some_and(|a| t > problem.domain.upper[a]) {
                return Err(CliError::schema("data.solver.t_end", "must lie inside the time domain"));
            }
        }
        Ok(())
    }

    /// The full transfer plan, when the config has a transfer block.
    pub fn transfer_plan(&self) -> Option<TransferPlan> {
        let t = self.transfer.as_ref()?;
        let n_interior = t.n_interior.unwrap_or(self.data.n_collocation);
        let n_boundary = t.n_boundary.unwrap_or(n_interior / 4 + 1);
        let time_dependent = self.problem_spec().is_time_dependent();
        Some(TransferPlan {
            stages: t.stages.clone(),
            variants: t.variants.clone(),
            layer_dims: self.model.layer_dims.clone(),
            n_interior,
            n_boundary,
            n_initial: t.n_initial.unwrap_or(if time_dependent { n_boundary } else { 0 }),
            weights: t.weights,
            replay_fraction: t.replay_fraction,
            train: self.train.clone(),
            pinn_full: t.pinn_full,
            seed: self.seed,
        })
    }

    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
