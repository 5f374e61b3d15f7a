//! Staged knowledge transfer: teacher snapshots, the student objective and
//! the multi-stage pipelines with their baselines.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{DerivOrder, Network};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{
    boundary_block, initial_block, residual_block, supervised_terms, Category, CollocationSet, CompositeObjective,
    Method, Region,
};
use crate::problems::{BoundaryKind, Domain, ProblemSpec};
use crate::train::{train, History, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: usize,
    pub net_hash: String,
}

/// Frozen teacher evaluations on the old collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    pub points: Array2<f64>,
    pub values: Array2<f64>,
    pub jacobians: Array3<f64>,
    pub hessians: Option<Array4<f64>>,
    pub provenance: Provenance,
}

impl TeacherSnapshot {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.values.nrows() != n || self.jacobians.dim().0 != n {
            return Err(Error::Shape(format!("snapshot arrays disagree with {n} points")));
        }
        if let Some(h) = &self.hessians {
            if h.dim().0 != n {
                return Err(Error::Shape(format!("snapshot hessians disagree with {n} points")));
            }
        }
        if self.provenance.net_hash.is_empty() {
            return Err(Error::Specification("snapshot provenance".into()));
        }
        Ok(())
    }

    /// The snapshot as supervised targets.
    pub fn to_set(&self) -> CollocationSet {
        let mut set = CollocationSet::new(self.points.clone(), Region::Interior);
        set.values = Some(self.values.clone());
        set.jacobians = Some(self.jacobians.clone());
        set.hessians = self.hessians.clone();
        set.meta.derivative_source = Some(format!(
            "teacher stage {} {}",
            self.provenance.stage, self.provenance.net_hash
        ));
        set
    }

    /// Writes `<path>` (collocation CSV with its manifest) and
    /// `<path>.provenance.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_set().save(path)?;
        let prov = provenance_path(path);
        let text = serde_json::to_string_pretty(&self.provenance).expect("provenance serialises");
        std::fs::write(&prov, text + "\n").map_err(|e| Error::io(&prov, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let set = CollocationSet::load(path)?;
        let prov = provenance_path(path);
        let text = std::fs::read_to_string(&prov).map_err(|e| Error::io(&prov, e))?;
        let provenance = serde_json::from_str(&text).map_err(|e| Error::format(&prov, e.to_string()))?;
        let snap = TeacherSnapshot {
            points: set.points,
            values: set.values.ok_or_else(|| Error::Specification("values".into()))?,
            jacobians: set.jacobians.ok_or_else(|| Error::Specification("jacobians".into()))?,
            hessians: set.hessians,
            provenance,
        };
        snap.validate()?;
        Ok(snap)
    }
}

fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Evaluates `net` on `points`. Values and jacobians are always stored;
/// `2` in `orders` adds hessians.
pub fn snapshot_teacher(net: &Network, points: &Array2<f64>, orders: &[usize], stage: usize) -> Result<TeacherSnapshot> {
    if let Some(o) = orders.iter().find(|&&o| o > 2) {
        return Err(Error::config("transfer.snapshot_orders", format!("order {o} is not in {{0, 1, 2}}")));
    }
    let order = if orders.contains(&2) {
        DerivOrder::Second
    } else {
        DerivOrder::First
    };
    let set = CollocationSet::from_model(net, points.clone(), Region::Interior, order)?;
    Ok(TeacherSnapshot {
        points: points.clone(),
        values: set.values.expect("values"),
        jacobians: set.jacobians.expect("jacobians"),
        hessians: set.hessians,
        provenance: Provenance {
            stage,
            net_hash: net.hash(),
        },
    })
}

/// How the old region enters the student objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distill {
    #[serde(rename = "DERL")]
    Derl,
    #[serde(rename = "OUTL")]
    Outl,
    #[serde(rename = "SOB")]
    Sob,
    #[serde(rename = "HESL")]
    Hesl,
    #[serde(rename = "DER_HESL")]
    DerHesl,
    #[serde(rename = "SOB_HES")]
    SobHes,
    #[serde(rename = "none")]
    None,
    #[serde(rename = "replay")]
    Replay,
}

impl Distill {
    pub const ALL: [Distill; 8] = [
        Distill::Derl,
        Distill::Outl,
        Distill::Sob,
        Distill::Hesl,
        Distill::DerHesl,
        Distill::SobHes,
        Distill::None,
        Distill::Replay,
    ];

    /// The supervised method matching the distillation term.
    pub fn method(self) -> Option<Method> {
        match self {
            Distill::Derl => Some(Method::Derl),
            Distill::Outl => Some(Method::Outl),
            Distill::Sob => Some(Method::Sob),
            Distill::Hesl => Some(Method::Hesl),
            Distill::DerHesl => Some(Method::DerHesl),
            Distill::SobHes => Some(Method::SobHes),
            Distill::None | Distill::Replay => None,
        }
    }

    pub fn needs_hessians(self) -> bool {
        self.method().is_some_and(|m| m.needs().hessians)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentMode {
    FromScratch,
    Continual,
}

/// One stage's new region: a box over all inputs, or a set of parameter
/// tuples (one value per parameter axis) crossed with the spatial domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageRegion {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Params { values: Vec<Vec<f64>> },
}

impl StageRegion {
    pub fn contains(&self, problem: &ProblemSpec, x: &[f64]) -> bool {
        match self {
            StageRegion::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (lo, hi))| *v >= lo - 1e-12 && *v <= hi + 1e-12),
            StageRegion::Params { values } => values.iter().any(|tuple| {
                problem
                    .domain
                    .param_axes
                    .iter()
                    .zip(tuple)
                    .all(|(&a, v)| (x[a] - v).abs() <= 1e-12)
            }),
        }
    }

    fn validate(&self, problem: &ProblemSpec, path: &str) -> Result<()> {
        let dom = &problem.domain;
        match self {
            StageRegion::Box { lower, upper } => {
                if lower.len() != dom.dim() || upper.len() != dom.dim() {
                    return Err(Error::config(path, format!("box needs {} bounds per side", dom.dim())));
                }
                for i in 0..dom.dim() {
                    if !(lower[i] < upper[i]) || !dom.contains(lower) || !dom.contains(upper) {
                        return Err(Error::config(path, "box must be nonempty and inside the problem domain"));
                    }
                }
            }
            StageRegion::Params { values } => {
                let k = dom.param_axes.len();
                if k == 0 {
                    return Err(Error::config(path, format!("{} has no parameter axes", problem.name)));
                }
                if values.is_empty() {
                    return Err(Error::config(path, "empty parameter set"));
                }
                for t in values {
                    let ok = t.len() == k
                        && dom
                            .param_axes
                            .iter()
                            .zip(t)
                            .all(|(&a, v)| *v >= dom.lower[a] && *v <= dom.upper[a]);
                    if !ok {
                        return Err(Error::config(path, format!("parameter tuple {t:?} is malformed or out of range")));
                    }
                }
            }
        }
        Ok(())
    }

    fn overlaps(&self, other: &StageRegion) -> bool {
        match (self, other) {
            (StageRegion::Box { lower: a0, upper: a1 }, StageRegion::Box { lower: b0, upper: b1 }) => {
                (0..a0.len()).all(|i| a0[i].max(b0[i]) < a1[i].min(b1[i]))
            }
            (StageRegion::Params { values: a }, StageRegion::Params { values: b }) => a.iter().any(|t| b.contains(t)),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub region: StageRegion,
    /// Adam steps or L-BFGS iterations, per the plan's optimiser
    pub steps: usize,
}

/// One student pipeline run over stages 2 and later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub distill: Distill,
    pub student_mode: StudentMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferWeights {
    #[serde(default = "one")]
    pub pde: f64,
    #[serde(default = "one")]
    pub bc: f64,
    #[serde(default = "one")]
    pub ic: f64,
    #[serde(default = "one")]
    pub distill: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TransferWeights {
    fn default() -> Self {
        TransferWeights {
            pde: 1.0,
            bc: 1.0,
            ic: 1.0,
            distill: 1.0,
        }
    }
}

fn default_replay() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPlan {
    pub stages: Vec<Stage>,
    pub variants: Vec<Variant>,
    pub layer_dims: Vec<usize>,
    /// interior points per stage (per parameter tuple for parameter stages)
    pub n_interior: usize,
    pub n_boundary: usize,
    #[serde(default)]
    pub n_initial: usize,
    #[serde(default)]
    pub weights: TransferWeights,
    #[serde(default = "default_replay")]
    pub replay_fraction: f64,
    /// optimiser settings shared by every stage; the budget comes from `steps`
    pub train: TrainConfig,
    /// train one network on the whole region for the summed budget
    #[serde(default)]
    pub pinn_full: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TransferPlan {
    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("transfer.stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.region.validate(problem, &format!("transfer.stages[{i}].region"))?;
            for (j, t) in self.stages[..i].iter().enumerate() {
                if s.region.overlaps(&t.region) {
                    return Err(Error::config(
                        format!("transfer.stages[{i}].region"),
                        format!("overlaps stage {j}"),
                    ));
                }
            }
        }
        if self.layer_dims.first() != Some(&problem.input_dim()) || self.layer_dims.last() != Some(&problem.output_dim())
        {
            return Err(Error::config(
                "transfer.layer_dims",
                format!(
                    "{} needs {} inputs and {} outputs",
                    problem.name,
                    problem.input_dim(),
                    problem.output_dim()
                ),
            ));
        }
        if self.n_interior == 0 {
            return Err(Error::config("transfer.n_interior", "must be positive"));
        }
        if !(self.replay_fraction > 0.0 && self.replay_fraction <= 1.0) {
            return Err(Error::config("transfer.replay_fraction", "must lie in (0, 1]"));
        }
        let names: std::collections::BTreeSet<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        if names.len() != self.variants.len() || names.contains("pinn_full") {
            return Err(Error::config("transfer.variants", "names must be unique and not `pinn_full`"));
        }
        self.train.validate()
    }

    /// Sum of the stage budgets.
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    fn stage_train(&self, stage: usize, steps: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        match cfg.optimizer {
            crate::train::Optimizer::Lbfgs => cfg.lbfgs_iters = steps,
            _ => {
                cfg.steps = Some(steps);
                cfg.epochs = 0;
            }
        }
        cfg.seed = self.seed.wrapping_add(stage as u64);
        cfg
    }
}

/// The new-region collocation sets of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSets {
    pub interior: CollocationSet,
    pub boundary: CollocationSet,
    pub initial: Option<CollocationSet>,
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn region_box(problem: &ProblemSpec, region: &StageRegion) -> Domain {
    match region {
        StageRegion::Box { lower, upper } => Domain {
            lower: lower.clone(),
            upper: upper.clone(),
            ..problem.domain.clone()
        },
        StageRegion::Params { .. } => problem.domain.clone(),
    }
}

/// Places `tuples` on the parameter axes of every row of `pts`.
fn cross_params(problem: &ProblemSpec, pts: &Array2<f64>, tuples: &[Vec<f64>]) -> Array2<f64> {
    let n = pts.nrows();
    let mut out = Array2::zeros((n * tuples.len(), pts.ncols()));
    for (k, t) in tuples.iter().enumerate() {
        for p in 0..n {
            let mut row = out.row_mut(k * n + p);
            row.assign(&pts.row(p));
            for (&a, v) in problem.domain.param_axes.iter().zip(t) {
                row[a] = *v;
            }
        }
    }
    out
}

/// Bounding box of `regions`, or the parameter tuples of all of them.
fn cumulative(problem: &ProblemSpec, regions: &[&StageRegion]) -> StageRegion {
    match regions[0] {
        StageRegion::Box { .. } => {
            let mut lower = problem.domain.upper.clone();
            let mut upper = problem.domain.lower.clone();
            for r in regions {
                if let StageRegion::Box { lower: l, upper: u } = r {
                    for i in 0..l.len() {
                        lower[i] = lower[i].min(l[i]);
                        upper[i] = upper[i].max(u[i]);
                    }
                }
            }
            StageRegion::Box { lower, upper }
        }
        StageRegion::Params { .. } => StageRegion::Params {
            values: regions
                .iter()
                .flat_map(|r| match r {
                    StageRegion::Params { values } => values.clone(),
                    StageRegion::Box { .. } => Vec::new(),
                })
                .collect(),
        },
    }
}

/// Samples stage `stage`'s interior points in its own region, boundary points
/// on the spatial faces of the cumulative region, and initial points at the
/// start time when the cumulative region reaches it.
pub fn stage_sets(problem: &ProblemSpec, plan: &TransferPlan, stage: usize) -> Result<StageSets> {
    let region = &plan.stages[stage].region;
    let regions: Vec<&StageRegion> = plan.stages[..=stage].iter().map(|s| &s.region).collect();
    let cum = cumulative(problem, &regions);
    let mut rng = stage_rng(plan.seed, 1 + stage as u64);

    let interior_pts = match region {
        StageRegion::Box { .. } => region_box(problem, region).sample_interior(plan.n_interior, &mut rng),
        StageRegion::Params { values } => {
            let base = problem.domain.sample_interior(plan.n_interior, &mut rng);
            cross_params(problem, &base, values)
        }
    };
    let interior = CollocationSet::new(interior_pts, Region::Interior);

    let cum_box = region_box(problem, &cum);
    let bpts = match &cum {
        StageRegion::Box { .. } => cum_box.sample_boundary(plan.n_boundary, &mut rng),
        StageRegion::Params { values } => {
            let base = problem.domain.sample_boundary(plan.n_boundary, &mut rng);
            cross_params(problem, &base, values)
        }
    };
    let mut boundary = CollocationSet::new(bpts, Region::Boundary);
    if problem.boundary_kind() == BoundaryKind::Dirichlet && !boundary.is_empty() {
        let m = problem.output_dim();
        let mut vals = Array2::zeros((boundary.len(), m));
        for (p, r) in boundary.points.rows().into_iter().enumerate() {
            let v = problem.boundary_value(&r.to_vec())?;
            vals.row_mut(p).assign(&ndarray::ArrayView1::from(&v));
        }
        boundary.values = Some(vals);
    }

    let initial = match problem.domain.time_axis {
        Some(t) if plan.n_initial > 0 && cum_box.lower[t] <= problem.domain.lower[t] => {
            let mut pts = cum_box.sample_interior(plan.n_initial, &mut rng);
            pts.column_mut(t).fill(problem.domain.lower[t]);
            let m = problem.output_dim();
            let mut vals = Array2::zeros((pts.nrows(), m));
            for (p, r) in pts.rows().into_iter().enumerate() {
                let v = problem.initial_value(&r.to_vec())?;
                vals.row_mut(p).assign(&ndarray::ArrayView1::from(&v));
            }
            let mut set = CollocationSet::new(pts, Region::Initial);
            set.values = Some(vals);
            Some(set)
        }
        _ => None,
    };
    Ok(StageSets {
        interior,
        boundary,
        initial,
    })
}

/// Indices of the `⌈fraction·N⌉` replayed old points, fixed by `seed`.
pub fn replay_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stage_rng(seed, 0x7e91));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Objective of one student stage: the PINN loss on the new region, its
/// boundary and initial terms, plus the distillation (or replay) term on
/// the snapshot points.
pub fn student_objective(
    problem: &ProblemSpec,
    sets: &StageSets,
    snapshot: Option<&TeacherSnapshot>,
    distill: Distill,
    weights: &TransferWeights,
    replay: (f64, u64),
) -> Result<CompositeObjective> {
    let mut obj = CompositeObjective::new();
    obj.push(residual_block(problem, &sets.interior.points, weights.pde, Category::Pde)?);
    if let Some(b) = boundary_block(problem, &sets.boundary, weights.bc)? {
        obj.push(b);
    }
    if let Some(init) = &sets.initial {
        if let Some(b) = initial_block(problem, init, weights.ic)? {
            obj.push(b);
        }
    }
    if let Some(snap) = snapshot {
        snap.validate()?;
        match distill {
            Distill::None => {}
            Distill::Replay => {
                let idx = replay_indices(snap.len(), replay.0, replay.1);
                let pts = snap.points.select(Axis(0), &idx);
                obj.push(residual_block(problem, &pts, weights.pde, Category::Pde)?);
            }
            d => {
                let method = d.method().expect("supervised distillation");
                for b in supervised_terms(method, &snap.to_set(), weights.distill, false, Category::Domain)? {
                    obj.push(b);
                }
            }
        }
    }
    Ok(obj)
}

/// Value of [`student_objective`] for `student`.
pub fn student_loss(
    problem: &ProblemSpec,
    student: &Network,
    sets: &StageSets,
    snapshot: Option<&TeacherSnapshot>,
    distill: Distill,
    weights: &TransferWeights,
) -> Result<f64> {
    Ok(student_objective(problem, sets, snapshot, distill, weights, (0.2, 0))?
        .value(student)?
        .total)
}

/// Metrics of one network after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub variant: String,
    pub stage: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub net_hash: String,
    /// union of the stages trained so far
    pub cumulative: MetricsReport,
    pub full: MetricsReport,
    /// each stage region separately, in plan order
    pub regions: Vec<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub nets: Vec<Network>,
    pub reports: Vec<StageReport>,
    pub histories: Vec<History>,
}

impl VariantOutcome {
    pub fn final_net(&self) -> &Network {
        self.nets.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub variants: Vec<VariantOutcome>,
    pub pinn_full: Option<VariantOutcome>,
    pub manifest: Option<PathBuf>,
}

impl TransferOutcome {
    pub fn variant(&self, name: &str) -> Option<&VariantOutcome> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Test points inside `region`.
fn subset(problem: &ProblemSpec, test: &CollocationSet, region: &StageRegion) -> CollocationSet {
    let idx: Vec<usize> = test
        .points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| region.contains(problem, r.as_slice().expect("row")))
        .map(|(i, _)| i)
        .collect();
    test.select(&idx)
}

fn stage_report(
    problem: &ProblemSpec,
    plan: &TransferPlan,
    test: &CollocationSet,
    net: &Network,
    variant: &str,
    stage: usize,
    history: &History,
) -> Result<StageReport> {
    let regions: Vec<&StageRegion> = plan.stages[..=stage].iter().map(|s| &s.region).collect();
    let all: Vec<&StageRegion> = plan.stages.iter().map(|s| &s.region).collect();
    let cum = cumulative(problem, &regions);
    let full_region = cumulative(problem, &all);
    let eval_on = |r: &StageRegion| -> Result<MetricsReport> {
        let s = subset(problem, test, r);
        if s.is_empty() {
            return Err(Error::config("transfer.test", "no test points fall inside a stage region"));
        }
        evaluate(problem, net, &s)
    };
    // parameter plans evaluate the full test set, which may hold held-out tuples
    let full = match full_region {
        StageRegion::Params { .. } => evaluate(problem, net, test)?,
        StageRegion::Box { .. } => eval_on(&full_region)?,
    };
    Ok(StageReport {
        variant: variant.to_string(),
        stage,
        steps: plan.stages[stage].steps,
        final_loss: history.last_loss(),
        net_hash: net.hash(),
        cumulative: eval_on(&cum)?,
        full,
        regions: all.iter().map(|r| eval_on(r)).collect::<Result<_>>()?,
    })
}

struct Artifacts {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn dir(&self, variant: &str, stage: usize) -> Result<PathBuf> {
        let d = self.root.join(variant).join(format!("stage{}", stage + 1));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn write_stage(
        &mut self,
        report: &StageReport,
        net: &Network,
        history: &History,
        snapshot: Option<&TeacherSnapshot>,
    ) -> Result<()> {
        let d = self.dir(&report.variant, report.stage)?;
        let net_path = d.join("net.json");
        net.save(&net_path)?;
        let hist = d.join("history.csv");
        history.write_csv(&hist)?;
        let metrics = d.join("metrics.json");
        let text = serde_json::to_string_pretty(report).expect("report serialises");
        std::fs::write(&metrics, text + "\n").map_err(|e| Error::io(&metrics, e))?;
        self.files.extend([net_path, hist, metrics]);
        if let Some(s) = snapshot {
            let p = d.join("snapshot.csv");
            s.save(&p)?;
            self.files.push(p.clone());
            self.files.push(CollocationSet::manifest_path(&p));
            self.files.push(provenance_path(&p));
        }
        Ok(())
    }

    fn write_manifest(&self, plan: &TransferPlan, problem: &ProblemSpec) -> Result<PathBuf> {
        let mut entries = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            entries.push(serde_json::json!({
                "path": rel.to_string_lossy(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }));
        }
        let doc = serde_json::json!({
            "problem": problem.manifest(),
            "plan": plan,
            "artifacts": entries,
        });
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&doc).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn stage_error(stage: usize, e: Error) -> Error {
    Error::Stage {
        stage: stage + 1,
        source: Box::new(e),
    }
}

/// Runs the plan: a plain PINN on the first region, then every variant's
/// student stages, each distilling the previous network on all earlier
/// collocation points. Metrics use the reference targets in `test`.
/// With `out`, each stage's checkpoint, history, snapshot and metrics are
/// written as soon as the stage finishes.
pub fn run_transfer_pipeline(
    problem: &ProblemSpec,
    plan: &TransferPlan,
    test: &CollocationSet,
    out: Option<&Path>,
) -> Result<TransferOutcome> {
    plan.validate(problem)?;
    if test.values.is_none() {
        return Err(Error::Specification("test values".into()));
    }
    let mut art = out.map(|root| Artifacts {
        root: root.to_path_buf(),
        files: Vec::new(),
    });
    let sets: Vec<StageSets> = (0..plan.stages.len())
        .map(|s| stage_sets(problem, plan, s))
        .collect::<Result<_>>()?;

    // the first stage is a plain PINN shared by every variant
    let init = Network::init(&plan.layer_dims, plan.seed)?;
    let obj0 = student_objective(problem, &sets[0], None, Distill::None, &plan.weights, (plan.replay_fraction, 0))?;
    let (net0, hist0) =
        train(&init, &obj0, &plan.stage_train(0, plan.stages[0].steps)).map_err(|e| stage_error(0, e))?;
    let orders: &[usize] = if plan.variants.iter().any(|v| v.distill.needs_hessians()) {
        &[0, 1, 2]
    } else {
        &[0, 1]
    };

    let mut variants = Vec::new();
    let names: Vec<String> = if plan.variants.is_empty() {
        vec!["pinn".into()]
    } else {
        plan.variants.iter().map(|v| v.name.clone()).collect()
    };
    for (vi, name) in names.iter().enumerate() {
        let variant = plan.variants.get(vi);
        let mut nets = vec![net0.clone()];
        let mut histories = vec![hist0.clone()];
        let mut reports = vec![stage_report(problem, plan, test, &net0, name, 0, &hist0)?];
        if let Some(a) = art.as_mut() {
            a.write_stage(&reports[0], &net0, &hist0, None)?;
        }
        let Some(variant) = variant else {
            variants.push(VariantOutcome {
                name: name.clone(),
                nets,
                reports,
                histories,
            });
            continue;
        };
        let mut old_points = sets[0].interior.points.clone();
        for s in 1..plan.stages.len() {
            let teacher = nets.last().expect("previous stage");
            let snap = snapshot_teacher(teacher, &old_points, orders, s).map_err(|e| stage_error(s, e))?;
            let start = match variant.student_mode {
                StudentMode::Continual => teacher.clone(),
                StudentMode::FromScratch => Network::init(&plan.layer_dims, plan.seed.wrapping_add(s as u64))?,
            };
            let obj = student_objective(
                problem,
                &sets[s],
                Some(&snap),
                variant.distill,
                &plan.weights,
                (plan.replay_fraction, plan.seed.wrapping_add(s as u64)),
            )
            .map_err(|e| stage_error(s, e))?;
            let (net, hist) =
                train(&start, &obj, &plan.stage_train(s, plan.stages[s].steps)).map_err(|e| stage_error(s, e))?;
            let report = stage_report(problem, plan, test, &net, name, s, &hist)?;
            if let Some(a) = art.as_mut() {
                a.write_stage(&report, &net, &hist, Some(&snap))?;
            }
            old_points = ndarray::concatenate(Axis(0), &[old_points.view(), sets[s].interior.points.view()])
                .map_err(|e| Error::Shape(e.to_string()))?;
            nets.push(net);
            histories.push(hist);
            reports.push(report);
        }
        variants.push(VariantOutcome {
            name: name.clone(),
            nets,
            reports,
            histories,
        });
    }

    let pinn_full = if plan.pinn_full {
        Some(run_pinn_full(problem, plan, test, art.as_mut())?)
    } else {
        None
    };
    let manifest = match &art {
        Some(a) => Some(a.write_manifest(plan, problem)?),
        None => None,
    };
    Ok(TransferOutcome {
        variants,
        pinn_full,
        manifest,
    })
}

/// One PINN on the union of all stage regions for the summed budget.
fn run_pinn_full(
    problem: &ProblemSpec,
    plan: &TransferPlan,
    test: &CollocationSet,
    art: Option<&mut Artifacts>,
) -> Result<VariantOutcome> {
    let last = plan.stages.len() - 1;
    let mut interior = stage_sets(problem, plan, 0)?.interior;
    for s in 1..=last {
        interior = interior.concat(&stage_sets(problem, plan, s)?.interior)?;
    }
    let final_sets = stage_sets(problem, plan, last)?;
    let sets = StageSets {
        interior,
        boundary: final_sets.boundary,
        initial: final_sets.initial,
    };
    let obj = student_objective(problem, &sets, None, Distill::None, &plan.weights, (plan.replay_fraction, 0))?;
    let init = Network::init(&plan.layer_dims, plan.seed)?;
    let (net, hist) = train(&init, &obj, &plan.stage_train(0, plan.total_steps())).map_err(|e| stage_error(last, e))?;
    let mut report = stage_report(problem, plan, test, &net, "pinn_full", last, &hist)?;
    report.steps = plan.total_steps();
    if let Some(a) = art {
        a.write_stage(&report, &net, &hist, None)?;
    }
    Ok(VariantOutcome {
        name: "pinn_full".into(),
        nets: vec![net],
        reports: vec![report],
        histories: vec![hist],
    })
}
