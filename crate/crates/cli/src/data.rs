//! Collocation sets and reference test grids for a config.

use std::f64::consts::PI;
use std::path::Path;

use derl::autodiff::DerivOrder;
use derl::losses::{CollocationSet, Region, SetMeta};
use derl::problems::{
    continuity_ic, linspace, AnalyticModel, BoundaryKind, ProblemName, ProblemSpec,
};
use derl::solvers::{
    cell_centres, continuity_fv_solve, empirical_derivative, interpolate_component, kdv_spectral_solve,
    pendulum_flow, FnSampler, GridField, Sampler, Scheme,
};
use derl::train::add_noise;
use derl::transfer::StageRegion;
use derl::{Error, Result};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DerivativeSource, ExperimentConfig};

/// Offset between the run seed and the sampling seed, so that network
/// initialisation and point sampling use unrelated streams.
pub const DATA_SEED_OFFSET: u64 = 100;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub interior: CollocationSet,
    pub boundary: CollocationSet,
    pub initial: Option<CollocationSet>,
    pub test: GridField,
}

impl Dataset {
    /// Writes `interior.csv`, `boundary.csv`, `initial.csv` (with JSON
    /// sidecars) and `test.{json,bin}` into `dir`. Returns the file names.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        let mut files = Vec::new();
        let sets = [Some(&self.interior), Some(&self.boundary), self.initial.as_ref()];
        for (name, set) in ["interior", "boundary", "initial"].into_iter().zip(sets) {
            if let Some(set) = set {
                set.save(dir.join(format!("{name}.csv")))?;
                files.push(format!("{name}.csv"));
                files.push(format!("{name}.json"));
            }
        }
        self.test.save(dir.join("test"))?;
        files.push("test.json".into());
        files.push("test.bin".into());
        Ok(files)
    }
}

fn default_dt(name: ProblemName) -> f64 {
    match name {
        ProblemName::Continuity => 0.005,
        ProblemName::KdV => 5e-4,
        _ => 0.01,
    }
}

fn t_end(cfg: &ExperimentConfig, problem: &ProblemSpec) -> f64 {
    let ta = problem.domain.time_axis.expect("time-dependent problem");
    cfg.data.solver.t_end.unwrap_or(problem.domain.upper[ta])
}

/// Solver output on its native grid.
enum Reference {
    Analytic,
    Pendulum,
    Grid(GridField),
}

fn reference(cfg: &ExperimentConfig, problem: &ProblemSpec) -> Result<Reference> {
    let s = &cfg.data.solver;
    let dt = s.dt.unwrap_or(default_dt(problem.name));
    match problem.name {
        ProblemName::Continuity => {
            let (lo, hi) = (problem.domain.lower[1], problem.domain.upper[1]);
            let c = cell_centres(lo, hi, s.cells);
            let ic = GridField::from_fn(&["x", "y"], vec![c.clone(), c], |x| continuity_ic(x[0], x[1]));
            Ok(Reference::Grid(continuity_fv_solve(&ic, dt, t_end(cfg, problem), s.out_every)?))
        }
        ProblemName::KdV => Ok(Reference::Grid(kdv_spectral_solve(
            |x| (PI * x).cos(),
            problem.nu,
            s.nx,
            dt,
            t_end(cfg, problem),
            s.out_dt,
        )?)),
        ProblemName::Pendulum => Ok(Reference::Pendulum),
        _ => Ok(Reference::Analytic),
    }
}

/// Every `stride`-th node on each listed axis.
fn stride(field: &GridField, strides: &[usize]) -> GridField {
    let keep: Vec<Vec<usize>> = field
        .axes
        .iter()
        .zip(strides)
        .map(|(a, &s)| (0..a.len()).step_by(s).collect())
        .collect();
    let axes: Vec<Vec<f64>> = field.axes.iter().zip(&keep).map(|(a, k)| k.iter().map(|&i| a[i]).collect()).collect();
    let names: Vec<&str> = field.names.iter().map(String::as_str).collect();
    let mut out = GridField::zeros(&names, axes, field.components);
    let shape = out.shape();
    let mut idx = vec![0usize; shape.len()];
    let mut src = vec![0usize; shape.len()];
    for node in 0..out.num_nodes() {
        let mut rem = node;
        for a in (0..shape.len()).rev() {
            idx[a] = rem % shape[a];
            rem /= shape[a];
            src[a] = keep[a][idx[a]];
        }
        for c in 0..field.components {
            out.data[node * field.components + c] = field.get(&src, c);
        }
    }
    out
}

/// KdV output lives on `[-1, 1)`; close it with the periodic copy at `x = 1`.
fn close_periodic(field: &GridField) -> GridField {
    let mut axes = field.axes.clone();
    let nx = axes[1].len();
    let close = -axes[1][0];
    axes[1].push(close);
    let names: Vec<&str> = field.names.iter().map(String::as_str).collect();
    let mut out = GridField::zeros(&names, axes, 1);
    for i in 0..field.axes[0].len() {
        for j in 0..=nx {
            out.data[i * (nx + 1) + j] = field.data[i * nx + j % nx];
        }
    }
    out
}

fn pendulum_state(problem: &ProblemSpec, t: f64, u0: f64, v0: f64, dt_max: f64) -> Result<[f64; 6]> {
    if t <= 0.0 {
        return Ok([u0, v0, 1.0, 0.0, 0.0, 1.0]);
    }
    let steps = (t / dt_max).ceil();
    let flow = pendulum_flow(u0, v0, problem.g_over_l, problem.b_over_m, t / steps, t)?;
    let last = flow.num_nodes() - 1;
    let mut out = [0.0; 6];
    out.copy_from_slice(&flow.data[last * 6..(last + 1) * 6]);
    Ok(out)
}

/// Test grid for the config: the analytic solution on a node grid, or the
/// reference solver output.
pub fn test_grid(cfg: &ExperimentConfig) -> Result<GridField> {
    let problem = cfg.problem_spec();
    test_grid_from(cfg, &problem, &reference(cfg, &problem)?)
}

/// Test set of a transfer run. Parameter stages are scored on the spatial
/// test grid crossed with every stage's parameter tuples.
pub fn transfer_test_set(cfg: &ExperimentConfig) -> Result<CollocationSet> {
    let problem = cfg.problem_spec();
    let stages = cfg.transfer.as_ref().map(|t| t.stages.as_slice()).unwrap_or_default();
    let tuples: Vec<Vec<f64>> = stages
        .iter()
        .filter_map(|s| match &s.region {
            StageRegion::Params { values } => Some(values.clone()),
            StageRegion::Box { .. } => None,
        })
        .flatten()
        .collect();
    if tuples.is_empty() {
        return Ok(derl::eval::grid_set(&test_grid(cfg)?));
    }
    let counts = cfg.data.test_grid.clone().unwrap_or_else(|| default_counts(&problem));
    let dom = &problem.domain;
    let params = &dom.param_axes;
    let axes: Vec<Vec<f64>> = (0..dom.dim())
        .map(|i| match params.iter().position(|&a| a == i) {
            Some(_) => vec![dom.lower[i]],
            None => linspace(dom.lower[i], dom.upper[i], counts[i]),
        })
        .collect();
    let base = derl::problems::grid_points(&axes);
    let n = base.nrows();
    let mut pts = Array2::zeros((n * tuples.len(), dom.dim()));
    for (k, t) in tuples.iter().enumerate() {
        for p in 0..n {
            let mut row = pts.row_mut(k * n + p);
            row.assign(&base.row(p));
            for (&a, v) in params.iter().zip(t) {
                row[a] = *v;
            }
        }
    }
    CollocationSet::from_model(&AnalyticModel::new(&problem)?, pts, Region::Interior, DerivOrder::Value)
}

fn default_counts(problem: &ProblemSpec) -> Vec<usize> {
    match problem.input_dim() {
        2 => vec![101, 101],
        3 if problem.name == ProblemName::Pendulum => vec![101, 11, 11],
        3 => vec![21, 21, 21],
        d => vec![11; d],
    }
}

fn test_grid_from(cfg: &ExperimentConfig, problem: &ProblemSpec, reference: &Reference) -> Result<GridField> {
    let counts = cfg.data.test_grid.clone().unwrap_or_else(|| default_counts(problem));
    let s = &cfg.data.solver;
    match reference {
        Reference::Analytic => derl::eval::analytic_grid(problem, &counts),
        Reference::Grid(g) if problem.name == ProblemName::KdV => Ok(stride(g, &[1, s.test_stride])),
        Reference::Grid(g) => Ok(stride(g, &vec![s.test_stride; g.axes.len()])),
        Reference::Pendulum => {
            let dom = &problem.domain;
            let axes: Vec<Vec<f64>> = (0..3).map(|i| linspace(dom.lower[i], dom.upper[i], counts[i])).collect();
            let (nt, nu, nv) = (counts[0], counts[1], counts[2]);
            let span = dom.upper[0] - dom.lower[0];
            let dt_grid = span / (nt - 1) as f64;
            let sub = (dt_grid / s.dt.unwrap_or(default_dt(problem.name))).ceil() as usize;
            let mut g = GridField::zeros(&["t", "u0", "v0"], axes.clone(), 1);
            for (iu, &u0) in axes[1].iter().enumerate() {
                for (iv, &v0) in axes[2].iter().enumerate() {
                    let flow = pendulum_flow(u0, v0, problem.g_over_l, problem.b_over_m, dt_grid / sub as f64, span)?;
                    for it in 0..nt {
                        let node = (it * sub).min(flow.num_nodes() - 1);
                        g.data[(it * nu + iu) * nv + iv] = flow.data[node * 6];
                    }
                }
            }
            Ok(g)
        }
    }
}

/// Difference quotient that steps inwards when the requested stencil
/// leaves the sampled region.
pub fn one_sided_fallback<S: Sampler + ?Sized>(s: &S, x: &[f64], axis: usize, h: f64, scheme: Scheme) -> Result<f64> {
    match empirical_derivative(s, x, axis, h, scheme) {
        Err(Error::Domain(msg)) => {
            let mut xp = x.to_vec();
            xp[axis] += h;
            if s.contains(&xp) {
                return Ok((s.sample(&xp)? - s.sample(x)?) / h);
            }
            let mut xm = x.to_vec();
            xm[axis] -= h;
            if s.contains(&xm) {
                return Ok((s.sample(x)? - s.sample(&xm)?) / h);
            }
            Err(Error::Domain(msg))
        }
        r => r,
    }
}

/// Grid component `c` as a sampler.
struct Component<'a> {
    field: &'a GridField,
    c: usize,
}

impl Sampler for Component<'_> {
    fn contains(&self, x: &[f64]) -> bool {
        self.field.contains(x)
    }
    fn sample(&self, x: &[f64]) -> Result<f64> {
        interpolate_component(self.field, x, self.c)
    }
}

fn difference_targets<S: Sampler + ?Sized>(
    samplers: &[&S],
    points: &Array2<f64>,
    steps: &[f64],
    scheme: Scheme,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (n, d, m) = (points.nrows(), points.ncols(), samplers.len());
    let mut values = Array2::zeros((n, m));
    let mut jac = Array3::zeros((n, m, d));
    for (p, row) in points.rows().into_iter().enumerate() {
        let x = row.to_vec();
        for (k, s) in samplers.iter().enumerate() {
            values[[p, k]] = s.sample(&x)?;
            for i in 0..d {
                jac[[p, k, i]] = one_sided_fallback(*s, &x, i, steps[i], scheme)?;
            }
        }
    }
    Ok((values, jac))
}

fn meta(problem: &ProblemSpec, source: &str, h: Option<f64>) -> SetMeta {
    SetMeta {
        coords: problem.domain.coords.clone(),
        lower: problem.domain.lower.clone(),
        upper: problem.domain.upper.clone(),
        h,
        derivative_source: Some(source.into()),
    }
}

fn interior_targets(
    cfg: &ExperimentConfig,
    problem: &ProblemSpec,
    reference: &Reference,
    points: Array2<f64>,
) -> Result<CollocationSet> {
    let needs = cfg.loss.method.needs();
    let order = if needs.hessians {
        DerivOrder::Second
    } else if needs.jacobians {
        DerivOrder::First
    } else {
        DerivOrder::Value
    };
    let d = problem.input_dim();
    let source = if needs.values || needs.jacobians || needs.hessians {
        cfg.data.derivative_source
    } else {
        DerivativeSource::None
    };
    let h = cfg.data.step();
    let set = match (source, reference) {
        (DerivativeSource::None, _) => {
            let mut s = CollocationSet::new(points, Region::Interior);
            s.meta = meta(problem, "none", None);
            return Ok(s);
        }
        (DerivativeSource::Analytic, _) => {
            let mut s = CollocationSet::from_model(&AnalyticModel::new(problem)?, points, Region::Interior, order)?;
            s.meta = meta(problem, "analytic", None);
            s
        }
        (DerivativeSource::Solver, Reference::Analytic) => {
            return Err(Error::config("data.derivative_source", format!("{} has no reference solver", problem.name)))
        }
        (DerivativeSource::Empirical, Reference::Analytic) => {
            let fs: Vec<_> = (0..problem.output_dim())
                .map(|k| FnSampler {
                    f: move |x: &[f64]| problem.analytic_solution(x).map(|v| v[k]).unwrap_or(f64::NAN),
                    domain: &problem.domain,
                })
                .collect();
            let refs: Vec<&dyn Sampler> = fs.iter().map(|s| s as &dyn Sampler).collect();
            let (values, jac) = difference_targets(&refs, &points, &vec![h; d], cfg.data.scheme)?;
            let mut s = CollocationSet::new(points, Region::Interior);
            s.values = Some(values);
            s.jacobians = Some(jac);
            s.meta = meta(problem, "empirical", Some(h));
            s
        }
        (_, Reference::Grid(g)) => {
            let field = if problem.name == ProblemName::KdV { close_periodic(g) } else { g.clone() };
            // the solver source differences the reference at its own resolution
            let (steps, scheme, label) = match source {
                DerivativeSource::Empirical => (vec![h; d], cfg.data.scheme, "empirical"),
                _ => ((0..d).map(|i| field.spacing(i)).collect(), Scheme::Central, "solver"),
            };
            let comp = Component { field: &field, c: 0 };
            let (values, jac) = difference_targets(&[&comp], &points, &steps, scheme)?;
            let mut s = CollocationSet::new(points, Region::Interior);
            s.values = Some(values);
            s.jacobians = if order >= DerivOrder::First { Some(jac) } else { None };
            s.meta = meta(problem, label, (label == "empirical").then_some(h));
            s
        }
        (_, Reference::Pendulum) => {
            let n = points.nrows();
            let mut values = Array2::zeros((n, 1));
            let mut jac = Array3::zeros((n, 1, 3));
            let dt = cfg.data.solver.dt.unwrap_or(default_dt(problem.name));
            let empirical = source == DerivativeSource::Empirical;
            for (p, r) in points.rows().into_iter().enumerate() {
                let st = pendulum_state(problem, r[0], r[1], r[2], dt)?;
                values[[p, 0]] = st[0];
                if empirical {
                    let f = |x: &[f64]| pendulum_state(problem, x[0], x[1], x[2], dt).map(|s| s[0]).unwrap_or(f64::NAN);
                    let s = FnSampler { f, domain: &problem.domain };
                    for i in 0..3 {
                        jac[[p, 0, i]] = one_sided_fallback(&s, &r.to_vec(), i, h, cfg.data.scheme)?;
                    }
                } else {
                    // exact sensitivities: du/dt, du/du0, du/dv0
                    jac[[p, 0, 0]] = st[1];
                    jac[[p, 0, 1]] = st[2];
                    jac[[p, 0, 2]] = st[4];
                }
            }
            let mut s = CollocationSet::new(points, Region::Interior);
            s.values = Some(values);
            s.jacobians = if order >= DerivOrder::First { Some(jac) } else { None };
            s.meta = meta(problem, if empirical { "empirical" } else { "solver" }, empirical.then_some(h));
            s
        }
    };
    Ok(set)
}

fn rows_to_array(rows: Vec<Vec<f64>>, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), m), |(p, k)| rows[p][k])
}

/// Samples every collocation set of a training run and its test grid.
///
/// Interior points are drawn first, then boundary, then initial points, all
/// from one stream seeded with `seed + DATA_SEED_OFFSET`. Continuity
/// interior points are a subset of the downsampled solver grid nodes.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let problem = cfg.problem_spec();
    let reference = reference(cfg, &problem)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(DATA_SEED_OFFSET));
    let n = cfg.data.n_collocation;
    let d = problem.input_dim();
    let m = problem.output_dim();
    let mut domain = problem.domain.clone();
    if let (Some(ta), Some(t)) = (domain.time_axis, cfg.data.solver.t_end) {
        domain.upper[ta] = t;
    }

    let points = match &reference {
        Reference::Grid(g) if problem.name == ProblemName::Continuity => {
            let ds = cfg.data.solver.downsample;
            let nodes = stride(g, &vec![ds; g.axes.len()]).points();
            if n >= nodes.nrows() {
                nodes
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, nodes.nrows(), n).into_vec();
                idx.sort_unstable();
                nodes.select(ndarray::Axis(0), &idx)
            }
        }
        _ => domain.sample_interior(n, &mut rng),
    };
    let mut interior = interior_targets(cfg, &problem, &reference, points)?;
    if cfg.data.noise_sigma > 0.0 {
        interior = add_noise(&interior, cfg.data.noise_sigma, cfg.seed)?;
    }

    let nb = match problem.boundary_kind() {
        BoundaryKind::None => 0,
        _ => cfg.data.n_boundary(),
    };
    let bpts = if nb > 0 {
        domain.sample_boundary(nb, &mut rng)
    } else {
        Array2::zeros((0, d))
    };
    let mut boundary = CollocationSet::new(bpts, Region::Boundary);
    if problem.boundary_kind() == BoundaryKind::Dirichlet && nb > 0 {
        let vals = boundary
            .points
            .rows()
            .into_iter()
            .map(|r| problem.boundary_value(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        boundary.values = Some(rows_to_array(vals, m));
    }
    boundary.meta = meta(&problem, "boundary data", None);

    let initial = match domain.time_axis {
        Some(ta) => {
            let ni = cfg.data.n_initial.unwrap_or(nb.max(cfg.data.n_boundary()));
            let mut pts = domain.sample_interior(ni, &mut rng);
            pts.column_mut(ta).fill(domain.lower[ta]);
            let vals = pts
                .rows()
                .into_iter()
                .map(|r| problem.initial_value(&r.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let mut set = CollocationSet::new(pts, Region::Initial);
            set.values = Some(rows_to_array(vals, m));
            set.meta = meta(&problem, "initial data", None);
            Some(set)
        }
        None => None,
    };

    let test = test_grid_from(cfg, &problem, &reference)?;
    Ok(Dataset {
        interior,
        boundary,
        initial,
        test,
    })
}
