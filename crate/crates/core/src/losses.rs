//! Loss functionals over collocation sets: supervised value and derivative
//! terms, PDE residuals, boundary and initial data, in any combination.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_loss_gradient, Approximator, DerivOrder, JetLayout, Jets, Network};
use crate::error::{Error, Result};
use crate::problems::{BoundaryKind, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Interior,
    Boundary,
    Initial,
}

/// Points with optional value and derivative targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    /// `N × d`
    pub points: Array2<f64>,
    /// `N × m`
    pub values: Option<Array2<f64>>,
    /// `N × m × d`
    pub jacobians: Option<Array3<f64>>,
    /// `N × m × d × d`
    pub hessians: Option<Array4<f64>>,
    pub region: Region,
    pub meta: SetMeta,
}

/// Sidecar description of a collocation file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMeta {
    pub coords: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// finite-difference step used for empirical derivative targets
    pub h: Option<f64>,
    pub derivative_source: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetManifest {
    format: String,
    region: Region,
    n: usize,
    d: usize,
    m: usize,
    values: bool,
    jacobians: bool,
    hessians: bool,
    #[serde(flatten)]
    meta: SetMeta,
}

impl CollocationSet {
    pub fn new(points: Array2<f64>, region: Region) -> Self {
        CollocationSet {
            points,
            values: None,
            jacobians: None,
            hessians: None,
            region,
            meta: SetMeta::default(),
        }
    }

    /// Targets read off `model` up to `order` at every point.
    pub fn from_model<A: Approximator + ?Sized>(
        model: &A,
        points: Array2<f64>,
        region: Region,
        order: DerivOrder,
    ) -> Result<Self> {
        let (n, d, m) = (points.nrows(), points.ncols(), model.output_dim());
        let jets = model.jets(points.view(), &JetLayout::new(d, order))?;
        let mut set = CollocationSet::new(points, region);
        set.values = Some(Array2::from_shape_fn((n, m), |(p, k)| jets.value(p, k)));
        if order >= DerivOrder::First {
            set.jacobians = Some(Array3::from_shape_fn((n, m, d), |(p, k, i)| jets.jac(p, k, i)));
        }
        if order >= DerivOrder::Second {
            set.hessians = Some(Array4::from_shape_fn((n, m, d, d), |(p, k, i, j)| {
                jets.hess(p, k, i, j)
            }));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Output dimension implied by whichever target is present.
    pub fn output_dim(&self) -> Option<usize> {
        self.values
            .as_ref()
            .map(|v| v.ncols())
            .or_else(|| self.jacobians.as_ref().map(|j| j.dim().1))
            .or_else(|| self.hessians.as_ref().map(|h| h.dim().1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.dim();
        let m = self.output_dim();
        if let Some(v) = &self.values {
            if v.nrows() != n {
                return Err(Error::Shape(format!("values have {} rows, points {n}", v.nrows())));
            }
        }
        if let Some(j) = &self.jacobians {
            let (jn, jm, jd) = j.dim();
            if jn != n || jd != d || Some(jm) != m {
                return Err(Error::Shape(format!("jacobians are {jn}×{jm}×{jd}")));
            }
        }
        if let Some(h) = &self.hessians {
            let (hn, hm, hd, he) = h.dim();
            if hn != n || hd != d || he != d || Some(hm) != m {
                return Err(Error::Shape(format!("hessians are {hn}×{hm}×{hd}×{he}")));
            }
        }
        Ok(())
    }

    /// Rows `idx` of the set, targets included.
    pub fn select(&self, idx: &[usize]) -> CollocationSet {
        let ax = ndarray::Axis(0);
        CollocationSet {
            points: self.points.select(ax, idx),
            values: self.values.as_ref().map(|v| v.select(ax, idx)),
            jacobians: self.jacobians.as_ref().map(|v| v.select(ax, idx)),
            hessians: self.hessians.as_ref().map(|v| v.select(ax, idx)),
            region: self.region,
            meta: self.meta.clone(),
        }
    }

    /// Concatenation of two sets with the same target layout.
    pub fn concat(&self, other: &CollocationSet) -> Result<CollocationSet> {
        fn cat<D: ndarray::RemoveAxis>(
            a: &Option<ndarray::Array<f64, D>>,
            b: &Option<ndarray::Array<f64, D>>,
            name: &str,
        ) -> Result<Option<ndarray::Array<f64, D>>> {
            match (a, b) {
                (Some(a), Some(b)) => ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
                    .map(Some)
                    .map_err(|e| Error::Shape(format!("{name}: {e}"))),
                (None, None) => Ok(None),
                _ => Err(Error::Specification(name.to_string())),
            }
        }
        let points = ndarray::concatenate(ndarray::Axis(0), &[self.points.view(), other.points.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(CollocationSet {
            points,
            values: cat(&self.values, &other.values, "values")?,
            jacobians: cat(&self.jacobians, &other.jacobians, "jacobians")?,
            hessians: cat(&self.hessians, &other.hessians, "hessians")?,
            region: self.region,
            meta: self.meta.clone(),
        })
    }

    pub fn header(&self) -> Vec<String> {
        let d = self.dim();
        let m = self.output_dim().unwrap_or(0);
        let mut cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        if self.values.is_some() {
            cols.extend((0..m).map(|k| format!("u{k}")));
        }
        if self.jacobians.is_some() {
            for k in 0..m {
                cols.extend((0..d).map(|i| format!("du{k}_dx{i}")));
            }
        }
        if self.hessians.is_some() {
            for k in 0..m {
                for i in 0..d {
                    cols.extend((0..d).map(|j| format!("d2u{k}_dx{i}dx{j}")));
                }
            }
        }
        cols
    }

    fn row(&self, p: usize) -> Vec<f64> {
        let mut r: Vec<f64> = self.points.row(p).to_vec();
        if let Some(v) = &self.values {
            r.extend(v.row(p).iter());
        }
        if let Some(j) = &self.jacobians {
            r.extend(j.index_axis(ndarray::Axis(0), p).iter());
        }
        if let Some(h) = &self.hessians {
            r.extend(h.index_axis(ndarray::Axis(0), p).iter());
        }
        r
    }

    /// Path of the JSON sidecar for a CSV file.
    pub fn manifest_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes `path` (CSV) and its JSON sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(self.header()).map_err(|e| csv_err(path, e))?;
        for p in 0..self.len() {
            // `{:?}` on f64 prints the shortest representation that round-trips
            w.write_record(self.row(p).iter().map(|v| format!("{v:?}")))
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let manifest = SetManifest {
            format: "derl-collocation".into(),
            region: self.region,
            n: self.len(),
            d: self.dim(),
            m: self.output_dim().unwrap_or(0),
            values: self.values.is_some(),
            jacobians: self.jacobians.is_some(),
            hessians: self.hessians.is_some(),
            meta: self.meta.clone(),
        };
        let mpath = Self::manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mpath = Self::manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let man: SetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let (n, d, m) = (man.n, man.d, man.m);
        let mut set = CollocationSet::new(Array2::zeros((n, d)), man.region);
        if man.values {
            set.values = Some(Array2::zeros((n, m)));
        }
        if man.jacobians {
            set.jacobians = Some(Array3::zeros((n, m, d)));
        }
        if man.hessians {
            set.hessians = Some(Array4::zeros((n, m, d, d)));
        }
        let expected = set.header();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != expected {
            return Err(Error::format(path, "header does not match manifest"));
        }
        let mut rows = 0;
        for (p, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if p >= n {
                return Err(Error::format(path, "more rows than the manifest declares"));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("row {p}: {e}")))?;
            let mut it = vals.into_iter();
            for i in 0..d {
                set.points[[p, i]] = it.next().unwrap_or(f64::NAN);
            }
            if let Some(v) = set.values.as_mut() {
                v.row_mut(p).iter_mut().for_each(|x| *x = it.next().unwrap_or(f64::NAN));
            }
            if let Some(j) = set.jacobians.as_mut() {
                j.index_axis_mut(ndarray::Axis(0), p)
                    .iter_mut()
                    .for_each(|x| *x = it.next().unwrap_or(f64::NAN));
            }
            if let Some(h) = set.hessians.as_mut() {
                h.index_axis_mut(ndarray::Axis(0), p)
                    .iter_mut()
                    .for_each(|x| *x = it.next().unwrap_or(f64::NAN));
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::format(path, format!("expected {n} rows, found {rows}")));
        }
        set.meta = man.meta;
        Ok(set)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DERL")]
    Derl,
    #[serde(rename = "OUTL")]
    Outl,
    #[serde(rename = "OUTL_PINN")]
    OutlPinn,
    #[serde(rename = "SOB")]
    Sob,
    #[serde(rename = "HESL")]
    Hesl,
    #[serde(rename = "DER_HESL")]
    DerHesl,
    #[serde(rename = "SOB_HES")]
    SobHes,
    #[serde(rename = "PINN")]
    Pinn,
}

/// Which targets a supervised term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Needs {
    pub values: bool,
    pub jacobians: bool,
    pub hessians: bool,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Derl,
        Method::Outl,
        Method::OutlPinn,
        Method::Sob,
        Method::Hesl,
        Method::DerHesl,
        Method::SobHes,
        Method::Pinn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Derl => "DERL",
            Method::Outl => "OUTL",
            Method::OutlPinn => "OUTL_PINN",
            Method::Sob => "SOB",
            Method::Hesl => "HESL",
            Method::DerHesl => "DER_HESL",
            Method::SobHes => "SOB_HES",
            Method::Pinn => "PINN",
        }
    }

    pub fn needs(self) -> Needs {
        let (values, jacobians, hessians) = match self {
            Method::Derl => (false, true, false),
            Method::Outl | Method::OutlPinn => (true, false, false),
            Method::Sob => (true, true, false),
            Method::Hesl => (false, false, true),
            Method::DerHesl => (false, true, true),
            Method::SobHes => (true, true, true),
            Method::Pinn => (false, false, false),
        };
        Needs {
            values,
            jacobians,
            hessians,
        }
    }

    pub fn uses_residual(self) -> bool {
        matches!(self, Method::Pinn | Method::OutlPinn)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub method: Method,
    #[serde(default = "one")]
    pub lambda_d: f64,
    #[serde(default = "one")]
    pub lambda_p: f64,
    #[serde(default = "one")]
    pub lambda_b: f64,
    #[serde(default = "one")]
    pub lambda_i: f64,
    /// SOB_HES only: random-direction difference estimate of the Hessian term
    #[serde(default)]
    pub stochastic_hessian: bool,
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(method: Method) -> Self {
        LossSpec {
            method,
            lambda_d: 1.0,
            lambda_p: 1.0,
            lambda_b: 1.0,
            lambda_i: 1.0,
            stochastic_hessian: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_d, "loss.lambda_d"),
            (self.lambda_p, "loss.lambda_p"),
            (self.lambda_b, "loss.lambda_b"),
            (self.lambda_i, "loss.lambda_i"),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("weight {v} must be finite and nonnegative")));
            }
        }
        if self.stochastic_hessian && self.method != Method::SobHes {
            return Err(Error::config(
                "loss.stochastic_hessian",
                "only available for SOB_HES",
            ));
        }
        Ok(())
    }
}

/// Mean over rows of the squared Euclidean row difference.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let s: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.nrows() as f64)
}

/// Residual `F[model]` at a single point.
pub fn pde_residual<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    point: &[f64],
) -> Result<Vec<f64>> {
    let pts = ArrayView2::from_shape((1, point.len()), point)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(problem.residuals(model, pts)?.row(0).to_vec())
}

/// Weighted loss terms grouped as in the training history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub domain: f64,
    pub pde: f64,
    pub bc: f64,
    pub ic: f64,
}

impl LossBreakdown {
    fn add(&mut self, cat: Category, v: f64) {
        match cat {
            Category::Domain => self.domain += v,
            Category::Pde => self.pde += v,
            Category::Boundary => self.bc += v,
            Category::Initial => self.ic += v,
        }
        self.total += v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Domain,
    Pde,
    Boundary,
    Initial,
}

/// What one term compares. Paired blocks hold `2N` rows where row `p`
/// is matched with row `p + N`.
#[derive(Debug, Clone)]
pub enum Target {
    Values(Array2<f64>),
    Jacobians(Array3<f64>),
    Hessians(Array4<f64>),
    /// first derivative along one axis (`N × m`)
    Partial { axis: usize, targets: Array2<f64> },
    Residual { problem: ProblemSpec, forcing: Vec<f64> },
    /// paired: `u` and `∂u/∂x_axis` agree between the two rows
    Periodic { axis: usize },
    /// paired rows `x ± h v`: central difference of the jacobian along `v`
    /// compared with `vᵀ H v`
    HessianProbe {
        dirs: Array2<f64>,
        targets: Array2<f64>,
        h: f64,
    },
}

impl Target {
    fn layout(&self, d: usize) -> JetLayout {
        match self {
            Target::Values(_) => JetLayout::new(d, DerivOrder::Value),
            Target::Jacobians(_) | Target::Partial { .. } | Target::Periodic { .. } => {
                JetLayout::new(d, DerivOrder::First)
            }
            Target::HessianProbe { .. } => JetLayout::new(d, DerivOrder::First),
            Target::Hessians(_) => JetLayout::new(d, DerivOrder::Second),
            Target::Residual { problem, .. } => problem.residual_layout(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Term {
    pub target: Target,
    pub weight: f64,
    pub category: Category,
}

/// Terms sharing one set of points and hence one jet pass.
#[derive(Debug, Clone)]
pub struct Block {
    points: Array2<f64>,
    paired: bool,
    layout: JetLayout,
    terms: Vec<Term>,
}

impl Block {
    pub fn new(points: Array2<f64>, paired: bool) -> Self {
        let d = points.ncols();
        Block {
            points,
            paired,
            layout: JetLayout::new(d, DerivOrder::Value),
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, target: Target, weight: f64, category: Category) -> Self {
        self.push(Term {
            target,
            weight,
            category,
        });
        self
    }

    pub fn push(&mut self, term: Term) {
        let need = term.target.layout(self.points.ncols());
        self.layout = merge_layouts(&self.layout, &need);
        self.terms.push(term);
    }

    /// Number of independent samples (pairs count once).
    pub fn len(&self) -> usize {
        if self.paired {
            self.points.nrows() / 2
        } else {
            self.points.nrows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0 || self.terms.is_empty()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn rows(&self, sel: Option<&[usize]>) -> Vec<usize> {
        let n = self.len();
        let base: Vec<usize> = match sel {
            Some(s) => s.to_vec(),
            None => (0..n).collect(),
        };
        if self.paired {
            let mut r = base.clone();
            r.extend(base.iter().map(|i| i + n));
            r
        } else {
            base
        }
    }

    /// Loss of this block on its selected rows; `adj` receives the adjoint.
    fn evaluate(&self, jets: &Jets, logical: &[usize], mut adj: Option<&mut Jets>, out: &mut LossBreakdown) {
        let nsel = logical.len();
        if nsel == 0 {
            return;
        }
        let inv = 1.0 / nsel as f64;
        let m = jets.output_dim();
        let d = self.points.ncols();
        for term in &self.terms {
            let w = term.weight;
            let mut s = 0.0;
            match &term.target {
                Target::Values(t) => {
                    for (q, &p) in logical.iter().enumerate() {
                        for k in 0..m {
                            let r = jets.value(q, k) - t[[p, k]];
                            s += r * r;
                            if let Some(a) = adj.as_deref_mut() {
                                a.add_value(q, k, 2.0 * w * inv * r);
                            }
                        }
                    }
                }
                Target::Jacobians(t) => {
                    for (q, &p) in logical.iter().enumerate() {
                        for k in 0..m {
                            for i in 0..d {
                                let r = jets.jac(q, k, i) - t[[p, k, i]];
                                s += r * r;
                                if let Some(a) = adj.as_deref_mut() {
                                    a.add_jac(q, k, i, 2.0 * w * inv * r);
                                }
                            }
                        }
                    }
                }
                Target::Partial { axis, targets } => {
                    for (q, &p) in logical.iter().enumerate() {
                        for k in 0..m {
                            let r = jets.jac(q, k, *axis) - targets[[p, k]];
                            s += r * r;
                            if let Some(a) = adj.as_deref_mut() {
                                a.add_jac(q, k, *axis, 2.0 * w * inv * r);
                            }
                        }
                    }
                }
                Target::Hessians(t) => {
                    for (q, &p) in logical.iter().enumerate() {
                        for k in 0..m {
                            for i in 0..d {
                                for j in 0..d {
                                    let r = jets.hess(q, k, i, j) - t[[p, k, i, j]];
                                    s += r * r;
                                    if let Some(a) = adj.as_deref_mut() {
                                        a.add_hess(q, k, i, j, 2.0 * w * inv * r);
                                    }
                                }
                            }
                        }
                    }
                }
                Target::Residual { problem, forcing } => {
                    let ne = problem.n_equations();
                    let mut buf = [0.0; 3];
                    for (q, &p) in logical.iter().enumerate() {
                        let x = self.points.row(p).to_vec();
                        problem.residual_at(jets, q, &x, forcing[p], &mut buf, None);
                        let mut g = [0.0; 3];
                        for e in 0..ne {
                            s += buf[e] * buf[e];
                            g[e] = 2.0 * w * inv * buf[e];
                        }
                        if let Some(a) = adj.as_deref_mut() {
                            problem.residual_at(jets, q, &x, forcing[p], &mut buf, Some((a, g)));
                        }
                    }
                }
                Target::Periodic { axis } => {
                    for q in 0..nsel {
                        let q2 = q + nsel;
                        for k in 0..m {
                            let r0 = jets.value(q, k) - jets.value(q2, k);
                            let r1 = jets.jac(q, k, *axis) - jets.jac(q2, k, *axis);
                            s += r0 * r0 + r1 * r1;
                            if let Some(a) = adj.as_deref_mut() {
                                let g0 = 2.0 * w * inv * r0;
                                let g1 = 2.0 * w * inv * r1;
                                a.add_value(q, k, g0);
                                a.add_value(q2, k, -g0);
                                a.add_jac(q, k, *axis, g1);
                                a.add_jac(q2, k, *axis, -g1);
                            }
                        }
                    }
                }
                Target::HessianProbe { dirs, targets, h } => {
                    let c = 1.0 / (2.0 * h);
                    for (q, &p) in logical.iter().enumerate() {
                        let q2 = q + nsel;
                        for k in 0..m {
                            let est: f64 = (0..d)
                                .map(|i| dirs[[p, i]] * (jets.jac(q, k, i) - jets.jac(q2, k, i)))
                                .sum::<f64>()
                                * c;
                            let r = est - targets[[p, k]];
                            s += r * r;
                            if let Some(a) = adj.as_deref_mut() {
                                let g = 2.0 * w * inv * r * c;
                                for i in 0..d {
                                    a.add_jac(q, k, i, g * dirs[[p, i]]);
                                    a.add_jac(q2, k, i, -g * dirs[[p, i]]);
                                }
                            }
                        }
                    }
                }
            }
            out.add(term.category, w * s * inv);
        }
    }
}

fn merge_layouts(a: &JetLayout, b: &JetLayout) -> JetLayout {
    let mut out = JetLayout::new(a.dim(), a.order().max(b.order()));
    for dir in a.third_directions().iter().chain(b.third_directions()) {
        if !out.third_directions().contains(dir) {
            out = out.with_third_direction(dir.clone()).expect("same dimension");
        }
    }
    out
}

/// A scalar training objective over one or more point sets.
pub trait Objective {
    /// Sample counts of each point set, for mini-batching.
    fn set_sizes(&self) -> Vec<usize>;

    /// Loss and, when `grad` is given, its parameter gradient added into it.
    /// `selection` restricts each set to the listed samples.
    fn evaluate(
        &self,
        net: &Network,
        selection: Option<&[Vec<usize>]>,
        grad: Option<&mut [f64]>,
    ) -> Result<LossBreakdown>;
}

/// Sum of weighted terms over blocks.
#[derive(Debug, Clone, Default)]
pub struct CompositeObjective {
    blocks: Vec<Block>,
}

impl CompositeObjective {
    pub fn new() -> Self {
        CompositeObjective::default()
    }

    pub fn push(&mut self, block: Block) {
        if !block.is_empty() {
            self.blocks.push(block);
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn extend(&mut self, other: CompositeObjective) {
        self.blocks.extend(other.blocks);
    }

    /// Loss of any model (network or closed-form stub), without gradient.
    pub fn value<A: Approximator + ?Sized>(&self, model: &A) -> Result<LossBreakdown> {
        let mut out = LossBreakdown::default();
        for block in &self.blocks {
            let logical: Vec<usize> = (0..block.len()).collect();
            let jets = model.jets(block.points.view(), &block.layout)?;
            block.evaluate(&jets, &logical, None, &mut out);
        }
        check_finite(&out)?;
        Ok(out)
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if !b.total.is_finite() {
        return Err(Error::numerical("loss", None));
    }
    Ok(())
}

impl Objective for CompositeObjective {
    fn set_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::len).collect()
    }

    fn evaluate(
        &self,
        net: &Network,
        selection: Option<&[Vec<usize>]>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<LossBreakdown> {
        let mut out = LossBreakdown::default();
        for (b, block) in self.blocks.iter().enumerate() {
            let logical: Vec<usize> = match selection {
                Some(s) => s[b].clone(),
                None => (0..block.len()).collect(),
            };
            if logical.is_empty() {
                continue;
            }
            let rows = block.rows(Some(&logical));
            let pts = if rows.len() == block.points.nrows() && selection.is_none() {
                block.points.clone()
            } else {
                block.points.select(ndarray::Axis(0), &rows)
            };
            match grad.as_deref_mut() {
                Some(g) => {
                    let split = std::cell::Cell::new(LossBreakdown::default());
                    let loss = |jets: &Jets, adj: &mut Jets| -> Result<f64> {
                        let mut local = LossBreakdown::default();
                        block.evaluate(jets, &logical, Some(adj), &mut local);
                        split.set(local);
                        Ok(local.total)
                    };
                    accumulate_loss_gradient(net, pts.view(), &block.layout, &loss, g)?;
                    let part = split.get();
                    out.add(Category::Domain, part.domain);
                    out.add(Category::Pde, part.pde);
                    out.add(Category::Boundary, part.bc);
                    out.add(Category::Initial, part.ic);
                }
                None => {
                    let jets = net.jets(pts.view(), &block.layout)?;
                    block.evaluate(&jets, &logical, None, &mut out);
                }
            }
        }
        check_finite(&out)?;
        Ok(out)
    }
}

fn require<'a, T>(arr: &'a Option<T>, name: &str) -> Result<&'a T> {
    arr.as_ref().ok_or_else(|| Error::Specification(name.to_string()))
}

/// Supervised terms of `method` on `set`, weighted by `weight`.
pub fn supervised_terms(
    method: Method,
    set: &CollocationSet,
    weight: f64,
    stochastic_hessian: bool,
    category: Category,
) -> Result<Vec<Block>> {
    let needs = method.needs();
    let mut main = Block::new(set.points.clone(), false);
    let mut extra = Vec::new();
    if needs.values {
        main.push(Term {
            target: Target::Values(require(&set.values, "values")?.clone()),
            weight,
            category,
        });
    }
    if needs.jacobians {
        main.push(Term {
            target: Target::Jacobians(require(&set.jacobians, "jacobians")?.clone()),
            weight,
            category,
        });
    }
    if needs.hessians {
        let h = require(&set.hessians, "hessians")?;
        if stochastic_hessian {
            extra.push(hessian_probe_block(set, h, weight, category));
        } else {
            main.push(Term {
                target: Target::Hessians(h.clone()),
                weight,
                category,
            });
        }
    }
    let mut blocks = vec![main];
    blocks.extend(extra);
    Ok(blocks)
}

/// Paired block `x ± h v` with one fixed Gaussian direction per point.
fn hessian_probe_block(set: &CollocationSet, h: &Array4<f64>, weight: f64, category: Category) -> Block {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let (n, m, d, _) = h.dim();
    let step = 1e-3;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let dirs = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    let targets = Array2::from_shape_fn((n, m), |(p, k)| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += dirs[[p, i]] * h[[p, k, i, j]] * dirs[[p, j]];
            }
        }
        s
    });
    let mut pts = Array2::zeros((2 * n, d));
    for p in 0..n {
        for i in 0..d {
            pts[[p, i]] = set.points[[p, i]] + step * dirs[[p, i]];
            pts[[p + n, i]] = set.points[[p, i]] - step * dirs[[p, i]];
        }
    }
    Block::new(pts, true).with_term(
        Target::HessianProbe {
            dirs,
            targets,
            h: step,
        },
        weight,
        category,
    )
}

/// Residual block on `points`.
pub fn residual_block(problem: &ProblemSpec, points: &Array2<f64>, weight: f64, category: Category) -> Result<Block> {
    let forcing = problem.forcing_batch(points.view())?;
    Ok(Block::new(points.clone(), false).with_term(
        Target::Residual {
            problem: problem.clone(),
            forcing,
        },
        weight,
        category,
    ))
}

/// Boundary-condition block for the problem's boundary kind.
pub fn boundary_block(problem: &ProblemSpec, boundary: &CollocationSet, weight: f64) -> Result<Option<Block>> {
    if boundary.is_empty() {
        return Ok(None);
    }
    match problem.boundary_kind() {
        BoundaryKind::None => Ok(None),
        BoundaryKind::Dirichlet => Ok(Some(Block::new(boundary.points.clone(), false).with_term(
            Target::Values(require(&boundary.values, "boundary values")?.clone()),
            weight,
            Category::Boundary,
        ))),
        BoundaryKind::Periodic { axis } => {
            let n = boundary.len();
            let lo = problem.domain.lower[axis];
            let hi = problem.domain.upper[axis];
            let mut pts = Array2::zeros((2 * n, boundary.dim()));
            for p in 0..n {
                pts.row_mut(p).assign(&boundary.points.row(p));
                pts.row_mut(p + n).assign(&boundary.points.row(p));
                pts[[p, axis]] = lo;
                pts[[p + n, axis]] = hi;
            }
            Ok(Some(Block::new(pts, true).with_term(
                Target::Periodic { axis },
                weight,
                Category::Boundary,
            )))
        }
    }
}

/// Initial-condition block: values, plus the initial rate for systems that
/// are second order in time.
pub fn initial_block(problem: &ProblemSpec, initial: &CollocationSet, weight: f64) -> Result<Option<Block>> {
    let Some(t_axis) = problem.domain.time_axis else {
        return Ok(None);
    };
    if initial.is_empty() {
        return Ok(None);
    }
    let mut block = Block::new(initial.points.clone(), false).with_term(
        Target::Values(require(&initial.values, "initial values")?.clone()),
        weight,
        Category::Initial,
    );
    let rates: Option<Vec<Vec<f64>>> = initial
        .points
        .rows()
        .into_iter()
        .map(|r| problem.initial_rate(&r.to_vec()))
        .collect();
    if let Some(rates) = rates {
        let m = problem.output_dim();
        let targets = Array2::from_shape_fn((initial.len(), m), |(p, k)| rates[p][k]);
        block.push(Term {
            target: Target::Partial {
                axis: t_axis,
                targets,
            },
            weight,
            category: Category::Initial,
        });
    }
    Ok(Some(block))
}

/// The composite objective of a method, assembled from its loss ledger.
pub fn composite_objective(
    spec: &LossSpec,
    problem: &ProblemSpec,
    interior: &CollocationSet,
    boundary: &CollocationSet,
    initial: Option<&CollocationSet>,
) -> Result<CompositeObjective> {
    spec.validate()?;
    interior.validate()?;
    let mut obj = CompositeObjective::new();
    if spec.method != Method::Pinn {
        let blocks = supervised_terms(
            spec.method,
            interior,
            spec.lambda_d,
            spec.stochastic_hessian,
            Category::Domain,
        )?;
        // residual shares the interior jet pass for OUTL_PINN
        let mut blocks = blocks.into_iter();
        let mut main = blocks.next().expect("at least one block");
        if spec.method == Method::OutlPinn {
            main.push(Term {
                target: Target::Residual {
                    problem: problem.clone(),
                    forcing: problem.forcing_batch(interior.points.view())?,
                },
                weight: spec.lambda_p,
                category: Category::Pde,
            });
        }
        obj.push(main);
        blocks.for_each(|b| obj.push(b));
    } else {
        obj.push(residual_block(problem, &interior.points, spec.lambda_d, Category::Pde)?);
    }
    if let Some(b) = boundary_block(problem, boundary, spec.lambda_b)? {
        obj.push(b);
    }
    if let Some(init) = initial {
        if let Some(b) = initial_block(problem, init, spec.lambda_i)? {
            obj.push(b);
        }
    }
    Ok(obj)
}

/// Value of the composite loss for `model`.
pub fn composite_loss<A: Approximator + ?Sized>(
    spec: &LossSpec,
    problem: &ProblemSpec,
    interior: &CollocationSet,
    boundary: &CollocationSet,
    initial: Option<&CollocationSet>,
    model: &A,
) -> Result<f64> {
    Ok(composite_objective(spec, problem, interior, boundary, initial)?
        .value(model)?
        .total)
}
