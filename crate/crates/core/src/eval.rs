//! Test-grid metrics: solution and derivative errors, residual norms and the
//! problem-specific extras. All norms are mean squared values.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Approximator, DerivOrder, JetLayout};
use crate::error::{Error, Result};
use crate::losses::{CollocationSet, Region};
use crate::problems::{pendulum_g_residual, vorticity_error, AnalyticModel, ProblemName, ProblemSpec};
use crate::solvers::GridField;

/// Where the test points came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub n_points: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// nodes per axis for regular grids
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub problem: ProblemName,
    pub units: String,
    pub l2_u: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_du: Option<f64>,
    /// sum of the per-equation residual norms
    pub residual: f64,
    pub residual_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vorticity_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_err_t0: Option<f64>,
    pub grid: GridDescriptor,
}

pub const UNITS: &str = "mean squared";

impl MetricsReport {
    /// Every scalar, by name, in a fixed order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = vec![("l2_u".to_string(), self.l2_u)];
        if let Some(v) = self.l2_du {
            out.push(("l2_du".into(), v));
        }
        out.push(("residual".into(), self.residual));
        if self.residual_norms.len() > 1 {
            for (e, v) in self.residual_norms.iter().enumerate() {
                out.push((format!("residual_{e}"), *v));
            }
        }
        for (name, v) in [
            ("vorticity_err", self.vorticity_err),
            ("g_residual", self.g_residual),
            ("field_err_t0", self.field_err_t0),
        ] {
            if let Some(v) = v {
                out.push((name.into(), v));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.scalars() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::numerical(format!("metric {name} = {v}"), None));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn mean_sq_rows(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>() / a.nrows() as f64
}

/// Metrics of `model` against the reference targets in `test`.
pub fn evaluate<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    test: &CollocationSet,
) -> Result<MetricsReport> {
    test.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(p) = test.points.rows().into_iter().position(|r| !problem.domain.contains(&r.to_vec())) {
        return Err(Error::Domain(format!("test point {p} lies outside the problem domain")));
    }
    let values = test
        .values
        .as_ref()
        .ok_or_else(|| Error::Specification("test values".into()))?;
    let d = test.dim();
    let order = if test.jacobians.is_some() {
        DerivOrder::First
    } else {
        DerivOrder::Value
    };
    let jets = model.jets(test.points.view(), &JetLayout::new(d, order))?;
    let (n, m) = values.dim();
    if m != model.output_dim() {
        return Err(Error::Shape(format!(
            "reference has {m} components, model {}",
            model.output_dim()
        )));
    }
    let err = Array2::from_shape_fn((n, m), |(p, k)| jets.value(p, k) - values[[p, k]]);
    let l2_u = mean_sq_rows(err.view());
    let l2_du = test.jacobians.as_ref().map(|jac| {
        let mut s = 0.0;
        for p in 0..n {
            for k in 0..m {
                for i in 0..d {
                    s += (jets.jac(p, k, i) - jac[[p, k, i]]).powi(2);
                }
            }
        }
        s / n as f64
    });

    let res = problem.residuals(model, test.points.view())?;
    let residual_norms: Vec<f64> = (0..res.ncols())
        .map(|e| res.column(e).iter().map(|v| v * v).sum::<f64>() / n as f64)
        .collect();
    let residual = residual_norms.iter().sum();

    let mut report = MetricsReport {
        problem: problem.name,
        units: UNITS.into(),
        l2_u,
        l2_du,
        residual,
        residual_norms,
        vorticity_err: None,
        g_residual: None,
        field_err_t0: None,
        grid: GridDescriptor {
            n_points: n,
            lower: problem.domain.lower.clone(),
            upper: problem.domain.upper.clone(),
            counts: None,
        },
    };
    match problem.name {
        ProblemName::Kovasznay => {
            report.vorticity_err = Some(vorticity_error(problem, model, test.points.view())?);
        }
        ProblemName::Pendulum => {
            let g = pendulum_g_residual(problem, model, test.points.view())?;
            report.g_residual = Some(mean_sq_rows(g.view()));
            let mut t0 = test.points.clone();
            t0.column_mut(0).fill(problem.domain.lower[0]);
            let j0 = model.jets(t0.view(), &JetLayout::new(d, DerivOrder::Value))?;
            let e = (0..n).map(|p| (j0.value(p, 0) - t0[[p, 1]]).powi(2)).sum::<f64>() / n as f64;
            report.field_err_t0 = Some(e);
        }
        _ => {}
    }
    report.validate()?;
    Ok(report)
}

/// Metrics on the nodes of a reference grid.
pub fn evaluate_grid<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    reference: &GridField,
) -> Result<MetricsReport> {
    let mut r = evaluate(problem, model, &grid_set(reference))?;
    r.grid.counts = Some(reference.shape());
    Ok(r)
}

/// The nodes of `field` as a test set with its components as values.
pub fn grid_set(field: &GridField) -> CollocationSet {
    let pts = field.points();
    let m = field.components;
    let values = Array2::from_shape_vec((field.num_nodes(), m), field.data.clone()).expect("node-major data");
    let mut set = CollocationSet::new(pts, Region::Interior);
    set.values = Some(values);
    set
}

/// Closed-form solution sampled on a regular grid over the problem domain.
pub fn analytic_grid(problem: &ProblemSpec, counts: &[usize]) -> Result<GridField> {
    let stub = AnalyticModel::new(problem)?;
    let d = problem.input_dim();
    if counts.len() != d {
        return Err(Error::Shape(format!("{} counts for {d} axes", counts.len())));
    }
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|i| crate::problems::linspace(problem.domain.lower[i], problem.domain.upper[i], counts[i]))
        .collect();
    let names: Vec<&str> = problem.domain.coords.iter().map(String::as_str).collect();
    let mut field = GridField::zeros(&names, axes, problem.output_dim());
    let set = CollocationSet::from_model(&stub, field.points(), Region::Interior, DerivOrder::Value)?;
    field.data = set.values.expect("values").iter().copied().collect();
    Ok(field)
}

/// Per-node squared solution error (summed over components) and squared
/// residual norm, as a two-component field on the reference grid.
pub fn error_field<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    reference: &GridField,
) -> Result<GridField> {
    let pts = reference.points();
    let m = reference.components;
    if m != model.output_dim() {
        return Err(Error::Shape(format!("reference has {m} components, model {}", model.output_dim())));
    }
    let jets = model.jets(pts.view(), &JetLayout::new(pts.ncols(), DerivOrder::Value))?;
    let res = problem.residuals(model, pts.view())?;
    let n = pts.nrows();
    let mut data = Vec::with_capacity(2 * n);
    for p in 0..n {
        let e: f64 = (0..m).map(|k| (jets.value(p, k) - reference.data[p * m + k]).powi(2)).sum();
        let r: f64 = res.row(p).iter().map(|v| v * v).sum();
        data.push(e);
        data.push(r);
    }
    let names: Vec<&str> = reference.names.iter().map(String::as_str).collect();
    GridField::new(&names, reference.axes.clone(), 2, data)
}

/// `a − b` on identical grids.
pub fn diff_fields(a: &GridField, b: &GridField) -> Result<GridField> {
    if a.axes != b.axes || a.components != b.components || a.names != b.names {
        return Err(Error::Shape(format!(
            "grids differ: {:?}×{} vs {:?}×{}",
            a.shape(),
            a.components,
            b.shape(),
            b.components
        )));
    }
    let mut out = a.clone();
    out.meta.clear();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o -= v;
    }
    Ok(out)
}
