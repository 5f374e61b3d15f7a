//! Benchmark systems: domains, residual operators, closed-form solutions,
//! forcing terms and initial/boundary data.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Approximator, DerivOrder, Dual2, JetLayout, Jets, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemName {
    #[serde(rename = "allen_cahn")]
    AllenCahn,
    #[serde(rename = "allen_cahn_1p")]
    AllenCahn1P,
    #[serde(rename = "allen_cahn_2p")]
    AllenCahn2P,
    #[serde(rename = "continuity")]
    Continuity,
    #[serde(rename = "kovasznay")]
    Kovasznay,
    #[serde(rename = "pendulum")]
    Pendulum,
    #[serde(rename = "kdv")]
    KdV,
}

impl ProblemName {
    pub const ALL: [ProblemName; 7] = [
        ProblemName::AllenCahn,
        ProblemName::AllenCahn1P,
        ProblemName::AllenCahn2P,
        ProblemName::Continuity,
        ProblemName::Kovasznay,
        ProblemName::Pendulum,
        ProblemName::KdV,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemName::AllenCahn => "allen_cahn",
            ProblemName::AllenCahn1P => "allen_cahn_1p",
            ProblemName::AllenCahn2P => "allen_cahn_2p",
            ProblemName::Continuity => "continuity",
            ProblemName::Kovasznay => "kovasznay",
            ProblemName::Pendulum => "pendulum",
            ProblemName::KdV => "kdv",
        }
    }

    pub fn is_allen_cahn(self) -> bool {
        matches!(
            self,
            ProblemName::AllenCahn | ProblemName::AllenCahn1P | ProblemName::AllenCahn2P
        )
    }
}

impl std::fmt::Display for ProblemName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Analytic,
    Solver,
}

/// Axis-aligned box over every network input (time, space, parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub coords: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time_axis: Option<usize>,
    pub param_axes: Vec<usize>,
}

impl Domain {
    /// `params` lists the axes that are problem parameters rather than
    /// space; a coordinate named `t` is the time axis.
    pub fn new(coords: &[&str], lower: Vec<f64>, upper: Vec<f64>, params: &[usize]) -> Self {
        Domain {
            coords: coords.iter().map(|s| s.to_string()).collect(),
            lower,
            upper,
            time_axis: coords.iter().position(|c| *c == "t"),
            param_axes: params.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn spatial_axes(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|i| Some(*i) != self.time_axis && !self.param_axes.contains(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.lower.len() != d || self.upper.len() != d {
            return Err(Error::config("problem.domain", "bounds do not match coordinates"));
        }
        for i in 0..d {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::config(
                    format!("problem.domain.{}", self.coords[i]),
                    format!("lower bound {} is not below upper {}", self.lower[i], self.upper[i]),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo - 1e-12 && *v <= *hi + 1e-12)
    }

    /// Copy with the bounds of one axis replaced.
    pub fn with_axis(&self, axis: usize, lo: f64, hi: f64) -> Domain {
        let mut d = self.clone();
        d.lower[axis] = lo;
        d.upper[axis] = hi;
        d
    }

    pub fn sample_interior<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for p in 0..n {
            for i in 0..d {
                out[[p, i]] = rng.random_range(self.lower[i]..self.upper[i]);
            }
        }
        out
    }

    /// Uniform points on the spatial boundary; time and parameters stay
    /// uniform over their ranges.
    pub fn sample_boundary<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let spatial = self.spatial_axes();
        let mut out = self.sample_interior(n, rng);
        if spatial.is_empty() {
            return out;
        }
        // faces weighted by their measure
        let widths: Vec<f64> = spatial
            .iter()
            .map(|&i| self.upper[i] - self.lower[i])
            .collect();
        let face_measure: Vec<f64> = (0..spatial.len())
            .map(|f| {
                widths
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != f)
                    .map(|(_, w)| w)
                    .product::<f64>()
            })
            .collect();
        let total: f64 = face_measure.iter().sum::<f64>() * 2.0;
        for p in 0..n {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = (0, false);
            'faces: for (f, m) in face_measure.iter().enumerate() {
                for upper in [false, true] {
                    if r < *m {
                        chosen = (f, upper);
                        break 'faces;
                    }
                    r -= m;
                }
                chosen = (f, true);
            }
            let axis = spatial[chosen.0];
            out[[p, axis]] = if chosen.1 { self.upper[axis] } else { self.lower[axis] };
        }
        out
    }

    /// Points on the lower face of one axis (`time_axis` for initial data).
    pub fn sample_face<R: Rng>(&self, axis: usize, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = self.sample_interior(n, rng);
        out.column_mut(axis).fill(self.lower[axis]);
        out
    }

    /// Regular grid with `counts[i]` nodes per axis, row-major over axes.
    pub fn grid(&self, counts: &[usize]) -> Array2<f64> {
        let axes: Vec<Vec<f64>> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| linspace(self.lower[i], self.upper[i], c))
            .collect();
        grid_points(&axes)
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Cartesian product of axis coordinates, last axis fastest.
pub fn grid_points(axes: &[Vec<f64>]) -> Array2<f64> {
    let total: usize = axes.iter().map(Vec::len).product();
    let d = axes.len();
    let mut out = Array2::zeros((total, d));
    for p in 0..total {
        let mut rem = p;
        for i in (0..d).rev() {
            let len = axes[i].len();
            out[[p, i]] = axes[i][rem % len];
            rem /= len;
        }
    }
    out
}

/// How boundary data is imposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryKind {
    /// Fixed values `b(x)` on the spatial boundary.
    Dirichlet,
    /// `u` and `u_x` agree on opposite faces of this axis.
    Periodic { axis: usize },
    /// No spatial boundary (ODE flows).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: ProblemName,
    pub domain: Domain,
    /// Allen-Cahn diffusion coefficient
    pub lambda: f64,
    /// viscosity (Kovasznay) or dispersion (KdV)
    pub nu: f64,
    pub g_over_l: f64,
    pub b_over_m: f64,
    pub reference: Reference,
}

/// Continuity initial density: four isotropic Gaussians.
pub const GAUSSIAN_CENTERS: [(f64, f64); 4] = [(0.6, 0.6), (-0.6, 0.6), (-0.6, -0.6), (0.6, -0.6)];
pub const GAUSSIAN_SIGMA: f64 = 0.2;

impl ProblemSpec {
    pub fn new(name: ProblemName) -> Self {
        let (domain, reference) = match name {
            ProblemName::AllenCahn => (
                Domain::new(&["x", "y"], vec![-1.0, -1.0], vec![1.0, 1.0], &[]),
                Reference::Analytic,
            ),
            ProblemName::AllenCahn1P => (
                Domain::new(&["x", "y", "xi"], vec![-1.0, -1.0, 0.0], vec![1.0, 1.0, PI], &[2]),
                Reference::Analytic,
            ),
            ProblemName::AllenCahn2P => (
                Domain::new(
                    &["x", "y", "xi1", "xi2"],
                    vec![-1.0, -1.0, 0.0, 0.0],
                    vec![1.0, 1.0, 1.0, 1.0],
                    &[2, 3],
                ),
                Reference::Analytic,
            ),
            ProblemName::Continuity => (
                Domain::new(&["t", "x", "y"], vec![0.0, -1.5, -1.5], vec![10.0, 1.5, 1.5], &[]),
                Reference::Solver,
            ),
            ProblemName::Kovasznay => (
                Domain::new(&["x", "y"], vec![-1.0, -0.5], vec![1.0, 1.5], &[]),
                Reference::Analytic,
            ),
            ProblemName::Pendulum => (
                Domain::new(
                    &["t", "u0", "v0"],
                    vec![0.0, -PI / 2.0, -1.5],
                    vec![10.0, PI / 2.0, 1.5],
                    &[1, 2],
                ),
                Reference::Solver,
            ),
            ProblemName::KdV => (
                Domain::new(&["t", "x"], vec![0.0, -1.0], vec![1.0, 1.0], &[]),
                Reference::Solver,
            ),
        };
        let nu = match name {
            ProblemName::Kovasznay => 1.0 / 50.0,
            ProblemName::KdV => 0.0025,
            _ => 0.0,
        };
        ProblemSpec {
            name,
            domain,
            lambda: 0.01,
            nu,
            g_over_l: 9.81,
            b_over_m: 0.3,
            reference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.domain.dim() != self.input_dim() {
            return Err(Error::config(
                "problem.domain",
                format!("{} expects {} coordinates", self.name, self.input_dim()),
            ));
        }
        for (v, path) in [
            (self.lambda, "problem.lambda"),
            (self.nu, "problem.nu"),
            (self.g_over_l, "problem.g_over_l"),
            (self.b_over_m, "problem.b_over_m"),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(path, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.name {
            ProblemName::AllenCahn | ProblemName::Kovasznay | ProblemName::KdV => 2,
            ProblemName::AllenCahn1P | ProblemName::Continuity | ProblemName::Pendulum => 3,
            ProblemName::AllenCahn2P => 4,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.name {
            ProblemName::Kovasznay => 3,
            _ => 1,
        }
    }

    pub fn n_equations(&self) -> usize {
        self.output_dim()
    }

    pub fn residual_order(&self) -> usize {
        match self.name {
            ProblemName::Continuity => 1,
            ProblemName::KdV => 3,
            _ => 2,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.domain.time_axis.is_some()
    }

    pub fn boundary_kind(&self) -> BoundaryKind {
        match self.name {
            ProblemName::KdV => BoundaryKind::Periodic { axis: 1 },
            ProblemName::Pendulum => BoundaryKind::None,
            _ => BoundaryKind::Dirichlet,
        }
    }

    /// Jet channels needed to evaluate the residual.
    pub fn residual_layout(&self) -> JetLayout {
        let d = self.input_dim();
        match self.name {
            ProblemName::Continuity => JetLayout::new(d, DerivOrder::First),
            ProblemName::KdV => JetLayout::new(d, DerivOrder::Second)
                .with_third_axis(1)
                .expect("x axis exists"),
            _ => JetLayout::new(d, DerivOrder::Second),
        }
    }

    /// Kovasznay decay rate `1/(2ν) − sqrt(1/(4ν²) + 4π²)`.
    pub fn kovasznay_lambda(&self) -> f64 {
        let nu = self.nu;
        1.0 / (2.0 * nu) - (1.0 / (4.0 * nu * nu) + 4.0 * PI * PI).sqrt()
    }

    fn require_analytic(&self) -> Result<()> {
        if self.reference != Reference::Analytic {
            return Err(Error::Capability(format!(
                "{} has no closed-form solution",
                self.name
            )));
        }
        Ok(())
    }

    /// Closed-form solution written once for plain floats and dual numbers.
    pub fn analytic<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        self.require_analytic()?;
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "{} takes {} coordinates, got {}",
                self.name,
                self.input_dim(),
                x.len()
            )));
        }
        let pi = T::cst(PI);
        Ok(match self.name {
            ProblemName::AllenCahn => vec![(pi * x[0]).sin() * (pi * x[1]).sin()],
            ProblemName::AllenCahn1P => {
                let decay = (-(x[2] * (x[0] + T::cst(0.7)))).exp();
                vec![decay * (pi * x[0]).sin() * (pi * x[1]).sin()]
            }
            ProblemName::AllenCahn2P => {
                let mut u = T::cst(0.0);
                for j in 1..=2 {
                    let jp = T::cst(j as f64 * PI);
                    u = u + x[1 + j] * (jp * x[0]).sin() * (jp * x[1]).sin()
                        / T::cst((j * j) as f64);
                }
                vec![u]
            }
            ProblemName::Kovasznay => {
                let lam = T::cst(self.kovasznay_lambda());
                let two_pi = T::cst(2.0 * PI);
                let e = (lam * x[0]).exp();
                let u = T::cst(1.0) - e * (two_pi * x[1]).cos();
                let v = lam / two_pi * e * (two_pi * x[1]).sin();
                let p = T::cst(0.5) * (T::cst(1.0) - (T::cst(2.0) * lam * x[0]).exp());
                vec![u, v, p]
            }
            _ => unreachable!("checked by require_analytic"),
        })
    }

    pub fn analytic_solution(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.analytic(x)
    }

    /// Closed-form values with gradients and Hessians over all inputs.
    pub fn analytic_derivatives(&self, x: &[f64]) -> Result<Vec<Dual2>> {
        self.analytic(&Dual2::variables(x))
    }

    /// Allen-Cahn forcing `f = λ(u_xx + u_yy) + u(u² − 1)` of the closed form.
    pub fn forcing(&self, x: &[f64]) -> Result<f64> {
        if !self.name.is_allen_cahn() {
            return Err(Error::Capability(format!("{} has no forcing term", self.name)));
        }
        let u = self.analytic_derivatives(x)?[0];
        Ok(self.lambda * (u.h[0][0] + u.h[1][1]) + u.v * (u.v * u.v - 1.0))
    }

    /// Initial data `g` at a point whose time coordinate is ignored.
    pub fn initial_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.name {
            ProblemName::Continuity => Ok(vec![continuity_ic(x[1], x[2])]),
            ProblemName::KdV => Ok(vec![(PI * x[1]).cos()]),
            ProblemName::Pendulum => Ok(vec![x[1]]),
            _ => Err(Error::Capability(format!("{} is time independent", self.name))),
        }
    }

    /// Initial time derivative, when the system is second order in time.
    pub fn initial_rate(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self.name {
            ProblemName::Pendulum => Some(vec![x[2]]),
            _ => None,
        }
    }

    /// Dirichlet boundary data `b`.
    pub fn boundary_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.name {
            ProblemName::Continuity => Ok(vec![0.0]),
            // sin vanishes on every spatial face; avoid the 1e-16 of sin(π)
            n if n.is_allen_cahn()
                && self.domain.spatial_axes().iter().any(|&a| {
                    x.get(a) == Some(&self.domain.lower[a]) || x.get(a) == Some(&self.domain.upper[a])
                }) =>
            {
                Ok(vec![0.0])
            }
            _ if self.reference == Reference::Analytic => self.analytic(x),
            _ => Err(Error::Capability(format!(
                "{} has no Dirichlet boundary data",
                self.name
            ))),
        }
    }

    /// Residual of point `p` of `jets`, written into `out[..n_equations]`.
    /// When `adj` is given, `dL/dF_e * ∂F_e/∂jets` is accumulated into it.
    pub fn residual_at(
        &self,
        jets: &Jets,
        p: usize,
        x: &[f64],
        forcing: f64,
        out: &mut [f64; 3],
        adj: Option<(&mut Jets, [f64; 3])>,
    ) {
        match self.name {
            ProblemName::AllenCahn | ProblemName::AllenCahn1P | ProblemName::AllenCahn2P => {
                let u = jets.value(p, 0);
                let lap = jets.hess(p, 0, 0, 0) + jets.hess(p, 0, 1, 1);
                out[0] = self.lambda * lap + u * (u * u - 1.0) - forcing;
                if let Some((a, w)) = adj {
                    a.add_value(p, 0, w[0] * (3.0 * u * u - 1.0));
                    a.add_hess(p, 0, 0, 0, w[0] * self.lambda);
                    a.add_hess(p, 0, 1, 1, w[0] * self.lambda);
                }
            }
            ProblemName::Continuity => {
                let (xx, yy) = (x[1], x[2]);
                out[0] = jets.jac(p, 0, 0) - yy * jets.jac(p, 0, 1) + xx * jets.jac(p, 0, 2);
                if let Some((a, w)) = adj {
                    a.add_jac(p, 0, 0, w[0]);
                    a.add_jac(p, 0, 1, -yy * w[0]);
                    a.add_jac(p, 0, 2, xx * w[0]);
                }
            }
            ProblemName::KdV => {
                let u = jets.value(p, 0);
                let ux = jets.jac(p, 0, 1);
                out[0] = jets.jac(p, 0, 0) + u * ux + self.nu * jets.third(p, 0, 0);
                if let Some((a, w)) = adj {
                    a.add_jac(p, 0, 0, w[0]);
                    a.add_value(p, 0, w[0] * ux);
                    a.add_jac(p, 0, 1, w[0] * u);
                    a.add_third(p, 0, 0, w[0] * self.nu);
                }
            }
            ProblemName::Pendulum => {
                let u = jets.value(p, 0);
                let (s, c) = u.sin_cos();
                out[0] = jets.hess(p, 0, 0, 0) + self.g_over_l * s + self.b_over_m * jets.jac(p, 0, 0);
                if let Some((a, w)) = adj {
                    a.add_hess(p, 0, 0, 0, w[0]);
                    a.add_value(p, 0, w[0] * self.g_over_l * c);
                    a.add_jac(p, 0, 0, w[0] * self.b_over_m);
                }
            }
            ProblemName::Kovasznay => {
                let nu = self.nu;
                let (u, v) = (jets.value(p, 0), jets.value(p, 1));
                let (ux, uy) = (jets.jac(p, 0, 0), jets.jac(p, 0, 1));
                let (vx, vy) = (jets.jac(p, 1, 0), jets.jac(p, 1, 1));
                let (px, py) = (jets.jac(p, 2, 0), jets.jac(p, 2, 1));
                let lap_u = jets.hess(p, 0, 0, 0) + jets.hess(p, 0, 1, 1);
                let lap_v = jets.hess(p, 1, 0, 0) + jets.hess(p, 1, 1, 1);
                out[0] = u * ux + v * uy + px - nu * lap_u;
                out[1] = u * vx + v * vy + py - nu * lap_v;
                out[2] = ux + vy;
                if let Some((a, w)) = adj {
                    a.add_value(p, 0, w[0] * ux + w[1] * vx);
                    a.add_value(p, 1, w[0] * uy + w[1] * vy);
                    a.add_jac(p, 0, 0, w[0] * u + w[2]);
                    a.add_jac(p, 0, 1, w[0] * v);
                    a.add_jac(p, 1, 0, w[1] * u);
                    a.add_jac(p, 1, 1, w[1] * v + w[2]);
                    a.add_jac(p, 2, 0, w[0]);
                    a.add_jac(p, 2, 1, w[1]);
                    for ax in 0..2 {
                        a.add_hess(p, 0, ax, ax, -nu * w[0]);
                        a.add_hess(p, 1, ax, ax, -nu * w[1]);
                    }
                }
            }
        }
    }

    /// Forcing per row of `points` (zeros outside the Allen-Cahn family).
    pub fn forcing_batch(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        if !self.name.is_allen_cahn() {
            return Ok(vec![0.0; points.nrows()]);
        }
        points
            .rows()
            .into_iter()
            .map(|r| self.forcing(&r.to_vec()))
            .collect()
    }

    /// Residual vectors of `model` at every row of `points`, `N × n_equations`.
    pub fn residuals<A: Approximator + ?Sized>(
        &self,
        model: &A,
        points: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        check_model(self, model)?;
        let jets = model.jets(points, &self.residual_layout())?;
        let forcing = self.forcing_batch(points)?;
        let ne = self.n_equations();
        let mut out = Array2::zeros((points.nrows(), ne));
        let mut buf = [0.0; 3];
        for (p, row) in points.rows().into_iter().enumerate() {
            let x = row.to_vec();
            self.residual_at(&jets, p, &x, forcing[p], &mut buf, None);
            for e in 0..ne {
                out[[p, e]] = buf[e];
            }
        }
        Ok(out)
    }

    /// Manifest entry describing the problem and its fixed choices.
    pub fn manifest(&self) -> serde_json::Value {
        let ic = match self.name {
            ProblemName::Continuity => serde_json::json!({
                "kind": "gaussians",
                "centers": GAUSSIAN_CENTERS,
                "sigma": GAUSSIAN_SIGMA,
                "amplitude": 1.0,
            }),
            ProblemName::KdV => serde_json::json!({"kind": "cos(pi x)"}),
            ProblemName::Pendulum => serde_json::json!({"kind": "u(0)=u0, u_t(0)=v0"}),
            _ => serde_json::Value::Null,
        };
        serde_json::json!({
            "name": self.name,
            "domain": self.domain,
            "lambda": self.lambda,
            "nu": self.nu,
            "g_over_l": self.g_over_l,
            "b_over_m": self.b_over_m,
            "reference": self.reference,
            "initial_condition": ic,
        })
    }
}

fn check_model<A: Approximator + ?Sized>(problem: &ProblemSpec, model: &A) -> Result<()> {
    if model.input_dim() != problem.input_dim() || model.output_dim() != problem.output_dim() {
        return Err(Error::Shape(format!(
            "{} needs a {}→{} model, got {}→{}",
            problem.name,
            problem.input_dim(),
            problem.output_dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    Ok(())
}

pub fn continuity_ic(x: f64, y: f64) -> f64 {
    let s2 = 2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
    GAUSSIAN_CENTERS
        .iter()
        .map(|(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / s2).exp())
        .sum()
}

/// `(u̇, ü)` of the damped pendulum.
pub fn pendulum_rhs(state: [f64; 2], g_over_l: f64, b_over_m: f64) -> [f64; 2] {
    [state[1], -g_over_l * state[0].sin() - b_over_m * state[1]]
}

/// `½u̇² + (g/l)(1 − cos u)`.
pub fn pendulum_energy(state: [f64; 2], g_over_l: f64) -> f64 {
    0.5 * state[1] * state[1] + g_over_l * (1.0 - state[0].cos())
}

/// Residuals of the pendulum ODE differentiated with respect to `u0` and `v0`.
///
/// The third derivatives `∂³u/∂t²∂a` come from pure third derivatives along
/// `a ± t` and `a` by polarization.
pub fn pendulum_g_residual<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    points: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if problem.name != ProblemName::Pendulum {
        return Err(Error::Capability(format!("{} has no G operator", problem.name)));
    }
    check_model(problem, model)?;
    let mut layout = JetLayout::new(3, DerivOrder::Second);
    for a in [1usize, 2] {
        for sign in [1.0, -1.0] {
            let mut dir = vec![0.0; 3];
            dir[a] = 1.0;
            dir[0] = sign;
            layout = layout.with_third_direction(dir)?;
        }
        let mut dir = vec![0.0; 3];
        dir[a] = 1.0;
        layout = layout.with_third_direction(dir)?;
    }
    let jets = model.jets(points, &layout)?;
    let n = points.nrows();
    let mut out = Array2::zeros((n, 2));
    for p in 0..n {
        let u = jets.value(p, 0);
        for (q, a) in [1usize, 2].into_iter().enumerate() {
            let base = 3 * q;
            let u_tta = (jets.third(p, 0, base) + jets.third(p, 0, base + 1)
                - 2.0 * jets.third(p, 0, base + 2))
                / 6.0;
            out[[p, q]] = u_tta
                + problem.g_over_l * u.cos() * jets.jac(p, 0, a)
                + problem.b_over_m * jets.hess(p, 0, 0, a);
        }
    }
    Ok(out)
}

/// Closed-form Kovasznay vorticity `(λ/ν) e^{λx} sin(2πy) / (2π)`.
pub fn kovasznay_vorticity(problem: &ProblemSpec, x: f64, y: f64) -> f64 {
    let lam = problem.kovasznay_lambda();
    lam / problem.nu * (lam * x).exp() * (2.0 * PI * y).sin() / (2.0 * PI)
}

/// MSE between the model's vorticity `v_x − u_y` and the closed form.
pub fn vorticity_error<A: Approximator + ?Sized>(
    problem: &ProblemSpec,
    model: &A,
    points: ArrayView2<f64>,
) -> Result<f64> {
    if model.output_dim() != 3 || model.input_dim() != 2 {
        return Err(Error::Shape(format!(
            "vorticity needs a 2→3 model, got {}→{}",
            model.input_dim(),
            model.output_dim()
        )));
    }
    let n = points.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let jets = model.jets(points, &JetLayout::new(2, DerivOrder::First))?;
    let mut s = 0.0;
    for p in 0..n {
        let w_hat = jets.jac(p, 1, 0) - jets.jac(p, 0, 1);
        let w = kovasznay_vorticity(problem, points[[p, 0]], points[[p, 1]]);
        s += (w_hat - w).powi(2);
    }
    Ok(s / n as f64)
}

/// A closed-form solution exposed as a model, for residual anchors.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    problem: ProblemSpec,
}

impl AnalyticModel {
    pub fn new(problem: &ProblemSpec) -> Result<Self> {
        problem.require_analytic()?;
        Ok(AnalyticModel {
            problem: problem.clone(),
        })
    }
}

impl Approximator for AnalyticModel {
    fn input_dim(&self) -> usize {
        self.problem.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.problem.output_dim()
    }

    fn jets(&self, points: ArrayView2<f64>, layout: &JetLayout) -> Result<Jets> {
        if !layout.third_directions().is_empty() {
            return Err(Error::Capability(
                "closed-form stub supplies derivatives up to second order".into(),
            ));
        }
        let d = self.input_dim();
        let mut jets = Jets::zeros(layout, self.output_dim(), points.nrows());
        for (p, row) in points.rows().into_iter().enumerate() {
            let u = self.problem.analytic_derivatives(&row.to_vec())?;
            for (k, uk) in u.iter().enumerate() {
                jets.add_value(p, k, uk.v);
                if layout.order() >= DerivOrder::First {
                    for i in 0..d {
                        jets.add_jac(p, k, i, uk.g[i]);
                    }
                }
                if layout.order() >= DerivOrder::Second {
                    for i in 0..d {
                        for j in i..d {
                            jets.add_hess(p, k, i, j, uk.h[i][j]);
                        }
                    }
                }
            }
        }
        Ok(jets)
    }
}
