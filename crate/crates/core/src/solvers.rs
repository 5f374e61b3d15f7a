//! Reference solutions and empirical derivatives: RK4 trajectories,
//! upwind finite volumes for the continuity equation, a Fourier
//! pseudo-spectral KdV solver, difference quotients and cubic interpolation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{linspace, pendulum_rhs, Domain};

/// Values on a regular grid; the last axis varies fastest and components
/// are innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub names: Vec<String>,
    pub axes: Vec<Vec<f64>>,
    pub components: usize,
    pub data: Vec<f64>,
    pub meta: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    format: String,
    dtype: String,
    order: String,
    names: Vec<String>,
    axes: Vec<Vec<f64>>,
    shape: Vec<usize>,
    components: usize,
    meta: BTreeMap<String, f64>,
}

impl GridField {
    pub fn new(names: &[&str], axes: Vec<Vec<f64>>, components: usize, data: Vec<f64>) -> Result<Self> {
        let g = GridField {
            names: names.iter().map(|s| s.to_string()).collect(),
            axes,
            components,
            data,
            meta: BTreeMap::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn zeros(names: &[&str], axes: Vec<Vec<f64>>, components: usize) -> Self {
        let n: usize = axes.iter().map(Vec::len).product::<usize>() * components;
        GridField {
            names: names.iter().map(|s| s.to_string()).collect(),
            axes,
            components,
            data: vec![0.0; n],
            meta: BTreeMap::new(),
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(names: &[&str], axes: Vec<Vec<f64>>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut g = GridField::zeros(names, axes, 1);
        let mut x = vec![0.0; g.axes.len()];
        for node in 0..g.num_nodes() {
            g.node_coords(node, &mut x);
            g.data[node] = f(&x);
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.axes.len() {
            return Err(Error::Shape("axis names and axes differ in length".into()));
        }
        if self.data.len() != self.num_nodes() * self.components {
            return Err(Error::Shape(format!(
                "data has {} entries, grid {:?} × {} components",
                self.data.len(),
                self.shape(),
                self.components
            )));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Shape(format!("axis {i} is not increasing")));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        if a.len() < 2 {
            0.0
        } else {
            (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    pub fn node_coords(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for i in (0..self.axes.len()).rev() {
            let len = self.axes[i].len();
            out[i] = self.axes[i][rem % len];
            rem /= len;
        }
    }

    pub fn get(&self, idx: &[usize], component: usize) -> f64 {
        self.data[self.flat_index(idx) * self.components + component]
    }

    /// All node coordinates as rows.
    pub fn points(&self) -> ndarray::Array2<f64> {
        crate::problems::grid_points(&self.axes)
    }

    /// Component `c` as a column per node.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.components)
            .copied()
            .collect()
    }

    /// Writes `<path>.bin` (little-endian f64) and `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let base = path.as_ref();
        let bin = base.with_extension("bin");
        let json = base.with_extension("json");
        let header = GridHeader {
            format: "derl-grid".into(),
            dtype: "f64".into(),
            order: "row-major".into(),
            names: self.names.clone(),
            axes: self.axes.clone(),
            shape: self.shape(),
            components: self.components,
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let base = path.as_ref();
        let bin = base.with_extension("bin");
        let json = base.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let h: GridHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
        if h.dtype != "f64" || h.order != "row-major" {
            return Err(Error::format(&json, "only row-major f64 grids are supported"));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(&bin)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format(&bin, "length is not a multiple of 8"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let g = GridField {
            names: h.names,
            axes: h.axes,
            components: h.components,
            data,
            meta: h.meta,
        };
        g.validate().map_err(|e| Error::format(&bin, e.to_string()))?;
        Ok(g)
    }

    /// One row per node: coordinates, then components.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = self.names.clone();
        header.extend((0..self.components).map(|c| format!("u{c}")));
        w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut x = vec![0.0; self.axes.len()];
        for node in 0..self.num_nodes() {
            self.node_coords(node, &mut x);
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            rec.extend(
                self.data[node * self.components..(node + 1) * self.components]
                    .iter()
                    .map(|v| format!("{v:?}")),
            );
            w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Classical RK4 from `t = 0` to `t_end`, recording every step.
///
/// If `t_end` is not a multiple of `dt` the last step is shortened.
pub fn rk4_trajectory<F>(rhs: F, state0: &[f64], dt: f64, t_end: f64) -> Result<GridField>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(Error::config("solver.dt", format!("need 0 < dt <= T, got dt={dt}, T={t_end}")));
    }
    let n = state0.len();
    let steps = ((t_end / dt) - 1e-9).ceil() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut data = Vec::with_capacity((steps + 1) * n);
    let mut y = state0.to_vec();
    let mut t = 0.0;
    times.push(0.0);
    data.extend_from_slice(&y);
    let mut tmp = vec![0.0; n];
    for step in 1..=steps {
        let h = if step == steps { t_end - dt * (steps - 1) as f64 } else { dt };
        let k1 = rhs(t, &y);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        let k2 = rhs(t + 0.5 * h, &tmp);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        let k3 = rhs(t + 0.5 * h, &tmp);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        let k4 = rhs(t + h, &tmp);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        t = if step == steps { t_end } else { dt * step as f64 };
        times.push(t);
        data.extend_from_slice(&y);
    }
    let mut g = GridField::new(&["t"], vec![times], n, data)?;
    g.meta.insert("dt".into(), dt);
    Ok(g)
}

/// Pendulum trajectory with its sensitivities to the initial state.
///
/// Components: `u, u̇, ∂u/∂u0, ∂u̇/∂u0, ∂u/∂v0, ∂u̇/∂v0`.
pub fn pendulum_flow(u0: f64, v0: f64, g_over_l: f64, b_over_m: f64, dt: f64, t_end: f64) -> Result<GridField> {
    let rhs = |_t: f64, s: &[f64]| {
        let [du, dv] = pendulum_rhs([s[0], s[1]], g_over_l, b_over_m);
        let c = -g_over_l * s[0].cos();
        vec![
            du,
            dv,
            s[3],
            c * s[2] - b_over_m * s[3],
            s[5],
            c * s[4] - b_over_m * s[5],
        ]
    };
    rk4_trajectory(rhs, &[u0, v0, 1.0, 0.0, 0.0, 1.0], dt, t_end)
}

/// First-order upwind finite volumes for `ρ_t + ∇·(vρ) = 0`, `v = (−y, x)`,
/// on the cell centres of `ic` (axes `x`, `y`), with closed boundaries.
///
/// Snapshots are stored every `out_every` steps (and at `t_end`).
pub fn continuity_fv_solve(ic: &GridField, dt: f64, t_end: f64, out_every: usize) -> Result<GridField> {
    if ic.axes.len() != 2 || ic.components != 1 {
        return Err(Error::Shape("initial density must be a scalar 2-D field".into()));
    }
    if !(dt > 0.0) || !(t_end > 0.0) || out_every == 0 {
        return Err(Error::config("solver", "dt, T and output stride must be positive"));
    }
    let (xs, ys) = (&ic.axes[0], &ic.axes[1]);
    let (nx, ny) = (xs.len(), ys.len());
    let (dx, dy) = (ic.spacing(0), ic.spacing(1));
    let vmax_x = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let vmax_y = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let cfl = dt * (vmax_x / dx + vmax_y / dy);
    if cfl > 1.0 {
        let need = 1.0 / (vmax_x / dx + vmax_y / dy);
        return Err(Error::Stability(format!(
            "CFL number {cfl:.3} exceeds 1; use dt <= {need:.6}"
        )));
    }
    let steps = ((t_end / dt) - 1e-9).ceil() as usize;
    let mut rho = ic.data.clone();
    let mut next = rho.clone();
    let mut times = vec![0.0];
    let mut out = rho.clone();
    // face velocities: x-faces carry v_x = -y, y-faces carry v_y = x
    let mut fx = vec![0.0; (nx + 1) * ny];
    let mut fy = vec![0.0; nx * (ny + 1)];
    for step in 1..=steps {
        let h = if step == steps { t_end - dt * (steps - 1) as f64 } else { dt };
        for i in 1..nx {
            for j in 0..ny {
                let v = -ys[j];
                let up = if v > 0.0 { rho[(i - 1) * ny + j] } else { rho[i * ny + j] };
                fx[i * ny + j] = v * up;
            }
        }
        for i in 0..nx {
            let v = xs[i];
            for j in 1..ny {
                let up = if v > 0.0 { rho[i * ny + j - 1] } else { rho[i * ny + j] };
                fy[i * (ny + 1) + j] = v * up;
            }
        }
        for i in 0..nx {
            for j in 0..ny {
                let div = (fx[(i + 1) * ny + j] - fx[i * ny + j]) / dx
                    + (fy[i * (ny + 1) + j + 1] - fy[i * (ny + 1) + j]) / dy;
                next[i * ny + j] = rho[i * ny + j] - h * div;
            }
        }
        std::mem::swap(&mut rho, &mut next);
        if step % out_every == 0 || step == steps {
            if rho.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
            times.push(if step == steps { t_end } else { dt * step as f64 });
            out.extend_from_slice(&rho);
        }
    }
    let mut g = GridField::new(&["t", "x", "y"], vec![times, xs.clone(), ys.clone()], 1, out)?;
    g.meta.insert("dt".into(), dt);
    g.meta.insert("dx".into(), dx);
    g.meta.insert("dy".into(), dy);
    Ok(g)
}

/// Cell centres of `n` uniform cells on `[a, b]`.
pub fn cell_centres(a: f64, b: f64, n: usize) -> Vec<f64> {
    let h = (b - a) / n as f64;
    (0..n).map(|i| a + (i as f64 + 0.5) * h).collect()
}

/// Fourier pseudo-spectral KdV `u_t + u u_x + ν u_xxx = 0` on periodic
/// `[-1, 1)`: integrating factor for the dispersive term, RK4 in time and
/// 2/3-rule dealiasing of the product.
///
/// Internal steps of `dt`; output every `out_dt` up to `t_end`.
pub fn kdv_spectral_solve(
    ic: impl Fn(f64) -> f64,
    nu: f64,
    nx: usize,
    dt: f64,
    t_end: f64,
    out_dt: f64,
) -> Result<GridField> {
    if !nx.is_power_of_two() || nx < 4 {
        return Err(Error::config("solver.nx", format!("{nx} is not a power of two >= 4")));
    }
    if !(dt > 0.0) || !(out_dt >= dt) || !(t_end > 0.0) {
        return Err(Error::config("solver.dt", "need 0 < dt <= out_dt and T > 0"));
    }
    let xs: Vec<f64> = (0..nx).map(|j| -1.0 + 2.0 * j as f64 / nx as f64).collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nx);
    let inv = planner.plan_fft_inverse(nx);
    let k: Vec<f64> = (0..nx)
        .map(|j| {
            let n = if j <= nx / 2 { j as f64 } else { j as f64 - nx as f64 };
            // the Nyquist mode carries no odd derivative
            if j == nx / 2 { 0.0 } else { PI * n }
        })
        .collect();
    let cutoff = nx / 3;
    let keep: Vec<bool> = (0..nx)
        .map(|j| {
            let n = if j <= nx / 2 { j } else { nx - j };
            n <= cutoff && j != nx / 2
        })
        .collect();
    let lin: Vec<Complex64> = k.iter().map(|&k| Complex64::new(0.0, nu * k * k * k)).collect();

    let scale = 1.0 / nx as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); nx];
    // N(û) = -(ik/2) F[(F⁻¹ û)²]
    let mut nonlinear = |uh: &[Complex64], out: &mut [Complex64]| {
        buf.copy_from_slice(uh);
        for (b, &kp) in buf.iter_mut().zip(&keep) {
            if !kp {
                *b = Complex64::new(0.0, 0.0);
            }
        }
        inv.process(&mut buf);
        for b in buf.iter_mut() {
            let r = b.re * scale;
            *b = Complex64::new(r * r, 0.0);
        }
        fwd.process(&mut buf);
        for j in 0..nx {
            out[j] = if keep[j] {
                Complex64::new(0.0, -0.5 * k[j]) * buf[j]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    };

    let mut uh: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(ic(x), 0.0)).collect();
    fwd.process(&mut uh);
    let stride = (out_dt / dt).round() as usize;
    if ((stride as f64) * dt - out_dt).abs() > 1e-9 * out_dt {
        return Err(Error::config("solver.out_dt", "must be a multiple of dt"));
    }
    let steps = (t_end / dt).round() as usize;
    if ((steps as f64) * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::config("solver.dt", "T must be a multiple of dt"));
    }
    let e_half: Vec<Complex64> = lin.iter().map(|l| (l * (0.5 * dt)).exp()).collect();
    let e_full: Vec<Complex64> = lin.iter().map(|l| (l * dt).exp()).collect();

    let mut times = vec![0.0];
    let mut data: Vec<f64> = xs.iter().map(|&x| ic(x)).collect();
    let mut phys = vec![Complex64::new(0.0, 0.0); nx];
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![Complex64::new(0.0, 0.0); nx],
        vec![Complex64::new(0.0, 0.0); nx],
        vec![Complex64::new(0.0, 0.0); nx],
        vec![Complex64::new(0.0, 0.0); nx],
    );
    let mut tmp = vec![Complex64::new(0.0, 0.0); nx];
    for step in 1..=steps {
        nonlinear(&uh, &mut k1);
        for j in 0..nx {
            tmp[j] = e_half[j] * (uh[j] + 0.5 * dt * k1[j]);
        }
        nonlinear(&tmp, &mut k2);
        for j in 0..nx {
            tmp[j] = e_half[j] * uh[j] + 0.5 * dt * k2[j];
        }
        nonlinear(&tmp, &mut k3);
        for j in 0..nx {
            tmp[j] = e_full[j] * uh[j] + dt * e_half[j] * k3[j];
        }
        nonlinear(&tmp, &mut k4);
        for j in 0..nx {
            uh[j] = e_full[j] * uh[j]
                + dt / 6.0 * (e_full[j] * k1[j] + 2.0 * e_half[j] * (k2[j] + k3[j]) + k4[j]);
        }
        if uh.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Stability(format!(
                "spectral modes blew up at step {step}; reduce dt below {dt}"
            )));
        }
        if step % stride == 0 {
            phys.copy_from_slice(&uh);
            inv.process(&mut phys);
            times.push(step as f64 * dt);
            data.extend(phys.iter().map(|c| c.re * scale));
        }
    }
    let mut g = GridField::new(&["t", "x"], vec![times, xs], 1, data)?;
    g.meta.insert("dt".into(), dt);
    g.meta.insert("out_dt".into(), out_dt);
    g.meta.insert("nu".into(), nu);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Forward,
    Central,
}

/// Something that can be sampled pointwise inside a known region.
pub trait Sampler {
    fn contains(&self, x: &[f64]) -> bool;
    fn sample(&self, x: &[f64]) -> Result<f64>;
}

/// A closure restricted to a box.
pub struct FnSampler<'a, F> {
    pub f: F,
    pub domain: &'a Domain,
}

impl<F: Fn(&[f64]) -> f64> Sampler for FnSampler<'_, F> {
    fn contains(&self, x: &[f64]) -> bool {
        self.domain.contains(x)
    }
    fn sample(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }
}

impl Sampler for GridField {
    fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.axes.len()
            && x.iter().zip(&self.axes).all(|(v, a)| *v >= a[0] && *v <= a[a.len() - 1])
    }
    fn sample(&self, x: &[f64]) -> Result<f64> {
        cubic_interpolate(self, x)
    }
}

/// Forward `(u(x+he) − u(x))/h` or central `(u(x+he) − u(x−he))/(2h)`
/// difference quotient along `axis`.
pub fn empirical_derivative<S: Sampler + ?Sized>(
    samples: &S,
    point: &[f64],
    axis: usize,
    h: f64,
    scheme: Scheme,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config("data.h", format!("step {h} must be positive")));
    }
    if axis >= point.len() {
        return Err(Error::Axis {
            axis,
            dim: point.len(),
        });
    }
    let mut xp = point.to_vec();
    xp[axis] += h;
    let mut xm = point.to_vec();
    if scheme == Scheme::Central {
        xm[axis] -= h;
    }
    for x in [&xp, &xm] {
        if !samples.contains(x) {
            return Err(Error::Domain(format!(
                "stencil point {x:?} leaves the sampled region; stay at least h from the boundary"
            )));
        }
    }
    let up = samples.sample(&xp)?;
    let lo = samples.sample(&xm)?;
    Ok(match scheme {
        Scheme::Forward => (up - lo) / h,
        Scheme::Central => (up - lo) / (2.0 * h),
    })
}

/// 4-point Lagrange weights for `x` on a uniform axis; exact for cubics.
/// Returns the first node index and the weights.
fn cubic_weights(axis: &[f64], x: f64) -> (usize, [f64; 4], usize) {
    let n = axis.len();
    if let Ok(i) = axis.binary_search_by(|a| a.partial_cmp(&x).expect("finite axis")) {
        return (i, [1.0, 0.0, 0.0, 0.0], 1);
    }
    if n < 4 {
        // linear fallback for very short axes
        let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
        let i = (((x - axis[0]) / h).floor() as usize).min(n - 2);
        let s = (x - axis[i]) / (axis[i + 1] - axis[i]);
        return (i, [1.0 - s, s, 0.0, 0.0], 2);
    }
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    let cell = (((x - axis[0]) / h).floor() as isize).clamp(0, n as isize - 2) as usize;
    let start = cell.saturating_sub(1).min(n - 4);
    let s = (x - axis[start]) / h;
    let mut w = [0.0; 4];
    for (j, wj) in w.iter_mut().enumerate() {
        let mut l = 1.0;
        for m in 0..4 {
            if m != j {
                l *= (s - m as f64) / (j as f64 - m as f64);
            }
        }
        *wj = l;
    }
    (start, w, 4)
}

/// Separable cubic interpolation of component 0.
pub fn cubic_interpolate(field: &GridField, point: &[f64]) -> Result<f64> {
    interpolate_component(field, point, 0)
}

pub fn interpolate_component(field: &GridField, point: &[f64], component: usize) -> Result<f64> {
    let d = field.axes.len();
    if point.len() != d {
        return Err(Error::Shape(format!("point has {} coordinates, grid {d}", point.len())));
    }
    if !field.contains(point) {
        return Err(Error::Domain(format!("{point:?} is outside the grid")));
    }
    let stencils: Vec<(usize, [f64; 4], usize)> = field
        .axes
        .iter()
        .zip(point)
        .map(|(a, &x)| cubic_weights(a, x))
        .collect();
    let mut idx = vec![0usize; d];
    let mut counter = vec![0usize; d];
    let total: usize = stencils.iter().map(|s| s.2).product();
    let mut acc = 0.0;
    for _ in 0..total {
        let mut w = 1.0;
        for a in 0..d {
            idx[a] = stencils[a].0 + counter[a];
            w *= stencils[a].1[counter[a]];
        }
        acc += w * field.get(&idx, component);
        for a in (0..d).rev() {
            counter[a] += 1;
            if counter[a] < stencils[a].2 {
                break;
            }
            counter[a] = 0;
        }
    }
    Ok(acc)
}

/// Uniform axis helper for solver grids.
pub fn uniform_axis(a: f64, b: f64, n: usize) -> Vec<f64> {
    linspace(a, b, n)
}
