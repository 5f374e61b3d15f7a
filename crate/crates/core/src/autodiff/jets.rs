//! Forward propagation of truncated Taylor coefficients through the network,
//! and the reverse sweep over that propagation for parameter gradients.
//!
//! A batch of `n` points is carried as a `(width, channels * n)` matrix per
//! layer, channel-major: column `c * n + p` holds channel `c` of point `p`.
//! Channel 0 is the value, channels `1..=d` the first derivatives, then the
//! upper triangle of the Hessian, then one pure third derivative per
//! requested direction.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use super::network::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DerivOrder {
    Value = 0,
    First = 1,
    Second = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JetLayout {
    dim: usize,
    order: DerivOrder,
    third: Vec<Vec<f64>>,
}

impl JetLayout {
    pub fn new(dim: usize, order: DerivOrder) -> Self {
        JetLayout {
            dim,
            order,
            third: Vec::new(),
        }
    }

    /// Adds the pure third derivative along one input axis.
    pub fn with_third_axis(self, axis: usize) -> Result<Self> {
        if axis >= self.dim {
            return Err(Error::Axis {
                axis,
                dim: self.dim,
            });
        }
        let mut dir = vec![0.0; self.dim];
        dir[axis] = 1.0;
        self.with_third_direction(dir)
    }

    /// Adds the pure third directional derivative `D³u[v, v, v]`.
    pub fn with_third_direction(mut self, dir: Vec<f64>) -> Result<Self> {
        if dir.len() != self.dim {
            return Err(Error::Shape(format!(
                "direction has {} entries, input dimension is {}",
                dir.len(),
                self.dim
            )));
        }
        self.order = DerivOrder::Second;
        self.third.push(dir);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> DerivOrder {
        self.order
    }

    pub fn third_directions(&self) -> &[Vec<f64>] {
        &self.third
    }

    fn n_first(&self) -> usize {
        if self.order >= DerivOrder::First {
            self.dim
        } else {
            0
        }
    }

    fn n_hess(&self) -> usize {
        if self.order >= DerivOrder::Second {
            self.dim * (self.dim + 1) / 2
        } else {
            0
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.n_first() + self.n_hess() + self.third.len()
    }

    #[inline]
    fn jac_ch(&self, i: usize) -> usize {
        1 + i
    }

    #[inline]
    fn hess_ch(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // row i of a packed upper triangle starts at i*d - i*(i-1)/2
        let row = i * self.dim - i * i.saturating_sub(1) / 2;
        1 + self.dim + row + (j - i)
    }

    #[inline]
    fn third_ch(&self, k: usize) -> usize {
        1 + self.n_first() + self.n_hess() + k
    }

    /// True if every channel of `other` is also present here.
    pub fn covers(&self, other: &JetLayout) -> bool {
        self.dim == other.dim
            && self.order >= other.order
            && other.third.iter().all(|d| self.third.contains(d))
    }
}

/// Output jets of a batch, shape `(m, channels * n)`.
///
/// The same type doubles as the adjoint buffer in the reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Jets {
    layout: JetLayout,
    n: usize,
    data: Array2<f64>,
}

impl Jets {
    pub fn zeros(layout: &JetLayout, m: usize, n: usize) -> Self {
        Jets {
            layout: layout.clone(),
            n,
            data: Array2::zeros((m, layout.channels() * n)),
        }
    }

    pub fn zeros_like(other: &Jets) -> Self {
        Jets::zeros(&other.layout, other.output_dim(), other.n)
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.data
    }

    #[inline]
    fn col(&self, ch: usize, p: usize) -> usize {
        ch * self.n + p
    }

    #[inline]
    pub fn value(&self, p: usize, k: usize) -> f64 {
        self.data[[k, p]]
    }

    #[inline]
    pub fn jac(&self, p: usize, k: usize, i: usize) -> f64 {
        debug_assert!(self.layout.order >= DerivOrder::First);
        self.data[[k, self.col(self.layout.jac_ch(i), p)]]
    }

    #[inline]
    pub fn hess(&self, p: usize, k: usize, i: usize, j: usize) -> f64 {
        debug_assert!(self.layout.order >= DerivOrder::Second);
        self.data[[k, self.col(self.layout.hess_ch(i, j), p)]]
    }

    #[inline]
    pub fn third(&self, p: usize, k: usize, dir: usize) -> f64 {
        self.data[[k, self.col(self.layout.third_ch(dir), p)]]
    }

    #[inline]
    pub fn add_value(&mut self, p: usize, k: usize, g: f64) {
        self.data[[k, p]] += g;
    }

    #[inline]
    pub fn add_jac(&mut self, p: usize, k: usize, i: usize, g: f64) {
        let c = self.col(self.layout.jac_ch(i), p);
        self.data[[k, c]] += g;
    }

    /// Hessian entries are stored once per unordered pair; `(i, j)` and
    /// `(j, i)` accumulate into the same slot.
    #[inline]
    pub fn add_hess(&mut self, p: usize, k: usize, i: usize, j: usize, g: f64) {
        let c = self.col(self.layout.hess_ch(i, j), p);
        self.data[[k, c]] += g;
    }

    #[inline]
    pub fn add_third(&mut self, p: usize, k: usize, dir: usize, g: f64) {
        let c = self.col(self.layout.third_ch(dir), p);
        self.data[[k, c]] += g;
    }

    /// Index of the first point whose jets contain a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        let mut worst: Option<usize> = None;
        for (col, v) in self.data.axis_iter(Axis(1)).enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                let p = col % self.n.max(1);
                worst = Some(worst.map_or(p, |w: usize| w.min(p)));
            }
        }
        worst
    }

    /// Copies the jets of a subset of points (in the given order).
    pub fn select(&self, idx: &[usize]) -> Jets {
        let c = self.layout.channels();
        let mut out = Jets::zeros(&self.layout, self.output_dim(), idx.len());
        for k in 0..self.output_dim() {
            for ch in 0..c {
                for (q, &p) in idx.iter().enumerate() {
                    out.data[[k, ch * idx.len() + q]] = self.data[[k, ch * self.n + p]];
                }
            }
        }
        out
    }
}

/// Anything that can report input jets on a batch: trained networks and
/// closed-form stubs alike.
pub trait Approximator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn jets(&self, points: ArrayView2<f64>, layout: &JetLayout) -> Result<Jets>;
}

impl Approximator for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Network::output_dim(self)
    }

    fn jets(&self, points: ArrayView2<f64>, layout: &JetLayout) -> Result<Jets> {
        Ok(forward_jets(self, points, layout, false)?.0)
    }
}

/// Intermediate per-layer jets kept for the reverse sweep.
#[derive(Debug)]
pub struct JetTape {
    n: usize,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn seed(points: ArrayView2<f64>, layout: &JetLayout) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut a = Array2::zeros((d, layout.channels() * n));
    for p in 0..n {
        for i in 0..d {
            a[[i, p]] = points[[p, i]];
        }
    }
    if layout.order >= DerivOrder::First {
        for i in 0..d {
            let ch = layout.jac_ch(i);
            for p in 0..n {
                a[[i, ch * n + p]] = 1.0;
            }
        }
    }
    a
}

/// Runs the network on a batch and returns the output jets, optionally with
/// the tape needed by [`backward`].
pub fn forward_jets(
    net: &Network,
    points: ArrayView2<f64>,
    layout: &JetLayout,
    record: bool,
) -> Result<(Jets, Option<JetTape>)> {
    let (n, d) = points.dim();
    if d != net.input_dim() || layout.dim != d {
        return Err(Error::Shape(format!(
            "points have {d} columns, network input {} and layout {}",
            net.input_dim(),
            layout.dim
        )));
    }
    let last = net.num_layers() - 1;
    let mut a = seed(points, layout);
    let mut tape = record.then(|| JetTape {
        n,
        inputs: Vec::with_capacity(net.num_layers()),
        pre: Vec::with_capacity(net.num_layers()),
    });
    for l in 0..=last {
        let w = &net.weights[l];
        let b = &net.biases[l];
        let mut z = Array2::zeros((w.nrows(), a.ncols()));
        general_mat_mul(1.0, w, &a, 0.0, &mut z);
        for r in 0..w.nrows() {
            let br = b[r];
            let row = &mut z.row_mut(r);
            for p in 0..n {
                row[p] += br;
            }
        }
        let next = if l < last {
            Some(activate(&z, layout, n))
        } else {
            None
        };
        if let Some(t) = tape.as_mut() {
            t.inputs.push(a);
            t.pre.push(z.clone());
        }
        a = match next {
            Some(act) => act,
            None => z,
        };
    }
    let jets = Jets {
        layout: layout.clone(),
        n,
        data: a,
    };
    if let Some(p) = jets.first_non_finite() {
        return Err(Error::numerical("network output", Some(p)));
    }
    Ok((jets, tape))
}

#[derive(Clone, Copy)]
struct TanhDerivs {
    t: f64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

#[inline]
fn tanh_derivs(z: f64) -> TanhDerivs {
    let t = z.tanh();
    let s1 = 1.0 - t * t;
    let s2 = -2.0 * t * s1;
    let s3 = -2.0 * s1 * s1 + 4.0 * t * t * s1;
    let s4 = -4.0 * s1 * s2 + 8.0 * t * s1 * s1 + 4.0 * t * t * s2;
    TanhDerivs { t, s1, s2, s3, s4 }
}

/// Derivatives of tanh up to fourth order, `[tanh, tanh', tanh'', tanh''', tanh'''']`.
pub fn tanh_derivatives(z: f64) -> [f64; 5] {
    let s = tanh_derivs(z);
    [s.t, s.s1, s.s2, s.s3, s.s4]
}

struct Packed {
    pairs: Vec<(usize, usize)>,
    dirs: Vec<Vec<f64>>,
    // coefficient of z_ij (i <= j) in D²z[v, v]
    dir_pair_coef: Vec<Vec<f64>>,
    first: usize,
    hess: usize,
}

impl Packed {
    fn new(layout: &JetLayout) -> Self {
        let d = layout.dim;
        let mut pairs = Vec::new();
        if layout.order >= DerivOrder::Second {
            for i in 0..d {
                for j in i..d {
                    pairs.push((i, j));
                }
            }
        }
        let dir_pair_coef = layout
            .third
            .iter()
            .map(|v| {
                pairs
                    .iter()
                    .map(|&(i, j)| {
                        if i == j {
                            v[i] * v[i]
                        } else {
                            2.0 * v[i] * v[j]
                        }
                    })
                    .collect()
            })
            .collect();
        Packed {
            pairs,
            dirs: layout.third.clone(),
            dir_pair_coef,
            first: layout.n_first(),
            hess: layout.n_hess(),
        }
    }
}

/// Per-point tanh derivative buffers for one row.
struct Sbuf {
    t: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
    s4: Vec<f64>,
    zd: Vec<f64>,
    zdd: Vec<f64>,
}

impl Sbuf {
    fn new(n: usize) -> Self {
        Sbuf {
            t: vec![0.0; n],
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            s3: vec![0.0; n],
            s4: vec![0.0; n],
            zd: vec![0.0; n],
            zdd: vec![0.0; n],
        }
    }

    fn fill(&mut self, z0: &[f64], order: usize) {
        for (p, &z) in z0.iter().enumerate() {
            let s = tanh_derivs(z);
            self.t[p] = s.t;
            self.s1[p] = s.s1;
            if order >= 2 {
                self.s2[p] = s.s2;
            }
            if order >= 3 {
                self.s3[p] = s.s3;
            }
            if order >= 4 {
                self.s4[p] = s.s4;
            }
        }
    }

    /// `D z[v]` and `D² z[v, v]` of direction `k` into `zd`, `zdd`.
    fn directional(&mut self, zrow: &[f64], pk: &Packed, k: usize, n: usize) {
        let h0 = 1 + pk.first;
        self.zd.iter_mut().for_each(|v| *v = 0.0);
        self.zdd.iter_mut().for_each(|v| *v = 0.0);
        for (i, &vi) in pk.dirs[k].iter().enumerate() {
            if vi != 0.0 {
                let zi = &zrow[(1 + i) * n..(2 + i) * n];
                self.zd.iter_mut().zip(zi).for_each(|(a, b)| *a += vi * b);
            }
        }
        for (q, &cf) in pk.dir_pair_coef[k].iter().enumerate() {
            if cf != 0.0 {
                let zh = &zrow[(h0 + q) * n..(h0 + q + 1) * n];
                self.zdd.iter_mut().zip(zh).for_each(|(a, b)| *a += cf * b);
            }
        }
    }
}

fn tanh_order(layout: &JetLayout, backward: bool) -> usize {
    let base = if !layout.third.is_empty() {
        3
    } else {
        match layout.order {
            DerivOrder::Value => 1,
            DerivOrder::First => 1,
            DerivOrder::Second => 2,
        }
    };
    base + usize::from(backward)
}

fn activate(z: &Array2<f64>, layout: &JetLayout, n: usize) -> Array2<f64> {
    let pk = Packed::new(layout);
    let mut out = Array2::zeros(z.raw_dim());
    let mut sb = Sbuf::new(n);
    let order = tanh_order(layout, false);
    let h0 = 1 + pk.first;
    let t0 = h0 + pk.hess;
    for r in 0..z.nrows() {
        let zrow = z.row(r);
        let zrow = zrow.as_slice().expect("standard layout");
        let mut orow = out.row_mut(r);
        let orow = orow.as_slice_mut().expect("standard layout");
        let ch = |c: usize| c * n..(c + 1) * n;
        sb.fill(&zrow[ch(0)], order);
        orow[ch(0)].copy_from_slice(&sb.t);
        for i in 0..pk.first {
            let zi = &zrow[ch(1 + i)];
            for ((o, a), s1) in orow[ch(1 + i)].iter_mut().zip(zi).zip(&sb.s1) {
                *o = s1 * a;
            }
        }
        for (q, &(i, j)) in pk.pairs.iter().enumerate() {
            let (zi, zj, zh) = (&zrow[ch(1 + i)], &zrow[ch(1 + j)], &zrow[ch(h0 + q)]);
            let o = &mut orow[ch(h0 + q)];
            for p in 0..n {
                o[p] = sb.s2[p] * zi[p] * zj[p] + sb.s1[p] * zh[p];
            }
        }
        for k in 0..pk.dirs.len() {
            sb.directional(zrow, &pk, k, n);
            let zt = &zrow[ch(t0 + k)];
            let o = &mut orow[ch(t0 + k)];
            for p in 0..n {
                let zd = sb.zd[p];
                o[p] = sb.s3[p] * zd * zd * zd + 3.0 * sb.s2[p] * zd * sb.zdd[p] + sb.s1[p] * zt[p];
            }
        }
    }
    out
}

fn activate_backward(z: &Array2<f64>, abar: &Array2<f64>, layout: &JetLayout, n: usize) -> Array2<f64> {
    let pk = Packed::new(layout);
    let mut zbar = Array2::zeros(z.raw_dim());
    let mut sb = Sbuf::new(n);
    let order = tanh_order(layout, true);
    let h0 = 1 + pk.first;
    let t0 = h0 + pk.hess;
    for r in 0..z.nrows() {
        let zrow = z.row(r);
        let zrow = zrow.as_slice().expect("standard layout");
        let arow = abar.row(r);
        let arow = arow.as_slice().expect("standard layout");
        let mut grow = zbar.row_mut(r);
        let g = grow.as_slice_mut().expect("standard layout");
        let ch = |c: usize| c * n..(c + 1) * n;
        sb.fill(&zrow[ch(0)], order);
        {
            let a0 = &arow[ch(0)];
            for p in 0..n {
                g[p] = a0[p] * sb.s1[p];
            }
        }
        for i in 0..pk.first {
            let (zi, ai) = (&zrow[ch(1 + i)], &arow[ch(1 + i)]);
            let off = (1 + i) * n;
            for p in 0..n {
                g[off + p] += ai[p] * sb.s1[p];
                g[p] += ai[p] * sb.s2[p] * zi[p];
            }
        }
        for (q, &(i, j)) in pk.pairs.iter().enumerate() {
            let ab = &arow[ch(h0 + q)];
            let (zi, zj, zh) = (&zrow[ch(1 + i)], &zrow[ch(1 + j)], &zrow[ch(h0 + q)]);
            let (oh, oi, oj) = ((h0 + q) * n, (1 + i) * n, (1 + j) * n);
            for p in 0..n {
                let a = ab[p];
                g[oh + p] += a * sb.s1[p];
                g[p] += a * (sb.s3[p] * zi[p] * zj[p] + sb.s2[p] * zh[p]);
                g[oi + p] += a * sb.s2[p] * zj[p];
                g[oj + p] += a * sb.s2[p] * zi[p];
            }
        }
        for k in 0..pk.dirs.len() {
            sb.directional(zrow, &pk, k, n);
            let ab = &arow[ch(t0 + k)];
            let zt = &zrow[ch(t0 + k)];
            let ot = (t0 + k) * n;
            for p in 0..n {
                let a = ab[p];
                let (zd, zdd) = (sb.zd[p], sb.zdd[p]);
                g[ot + p] += a * sb.s1[p];
                g[p] += a * (sb.s4[p] * zd * zd * zd + 3.0 * sb.s3[p] * zd * zdd + sb.s2[p] * zt[p]);
                // reuse the buffers for the adjoints of zd and zdd
                sb.zd[p] = a * (3.0 * sb.s3[p] * zd * zd + 3.0 * sb.s2[p] * zdd);
                sb.zdd[p] = a * 3.0 * sb.s2[p] * zd;
            }
            for (i, &vi) in pk.dirs[k].iter().enumerate() {
                if vi != 0.0 {
                    let off = (1 + i) * n;
                    for p in 0..n {
                        g[off + p] += sb.zd[p] * vi;
                    }
                }
            }
            for (q, &cf) in pk.dir_pair_coef[k].iter().enumerate() {
                if cf != 0.0 {
                    let off = (h0 + q) * n;
                    for p in 0..n {
                        g[off + p] += sb.zdd[p] * cf;
                    }
                }
            }
        }
    }
    zbar
}

/// Reverse sweep: accumulates `d loss / d params` into `grad` (flat layout
/// of [`Network::params`]) given the adjoint of the output jets.
pub fn backward(net: &Network, tape: &JetTape, out_adj: &Jets, grad: &mut [f64]) -> Result<()> {
    if grad.len() != net.num_params() {
        return Err(Error::Shape(format!(
            "gradient buffer has {} entries, network has {}",
            grad.len(),
            net.num_params()
        )));
    }
    let n = tape.n;
    let layout = &out_adj.layout;
    if out_adj.data.dim() != tape.pre.last().unwrap().dim() {
        return Err(Error::Shape("adjoint does not match the recorded batch".into()));
    }
    let mut offsets = Vec::with_capacity(net.num_layers());
    let mut off = 0;
    for l in 0..net.num_layers() {
        offsets.push(off);
        off += net.weights[l].len() + net.biases[l].len();
    }
    let mut zbar = out_adj.data.clone();
    for l in (0..net.num_layers()).rev() {
        let w = &net.weights[l];
        let (rows, cols) = w.dim();
        let start = offsets[l];
        {
            let mut gw = ArrayViewMut2::from_shape((rows, cols), &mut grad[start..start + rows * cols])
                .expect("contiguous weight block");
            general_mat_mul(1.0, &zbar, &tape.inputs[l].t(), 1.0, &mut gw);
        }
        let bstart = start + rows * cols;
        for r in 0..rows {
            let s: f64 = zbar.row(r).iter().take(n).sum();
            grad[bstart + r] += s;
        }
        if l > 0 {
            let mut abar = Array2::zeros((cols, zbar.ncols()));
            general_mat_mul(1.0, &w.t(), &zbar, 0.0, &mut abar);
            zbar = activate_backward(&tape.pre[l - 1], &abar, layout, n);
        }
    }
    Ok(())
}
