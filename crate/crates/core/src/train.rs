//! Optimisers and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Network;
use crate::error::{Error, Result};
use crate::losses::{CollocationSet, LossBreakdown, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Lbfgs,
    AdamThenLbfgs,
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    #[serde(default = "one_usize")]
    pub every: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    /// Adam passes over the data
    #[serde(default)]
    pub epochs: usize,
    /// cap on Adam updates; stops mid-epoch when reached
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub lbfgs_iters: usize,
    /// `None` is full batch
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub fd_step_h: Option<f64>,
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn adam(epochs: usize, lr: f64) -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            lr,
            lr_decay: None,
            epochs,
            steps: None,
            lbfgs_iters: 0,
            batch_size: None,
            seed: 0,
            noise_sigma: 0.0,
            fd_step_h: None,
        }
    }

    pub fn lbfgs(iters: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::Lbfgs,
            lbfgs_iters: iters,
            ..TrainConfig::adam(0, default_lr())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::config("train.lr_decay.factor", "must lie in (0, 1]"));
            }
            if d.every == 0 {
                return Err(Error::config("train.lr_decay.every", "must be at least 1"));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("train.noise_sigma", "must be nonnegative"));
        }
        if let Some(h) = self.fd_step_h {
            if !(h > 0.0) {
                return Err(Error::config("train.fd_step_h", "must be positive"));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((epoch / d.every) as i32),
            None => self.lr,
        }
    }
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradient entries, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("gradient entry {i}"), None));
    }
    state.t += 1;
    let b1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let mh = state.m[i] / b1;
        let vh = state.v[i] / b2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iters: 100,
            memory: 10,
            grad_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    /// accepted steps
    pub iters: usize,
    pub evals: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimiser of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept
/// away from the interval ends; bisection when the cubic is unusable.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

/// L-BFGS with a strong-Wolfe line search. `fg` writes the gradient and
/// returns the loss; `on_iter` sees every accepted iterate.
pub fn lbfgs_minimize<F, C>(mut fg: F, x0: &[f64], cfg: &LbfgsConfig, mut on_iter: C) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    C: FnMut(usize, f64, f64, &[f64]) -> Result<()>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g)?;
    let mut evals = 1;
    if !f.is_finite() {
        return Err(Error::numerical("initial loss", None));
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut status = LbfgsStatus::MaxIters;
    let mut iters = 0;

    while iters < cfg.max_iters {
        let gn = norm(&g);
        if gn <= cfg.grad_tol {
            status = LbfgsStatus::Converged;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&y_hist[i], &s_hist[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &q);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let beta = rho[i] * dot(&y_hist[i], &q);
            for j in 0..n {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &p);
        if !(d0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            p = g.iter().map(|v| -v).collect();
            d0 = -gn * gn;
        }
        let a0 = if k == 0 { (1.0 / gn).min(1.0) } else { 1.0 };

        let Some(acc) = line_search(&mut fg, &x, f, d0, &p, a0, cfg, &mut evals)? else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = acc.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = acc.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = acc.x;
        g = acc.g;
        f = acc.f;
        iters += 1;
        on_iter(iters, f, norm(&g), &x)?;
    }
    if status == LbfgsStatus::MaxIters && norm(&g) <= cfg.grad_tol {
        status = LbfgsStatus::Converged;
    }
    Ok(LbfgsResult {
        grad_norm: norm(&g),
        x,
        f,
        iters,
        evals,
        status,
    })
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    fg: &mut F,
    x: &[f64],
    f0: f64,
    d0: f64,
    p: &[f64],
    a_init: f64,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let mut eval = |alpha: f64, evals: &mut usize| -> Result<Probe> {
        let xa: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        let mut ga = vec![0.0; x.len()];
        *evals += 1;
        let fa = match fg(&xa, &mut ga) {
            Ok(v) => v,
            Err(Error::Numerical { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let d = if fa.is_finite() { dot(&ga, p) } else { f64::NAN };
        Ok(Probe {
            alpha,
            f: fa,
            d,
            x: xa,
            g: ga,
        })
    };
    let sufficient = |pr: &Probe| pr.f.is_finite() && pr.f <= f0 + cfg.c1 * pr.alpha * d0;
    let curvature = |pr: &Probe| pr.d.abs() <= -cfg.c2 * d0;

    let mut prev = Probe {
        alpha: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = a_init;
    for i in 0..40 {
        let cur = eval(alpha, evals)?;
        if !sufficient(&cur) || (i > 0 && cur.f >= prev.f) {
            return zoom(&mut eval, prev, cur, evals, &sufficient, &curvature);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.d >= 0.0 {
            return zoom(&mut eval, cur, prev, evals, &sufficient, &curvature);
        }
        prev = cur;
        alpha *= 2.0;
    }
    Ok(None)
}

fn zoom<E, S, C>(
    eval: &mut E,
    mut lo: Probe,
    mut hi: Probe,
    evals: &mut usize,
    sufficient: &S,
    curvature: &C,
) -> Result<Option<Probe>>
where
    E: FnMut(f64, &mut usize) -> Result<Probe>,
    S: Fn(&Probe) -> bool,
    C: Fn(&Probe) -> bool,
{
    for _ in 0..30 {
        let a = if hi.f.is_finite() && hi.d.is_finite() {
            cubic_min(lo.alpha, lo.f, lo.d, hi.alpha, hi.f, hi.d)
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let cur = eval(a, evals)?;
        if !sufficient(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    // no strong-Wolfe point; accept a strict decrease if one was found
    if lo.alpha > 0.0 && sufficient(&lo) && !lo.g.is_empty() {
        return Ok(Some(lo));
    }
    Ok(None)
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub total_loss: f64,
    pub domain_term: f64,
    pub pde_term: f64,
    pub bc_term: f64,
    pub ic_term: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub lbfgs_status: Option<LbfgsStatus>,
    pub adam_steps: usize,
}

impl History {
    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total_loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<HistoryRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(History {
            rows,
            ..History::default()
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn row(epoch: usize, b: &LossBreakdown, grad_norm: f64, start: &Instant) -> HistoryRow {
    HistoryRow {
        epoch,
        total_loss: b.total,
        domain_term: b.domain,
        pde_term: b.pde,
        bc_term: b.bc,
        ic_term: b.ic,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Per-set index batches for one epoch. Each set is reshuffled with a
/// generator keyed on `(seed, epoch)` and cut into the same number of chunks.
pub fn epoch_batches(sizes: &[usize], batch_size: Option<usize>, seed: u64, epoch: u64) -> Vec<Vec<Vec<usize>>> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let nb = match batch_size {
        Some(bs) if bs < largest => largest.div_ceil(bs),
        _ => 1,
    };
    if nb == 1 {
        return vec![sizes.iter().map(|&n| (0..n).collect()).collect()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let shuffled: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    (0..nb)
        .map(|b| {
            shuffled
                .iter()
                .map(|idx| {
                    let n = idx.len();
                    idx[b * n / nb..(b + 1) * n / nb].to_vec()
                })
                .collect()
        })
        .collect()
}

/// Runs the configured optimiser phases on `objective` starting from `net`.
///
/// A non-finite loss aborts with [`Error::Aborted`], which carries the last
/// parameters that produced a finite loss.
pub fn train(net: &Network, objective: &dyn Objective, cfg: &TrainConfig) -> Result<(Network, History)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut history = History::default();
    let mut params = net.params();
    let mut current = net.clone();
    let np = params.len();
    let sizes = objective.set_sizes();

    let run_adam = matches!(cfg.optimizer, Optimizer::Adam | Optimizer::AdamThenLbfgs);
    let run_lbfgs = matches!(cfg.optimizer, Optimizer::Lbfgs | Optimizer::AdamThenLbfgs);

    if run_adam {
        let mut state = AdamState::new(np);
        let budget = cfg.steps.unwrap_or(usize::MAX);
        let mut grad = vec![0.0; np];
        let mut epoch = 0;
        'epochs: while epoch < cfg.epochs || (cfg.steps.is_some() && history.adam_steps < budget) {
            let lr = cfg.lr_at(epoch);
            let batches = epoch_batches(&sizes, cfg.batch_size, cfg.seed, epoch as u64);
            let mut acc = LossBreakdown::default();
            let mut gsum = 0.0;
            let mut count = 0;
            for sel in &batches {
                if history.adam_steps >= budget {
                    break;
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                let b = objective
                    .evaluate(&current, Some(sel), Some(&mut grad))
                    .and_then(|b| {
                        adam_step(&mut state, &mut params, &grad, lr)?;
                        Ok(b)
                    })
                    .map_err(|e| abort(epoch, e, &current))?;
                current.set_params(&params)?;
                history.adam_steps += 1;
                acc.total += b.total;
                acc.domain += b.domain;
                acc.pde += b.pde;
                acc.bc += b.bc;
                acc.ic += b.ic;
                gsum += norm(&grad);
                count += 1;
            }
            if count == 0 {
                break 'epochs;
            }
            let c = count as f64;
            let mean = LossBreakdown {
                total: acc.total / c,
                domain: acc.domain / c,
                pde: acc.pde / c,
                bc: acc.bc / c,
                ic: acc.ic / c,
            };
            history.rows.push(row(epoch, &mean, gsum / c, &start));
            epoch += 1;
        }
    }

    if run_lbfgs && cfg.lbfgs_iters > 0 {
        let offset = history.rows.len();
        let mut last: Option<(Vec<f64>, LossBreakdown)> = None;
        let mut good = current.clone();
        let lcfg = LbfgsConfig {
            max_iters: cfg.lbfgs_iters,
            ..LbfgsConfig::default()
        };
        let mut rows = Vec::new();
        let base = current.clone();
        let result = lbfgs_minimize(
            |x: &[f64], g: &mut [f64]| -> Result<f64> {
                let trial = base.with_params(x)?;
                g.iter_mut().for_each(|v| *v = 0.0);
                let b = objective.evaluate(&trial, None, Some(g))?;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical("gradient", None));
                }
                last = Some((x.to_vec(), b));
                Ok(b.total)
            },
            &params,
            &lcfg,
            |it, f, gn, x| {
                good.set_params(x)?;
                rows.push((it, f, gn));
                Ok(())
            },
        );
        let result = result.map_err(|e| abort(offset, e, &good))?;
        for (it, f, gn) in rows {
            let b = LossBreakdown {
                total: f,
                ..Default::default()
            };
            history.rows.push(row(offset + it - 1, &b, gn, &start));
        }
        // component split of the final iterate
        if let (Some((x, b)), Some(r)) = (&last, history.rows.last_mut()) {
            if x == &result.x {
                r.domain_term = b.domain;
                r.pde_term = b.pde;
                r.bc_term = b.bc;
                r.ic_term = b.ic;
            }
        }
        history.lbfgs_status = Some(result.status);
        params = result.x;
        current.set_params(&params)?;
    }
    Ok((current, history))
}

fn abort(epoch: usize, e: Error, last_good: &Network) -> Error {
    Error::Aborted {
        epoch,
        source: Box::new(e),
        last_good: Box::new(last_good.clone()),
    }
}

/// Adds i.i.d. `N(0, σ²)` noise to value and jacobian targets.
pub fn add_noise(set: &CollocationSet, sigma: f64, seed: u64) -> Result<CollocationSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config("train.noise_sigma", "must be finite and nonnegative"));
    }
    let mut out = set.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(v) = out.values.as_mut() {
        v.iter_mut().for_each(|x| *x += dist.sample(&mut rng));
    }
    if let Some(j) = out.jacobians.as_mut() {
        j.iter_mut().for_each(|x| *x += dist.sample(&mut rng));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_is_stepwise() {
        let mut c = TrainConfig::adam(10, 0.1);
        c.lr_decay = Some(LrDecay { factor: 0.5, every: 3 });
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(2), 0.1);
        assert_eq!(c.lr_at(3), 0.05);
        assert_eq!(c.lr_at(7), 0.025);
    }

    #[test]
    fn batches_cover_each_set_once() {
        let b = epoch_batches(&[10, 4], Some(3), 1, 0);
        assert_eq!(b.len(), 4);
        for s in 0..2 {
            let mut all: Vec<usize> = b.iter().flat_map(|x| x[s].clone()).collect();
            all.sort();
            assert_eq!(all, (0..[10, 4][s]).collect::<Vec<_>>());
        }
        assert_eq!(b, epoch_batches(&[10, 4], Some(3), 1, 0));
        assert_ne!(b, epoch_batches(&[10, 4], Some(3), 1, 1));
    }

    #[test]
    fn cubic_step_stays_inside() {
        let a = cubic_min(0.0, 1.0, -1.0, 1.0, 2.0, 3.0);
        assert!(a > 0.0 && a < 1.0);
    }
}
