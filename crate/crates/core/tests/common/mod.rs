#![allow(dead_code)]

use derl::autodiff::{Approximator, DerivOrder, JetLayout, Jets};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A model whose jets come from finite differences of a plain function.
pub struct FdModel<F> {
    pub f: F,
    pub d: usize,
    pub m: usize,
    pub h: f64,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FdModel<F> {
    fn shifted(&self, x: &[f64], steps: &[(usize, f64)]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &(i, s) in steps {
            y[i] += s;
        }
        (self.f)(&y)
    }

    fn along(&self, x: &[f64], dir: &[f64], s: f64) -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(dir).map(|(a, v)| a + s * v).collect();
        (self.f)(&y)
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Approximator for FdModel<F> {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn output_dim(&self) -> usize {
        self.m
    }

    fn jets(&self, points: ArrayView2<f64>, layout: &JetLayout) -> derl::Result<Jets> {
        let (n, d, h) = (points.nrows(), self.d, self.h);
        let mut jets = Jets::zeros(layout, self.m, n);
        for p in 0..n {
            let x = points.row(p).to_vec();
            let f0 = (self.f)(&x);
            for k in 0..self.m {
                jets.add_value(p, k, f0[k]);
            }
            if layout.order() >= DerivOrder::First {
                for i in 0..d {
                    let a = self.shifted(&x, &[(i, h)]);
                    let b = self.shifted(&x, &[(i, -h)]);
                    for k in 0..self.m {
                        jets.add_jac(p, k, i, (a[k] - b[k]) / (2.0 * h));
                    }
                }
            }
            if layout.order() >= DerivOrder::Second {
                for i in 0..d {
                    for j in i..d {
                        let v: Vec<f64> = if i == j {
                            let a = self.shifted(&x, &[(i, h)]);
                            let b = self.shifted(&x, &[(i, -h)]);
                            (0..self.m).map(|k| (a[k] - 2.0 * f0[k] + b[k]) / (h * h)).collect()
                        } else {
                            let pp = self.shifted(&x, &[(i, h), (j, h)]);
                            let pm = self.shifted(&x, &[(i, h), (j, -h)]);
                            let mp = self.shifted(&x, &[(i, -h), (j, h)]);
                            let mm = self.shifted(&x, &[(i, -h), (j, -h)]);
                            (0..self.m)
                                .map(|k| (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * h * h))
                                .collect()
                        };
                        for k in 0..self.m {
                            jets.add_hess(p, k, i, j, v[k]);
                        }
                    }
                }
            }
            for (q, dir) in layout.third_directions().iter().enumerate() {
                let g2 = self.along(&x, dir, 2.0 * h);
                let g1 = self.along(&x, dir, h);
                let m1 = self.along(&x, dir, -h);
                let m2 = self.along(&x, dir, -2.0 * h);
                for k in 0..self.m {
                    let v = (g2[k] - 2.0 * g1[k] + 2.0 * m1[k] - m2[k]) / (2.0 * h * h * h);
                    jets.add_third(p, k, q, v);
                }
            }
        }
        Ok(jets)
    }
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, lower: &[f64], upper: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((n, lower.len()), |(_, i)| rng.random_range(lower[i]..upper[i]))
}

use derl::autodiff::Network as Net;
use derl::losses::{CollocationSet, Objective, Region};
use derl::problems::ProblemSpec;

/// Interior set with analytic targets up to second order, plus boundary and
/// initial sets, for a problem with a closed form.
pub fn analytic_sets(problem: &ProblemSpec, n: usize, seed: u64) -> (CollocationSet, CollocationSet) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stub = derl::problems::AnalyticModel::new(problem).unwrap();
    let pts = problem.domain.sample_interior(n, &mut rng);
    let interior = CollocationSet::from_model(&stub, pts, Region::Interior, DerivOrder::Second).unwrap();
    let bpts = problem.domain.sample_boundary(n / 4 + 1, &mut rng);
    let mut boundary = CollocationSet::new(bpts.clone(), Region::Boundary);
    let vals: Vec<Vec<f64>> = bpts.rows().into_iter().map(|r| problem.boundary_value(&r.to_vec()).unwrap()).collect();
    boundary.values = Some(Array2::from_shape_fn((vals.len(), problem.output_dim()), |(p, k)| vals[p][k]));
    (interior, boundary)
}

/// Points-only sets for solver-backed problems: interior, boundary, initial.
pub fn residual_sets(problem: &ProblemSpec, n: usize, seed: u64) -> (CollocationSet, CollocationSet, Option<CollocationSet>) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior = CollocationSet::new(problem.domain.sample_interior(n, &mut rng), Region::Interior);
    let mut boundary = CollocationSet::new(problem.domain.sample_boundary(n / 4 + 1, &mut rng), Region::Boundary);
    if problem.boundary_kind() == derl::problems::BoundaryKind::Dirichlet {
        boundary.values = Some(Array2::zeros((boundary.len(), problem.output_dim())));
    }
    let initial = problem.domain.time_axis.map(|t| {
        let mut pts = problem.domain.sample_interior(n / 4 + 1, &mut rng);
        pts.column_mut(t).fill(problem.domain.lower[t]);
        let vals: Vec<Vec<f64>> = pts.rows().into_iter().map(|r| problem.initial_value(&r.to_vec()).unwrap()).collect();
        let mut set = CollocationSet::new(pts, Region::Initial);
        set.values = Some(Array2::from_shape_fn((vals.len(), problem.output_dim()), |(p, k)| vals[p][k]));
        set
    });
    (interior, boundary, initial)
}

/// Worst relative mismatch between the analytic parameter gradient and
/// central differences on `count` sampled parameters.
pub fn gradient_mismatch<O: Objective>(obj: &O, net: &Net, count: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; net.num_params()];
    obj.evaluate(net, None, Some(&mut grad)).unwrap();
    let base = net.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] += h;
        let up = obj.evaluate(&net.with_params(&p).unwrap(), None, None).unwrap().total;
        p[i] -= 2.0 * h;
        let dn = obj.evaluate(&net.with_params(&p).unwrap(), None, None).unwrap().total;
        let fd = (up - dn) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1e-3);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}
