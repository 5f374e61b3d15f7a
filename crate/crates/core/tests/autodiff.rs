use derl::autodiff::{
    input_derivatives, loss_gradient, Approximator, DerivOrder, JetLayout, Jets, Network,
};
use derl::Result;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn eval(net: &Network, x: &[f64]) -> Vec<f64> {
    net.forward(x).unwrap()
}

/// Central differences of the output along axis `i`.
fn fd_first(net: &Network, x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    eval(net, &xp)
        .iter()
        .zip(eval(net, &xm))
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

#[test]
fn linear_network_has_exact_jacobian_and_zero_hessian() {
    let w = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.5]).unwrap();
    let net = Network::from_layers(vec![w.clone()], vec![Array1::from(vec![0.1, 0.2])]).unwrap();
    let der = input_derivatives(&net, &[0.3, -0.2, 0.9], DerivOrder::Second, None).unwrap();
    assert_eq!(der.jacobian, w);
    assert!(der.hessian.unwrap().iter().all(|&h| h == 0.0));
}

#[test]
fn jacobian_and_hessian_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let d = 1 + trial % 4;
        let net = Network::init(&[d, 20, 20, 2], trial as u64).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let der = input_derivatives(&net, &x, DerivOrder::Second, None).unwrap();
        let h = 1e-4;
        let mut fd = Vec::new();
        let mut ad = Vec::new();
        for i in 0..d {
            let col = fd_first(&net, &x, i, h);
            for k in 0..2 {
                fd.push(col[k]);
                ad.push(der.jacobian[[k, i]]);
            }
        }
        assert!(rel_err(&ad, &fd) <= 1e-5, "jacobian trial {trial}");

        // Hessian: central differences of the exact jacobian
        let hess = der.hessian.unwrap();
        let mut fd = Vec::new();
        let mut ad = Vec::new();
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let jp = input_derivatives(&net, &xp, DerivOrder::First, None).unwrap().jacobian;
            let jm = input_derivatives(&net, &xm, DerivOrder::First, None).unwrap().jacobian;
            for k in 0..2 {
                for i in 0..d {
                    fd.push((jp[[k, i]] - jm[[k, i]]) / (2.0 * h));
                    ad.push(hess[[k, i, j]]);
                    assert!((hess[[k, i, j]] - hess[[k, j, i]]).abs() <= 1e-10);
                }
            }
        }
        assert!(rel_err(&ad, &fd) <= 1e-5, "hessian trial {trial}");
    }
}

#[test]
fn third_axis_matches_differences_of_hessian() {
    let net = Network::init(&[2, 30, 30, 1], 3).unwrap();
    let x = [0.2, -0.4];
    for axis in 0..2 {
        let der = input_derivatives(&net, &x, DerivOrder::Second, Some(axis)).unwrap();
        let h = 1e-4;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[axis] += h;
        xm[axis] -= h;
        let hp = input_derivatives(&net, &xp, DerivOrder::Second, None).unwrap().hessian.unwrap();
        let hm = input_derivatives(&net, &xm, DerivOrder::Second, None).unwrap().hessian.unwrap();
        let fd = (hp[[0, axis, axis]] - hm[[0, axis, axis]]) / (2.0 * h);
        let got = der.third_axis.unwrap()[0];
        assert!((got - fd).abs() <= 1e-5 * fd.abs().max(1.0), "axis {axis}: {got} vs {fd}");
    }
}

#[test]
fn third_direction_matches_differences() {
    let net = Network::init(&[3, 16, 16, 1], 9).unwrap();
    let x = [0.1, 0.5, -0.3];
    let dir = vec![1.0, -1.0, 0.5];
    let layout = JetLayout::new(3, DerivOrder::First).with_third_direction(dir.clone()).unwrap();
    let pts = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
    let jets = net.jets(pts.view(), &layout).unwrap();
    // fourth-order central stencil for the third derivative of g(s) = u(x + s v)
    let g = |s: f64| {
        let p: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
        eval(&net, &p)[0]
    };
    let h = 1e-2;
    let fd = (g(2.0 * h) - 2.0 * g(h) + 2.0 * g(-h) - g(-2.0 * h)) / (2.0 * h.powi(3));
    let got = jets.third(0, 0, 0);
    assert!((got - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{got} vs {fd}");
}

#[test]
fn input_derivatives_reject_bad_axis_and_shape() {
    let net = Network::init(&[2, 4, 1], 0).unwrap();
    assert!(input_derivatives(&net, &[0.0, 0.0], DerivOrder::Second, Some(2)).is_err());
    assert!(input_derivatives(&net, &[0.0], DerivOrder::First, None).is_err());
}

#[test]
fn input_derivatives_are_pure() {
    let net = Network::init(&[3, 25, 25, 2], 4).unwrap();
    let x = [0.3, 0.1, -0.8];
    let a = input_derivatives(&net, &x, DerivOrder::Second, Some(1)).unwrap();
    let b = input_derivatives(&net, &x, DerivOrder::Second, Some(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_jets_agree_with_single_point_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::init(&[2, 12, 12, 1], 2).unwrap();
    let pts = random_points(&mut rng, 9, 2);
    let layout = JetLayout::new(2, DerivOrder::Second);
    let jets = net.jets(pts.view(), &layout).unwrap();
    for p in 0..9 {
        let x = pts.row(p).to_vec();
        let single = input_derivatives(&net, &x, DerivOrder::Second, None).unwrap();
        assert_eq!(jets.value(p, 0), single.value[0]);
        for i in 0..2 {
            assert_eq!(jets.jac(p, 0, i), single.jacobian[[0, i]]);
            for j in 0..2 {
                assert_eq!(jets.hess(p, 0, i, j), single.hessian.as_ref().unwrap()[[0, i, j]]);
            }
        }
    }
}

/// Independent reverse-mode gradient of a scalar-output network w.r.t. its input.
fn reverse_input_gradient(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut acts = vec![Array1::from(x.to_vec())];
    let mut pre = Vec::new();
    let last = net.num_layers() - 1;
    for l in 0..=last {
        let z = net.weights(l).dot(acts.last().unwrap()) + net.biases(l);
        pre.push(z.clone());
        acts.push(if l < last { z.mapv(f64::tanh) } else { z });
    }
    let mut g = Array1::from(vec![1.0]);
    for l in (0..=last).rev() {
        if l < last {
            g = g * pre[l].mapv(|z| 1.0 - z.tanh().powi(2));
        }
        g = net.weights(l).t().dot(&g);
    }
    g.to_vec()
}

#[test]
fn forward_jacobian_equals_reverse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let net = Network::init(&[3, 50, 50, 50, 50, 1], seed).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fwd = input_derivatives(&net, &x, DerivOrder::First, None).unwrap();
        let rev = reverse_input_gradient(&net, &x);
        for i in 0..3 {
            assert!((fwd.jacobian[[0, i]] - rev[i]).abs() <= 1e-10);
        }
    }
}

fn perturbed_loss<F>(net: &Network, idx: usize, delta: f64, f: &F) -> f64
where
    F: Fn(&Network) -> f64,
{
    let mut p = net.params();
    p[idx] += delta;
    f(&net.with_params(&p).unwrap())
}

fn check_param_gradient<F>(net: &Network, grad: &[f64], loss: F, seed: u64)
where
    F: Fn(&Network) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for _ in 0..20 {
        let idx = rng.random_range(0..grad.len());
        let h = 1e-6;
        let fd = (perturbed_loss(net, idx, h, &loss) - perturbed_loss(net, idx, -h, &loss)) / (2.0 * h);
        let denom = fd.abs().max(1e-3 * scale);
        assert!(
            (grad[idx] - fd).abs() <= 1e-4 * denom,
            "param {idx}: ad {} vs fd {fd}",
            grad[idx]
        );
    }
}

#[test]
fn zero_loss_has_zero_gradient() {
    let net = Network::init(&[2, 8, 1], 0).unwrap();
    let pts = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let layout = JetLayout::new(2, DerivOrder::First);
    let zero = |_: &Jets, _: &mut Jets| -> Result<f64> { Ok(0.0) };
    let (v, g) = loss_gradient(&net, pts.view(), &layout, &zero).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn output_mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Network::init(&[2, 20, 20, 2], 1).unwrap();
    let pts = random_points(&mut rng, 8, 2);
    let targets = random_points(&mut rng, 8, 2);
    let layout = JetLayout::new(2, DerivOrder::Value);
    let loss = |j: &Jets, adj: &mut Jets| -> Result<f64> {
        let n = j.len() as f64;
        let mut s = 0.0;
        for p in 0..j.len() {
            for k in 0..2 {
                let r = j.value(p, k) - targets[[p, k]];
                s += r * r / n;
                adj.add_value(p, k, 2.0 * r / n);
            }
        }
        Ok(s)
    };
    let (_, grad) = loss_gradient(&net, pts.view(), &layout, &loss).unwrap();
    let f = |n: &Network| {
        let mut adj = Jets::zeros(&layout, 2, 8);
        loss(&n.jets(pts.view(), &layout).unwrap(), &mut adj).unwrap()
    };
    check_param_gradient(&net, &grad, f, 3);
}

#[test]
fn derivative_losses_gradient_matches_finite_differences() {
    // jacobian, hessian and third-derivative targets in one loss
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = Network::init(&[2, 16, 16, 16, 1], 8).unwrap();
    let pts = random_points(&mut rng, 8, 2);
    let jt = random_points(&mut rng, 8, 2);
    let ht = random_points(&mut rng, 8, 3);
    let layout = JetLayout::new(2, DerivOrder::First).with_third_axis(1).unwrap();
    let loss = |j: &Jets, adj: &mut Jets| -> Result<f64> {
        let n = j.len() as f64;
        let mut s = 0.0;
        for p in 0..j.len() {
            for i in 0..2 {
                let r = j.jac(p, 0, i) - jt[[p, i]];
                s += r * r / n;
                adj.add_jac(p, 0, i, 2.0 * r / n);
            }
            for (q, (a, b)) in [(0, 0), (0, 1), (1, 0)].into_iter().enumerate() {
                let r = j.hess(p, 0, a, b) - ht[[p, q]];
                s += r * r / n;
                adj.add_hess(p, 0, a, b, 2.0 * r / n);
            }
            let r = j.third(p, 0, 0) + 0.3 * j.value(p, 0) * j.jac(p, 0, 1);
            s += r * r / n;
            adj.add_third(p, 0, 0, 2.0 * r / n);
            adj.add_value(p, 0, 2.0 * r / n * 0.3 * j.jac(p, 0, 1));
            adj.add_jac(p, 0, 1, 2.0 * r / n * 0.3 * j.value(p, 0));
        }
        Ok(s)
    };
    let (_, grad) = loss_gradient(&net, pts.view(), &layout, &loss).unwrap();
    let f = |n: &Network| {
        let mut adj = Jets::zeros(&layout, 1, 8);
        loss(&n.jets(pts.view(), &layout).unwrap(), &mut adj).unwrap()
    };
    check_param_gradient(&net, &grad, f, 4);
}

#[test]
fn non_finite_loss_reports_batch_index() {
    let net = Network::init(&[1, 4, 1], 0).unwrap();
    let pts = Array2::from_shape_vec((3, 1), vec![0.0, 0.5, 1.0]).unwrap();
    let layout = JetLayout::new(1, DerivOrder::Value);
    let loss = |_: &Jets, adj: &mut Jets| -> Result<f64> {
        adj.add_value(2, 0, f64::NAN);
        Ok(1.0)
    };
    match loss_gradient(&net, pts.view(), &layout, &loss) {
        Err(derl::Error::Numerical { index, .. }) => assert_eq!(index, Some(2)),
        other => panic!("expected numerical error, got {other:?}"),
    }
}
