use std::f64::consts::PI;

use derl::problems::{pendulum_energy, Domain};
use derl::solvers::{
    cell_centres, continuity_fv_solve, cubic_interpolate, empirical_derivative, kdv_spectral_solve,
    pendulum_flow, rk4_trajectory, uniform_axis, FnSampler, GridField, Scheme,
};
use derl::Error;
use proptest::prelude::*;

#[test]
fn rk4_exponential_decay() {
    let g = rk4_trajectory(|_, s| vec![-s[0]], &[1.0], 0.01, 1.0).unwrap();
    let last = *g.data.last().unwrap();
    assert!((last - (-1.0f64).exp()).abs() <= 1e-8);
    assert_eq!(*g.axes[0].last().unwrap(), 1.0);
}

#[test]
fn rk4_one_step_matches_taylor_series() {
    // growth factor of one RK4 step on u' = λu is 1 + z + z²/2 + z³/6 + z⁴/24
    let z: f64 = 0.1;
    let g = rk4_trajectory(|_, s| vec![s[0]], &[1.0], z, z).unwrap();
    let expected = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
    assert!((g.data[1] - expected).abs() < 1e-15);
}

#[test]
fn conservative_pendulum_energy_drift() {
    let g_l = 9.81;
    let g = rk4_trajectory(
        |_, s| {
            let r = derl::problems::pendulum_rhs([s[0], s[1]], g_l, 0.0);
            r.to_vec()
        },
        &[1.2, 0.5],
        0.01,
        10.0,
    )
    .unwrap();
    let e0 = pendulum_energy([1.2, 0.5], g_l);
    let n = g.axes[0].len();
    let e1 = pendulum_energy([g.data[2 * (n - 1)], g.data[2 * (n - 1) + 1]], g_l);
    assert!(((e1 - e0) / e0).abs() <= 1e-6, "drift {}", (e1 - e0) / e0);
}

#[test]
fn pendulum_sensitivities_match_finite_differences() {
    let (g_l, b_m) = (9.81, 0.3);
    let base = pendulum_flow(0.4, -0.2, g_l, b_m, 0.01, 3.0).unwrap();
    let h = 1e-6;
    let up = pendulum_flow(0.4 + h, -0.2, g_l, b_m, 0.01, 3.0).unwrap();
    let dn = pendulum_flow(0.4 - h, -0.2, g_l, b_m, 0.01, 3.0).unwrap();
    let vp = pendulum_flow(0.4, -0.2 + h, g_l, b_m, 0.01, 3.0).unwrap();
    let vm = pendulum_flow(0.4, -0.2 - h, g_l, b_m, 0.01, 3.0).unwrap();
    for i in [50usize, 150, 300] {
        let du = (up.data[6 * i] - dn.data[6 * i]) / (2.0 * h);
        let dv = (vp.data[6 * i] - vm.data[6 * i]) / (2.0 * h);
        assert!((base.data[6 * i + 2] - du).abs() < 1e-7);
        assert!((base.data[6 * i + 4] - dv).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn damped_pendulum_energy_rate(u in -3.0f64..3.0, v in -3.0f64..3.0, b in 0.01f64..2.0) {
        // dE/dt along the flow equals -(b/m) v²
        let g_l = 9.81;
        let r = derl::problems::pendulum_rhs([u, v], g_l, b);
        let de = v * r[1] + g_l * u.sin() * r[0];
        prop_assert!((de + b * v * v).abs() < 1e-12 * (1.0 + v * v * b));
        prop_assert!(de <= 1e-12);
    }
}

fn gaussian_ic(n: usize, cx: f64, cy: f64) -> GridField {
    let xs = cell_centres(-1.5, 1.5, n);
    GridField::from_fn(&["x", "y"], vec![xs.clone(), xs], |p| {
        (-((p[0] - cx).powi(2) + (p[1] - cy).powi(2)) / (2.0 * 0.2 * 0.2)).exp()
    })
}

fn snapshot(field: &GridField, k: usize) -> &[f64] {
    let m = field.axes[1].len() * field.axes[2].len();
    &field.data[k * m..(k + 1) * m]
}

#[test]
fn fv_zero_ic_stays_zero() {
    let xs = cell_centres(-1.5, 1.5, 40);
    let ic = GridField::zeros(&["x", "y"], vec![xs.clone(), xs], 1);
    let out = continuity_fv_solve(&ic, 0.01, 1.0, 10).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn fv_conserves_mass_and_positivity() {
    let xs = cell_centres(-1.5, 1.5, 60);
    let ic = GridField::from_fn(&["x", "y"], vec![xs.clone(), xs.clone()], |p| {
        derl::problems::continuity_ic(p[0], p[1])
    });
    let dx = 3.0 / 60.0;
    let out = continuity_fv_solve(&ic, 0.01, 10.0, 100).unwrap();
    let m0: f64 = snapshot(&out, 0).iter().sum::<f64>() * dx * dx;
    for k in 0..out.axes[0].len() {
        let mk: f64 = snapshot(&out, k).iter().sum::<f64>() * dx * dx;
        assert!(((mk - m0) / m0).abs() <= 1e-10);
        assert!(snapshot(&out, k).iter().all(|&v| v >= -1e-12));
    }
}

#[test]
fn fv_quarter_rotation_moves_centroid() {
    let n = 150;
    let ic = gaussian_ic(n, 0.6, 0.0);
    let t = PI / 2.0;
    let out = continuity_fv_solve(&ic, 0.004, t, 10_000).unwrap();
    let last = out.axes[0].len() - 1;
    let rho = snapshot(&out, last);
    let xs = &out.axes[1];
    let (mut mx, mut my, mut m) = (0.0, 0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in xs.iter().enumerate() {
            let r = rho[i * n + j];
            mx += r * x;
            my += r * y;
            m += r;
        }
    }
    let (cx, cy) = (mx / m, my / m);
    let cell = 3.0 / n as f64;
    // exact rotation sends (0.6, 0) to (0, 0.6)
    assert!(cx.abs() <= cell && (cy - 0.6).abs() <= cell, "centroid ({cx}, {cy})");
}

fn kdv_run(dt: f64, t: f64) -> Vec<f64> {
    let g = kdv_spectral_solve(|x| (PI * x).cos(), 0.0025, 128, dt, t, t).unwrap();
    let n = g.axes[1].len();
    g.data[g.data.len() - n..].to_vec()
}

#[test]
fn kdv_constant_ic_is_stationary() {
    let g = kdv_spectral_solve(|_| 0.7, 0.0025, 64, 1e-3, 0.1, 0.05).unwrap();
    assert!(g.data.iter().all(|v| (v - 0.7).abs() < 1e-14));
}

#[test]
fn kdv_conserves_mass() {
    let g = kdv_spectral_solve(|x| (PI * x).cos() + 0.3, 0.0025, 128, 1e-3, 1.0, 0.01).unwrap();
    let n = g.axes[1].len();
    let dx = 2.0 / n as f64;
    let m0: f64 = g.data[..n].iter().sum::<f64>() * dx;
    for k in 0..g.axes[0].len() {
        let mk: f64 = g.data[k * n..(k + 1) * n].iter().sum::<f64>() * dx;
        assert!(((mk - m0) / m0).abs() <= 1e-8);
    }
}

#[test]
fn kdv_self_convergence() {
    let l2 = |a: &[f64], b: &[f64]| {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    };
    let u1 = kdv_run(2e-3, 0.5);
    let u2 = kdv_run(1e-3, 0.5);
    let u3 = kdv_run(5e-4, 0.5);
    let e1 = l2(&u1, &u2);
    let e2 = l2(&u2, &u3);
    let order = (e1 / e2).log2();
    println!("order {order:.3}");
    assert!(order >= 3.0, "order {order} ({e1:e}, {e2:e})");
    assert!(e2 <= 1e-6, "halved-step difference {e2:e}");
}

#[test]
fn linear_function_derivative_is_exact() {
    let dom = Domain::new(&["x"], vec![-2.0], vec![2.0], &[]);
    let s = FnSampler { f: |x: &[f64]| 3.0 * x[0] + 1.0, domain: &dom };
    for h in [0.5, 1e-1, 1e-3] {
        for scheme in [Scheme::Forward, Scheme::Central] {
            let d = empirical_derivative(&s, &[0.3], 0, h, scheme).unwrap();
            assert!((d - 3.0).abs() < 1e-9 / h.min(1.0) * 1e-3);
        }
    }
}

#[test]
fn stencil_outside_domain_is_error() {
    let dom = Domain::new(&["x"], vec![0.0], vec![1.0], &[]);
    let s = FnSampler { f: |x: &[f64]| x[0], domain: &dom };
    let r = empirical_derivative(&s, &[0.9995], 0, 1e-3, Scheme::Forward);
    assert!(matches!(r, Err(Error::Domain(_))));
    let r = empirical_derivative(&s, &[0.0005], 0, 1e-3, Scheme::Central);
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn difference_quotient_orders_on_sine() {
    let dom = Domain::new(&["x"], vec![0.0], vec![PI], &[]);
    let s = FnSampler { f: |x: &[f64]| x[0].sin(), domain: &dom };
    let x = 1.0;
    let err = |h: f64, sch| (empirical_derivative(&s, &[x], 0, h, sch).unwrap() - x.cos()).abs();
    let f1 = (err(1e-1, Scheme::Forward) / err(1e-2, Scheme::Forward)).log10();
    let f2 = (err(1e-2, Scheme::Forward) / err(1e-3, Scheme::Forward)).log10();
    let c1 = (err(1e-1, Scheme::Central) / err(1e-2, Scheme::Central)).log10();
    assert!(f1 > 0.95 && f2 > 0.95, "{f1} {f2}");
    assert!(c1 > 1.9, "{c1}");
}

#[test]
fn cubic_interpolation_is_exact_on_cubics() {
    let xs = uniform_axis(-1.0, 1.0, 21);
    let ys = uniform_axis(0.0, 2.0, 11);
    let f = |x: f64, y: f64| x.powi(3) - 2.0 * x * y * y + y.powi(3) + 0.5;
    let g = GridField::from_fn(&["x", "y"], vec![xs, ys], |p| f(p[0], p[1]));
    for &(x, y) in &[(0.013, 0.77), (-0.987, 1.999), (0.5555, 0.0101), (0.999, 1.03)] {
        let v = cubic_interpolate(&g, &[x, y]).unwrap();
        assert!((v - f(x, y)).abs() < 1e-10, "{v} vs {}", f(x, y));
    }
}

#[test]
fn cubic_interpolation_of_smooth_field() {
    let xs = uniform_axis(-1.0, 1.0, 201);
    let g = GridField::from_fn(&["x", "y"], vec![xs.clone(), xs], |p| {
        (PI * p[0]).sin() * (PI * p[1]).sin()
    });
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let x = -0.995 + 0.00991 * k as f64;
        let y = 0.73 - 0.0071 * k as f64;
        let v = cubic_interpolate(&g, &[x, y]).unwrap();
        worst = worst.max((v - (PI * x).sin() * (PI * y).sin()).abs());
    }
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn grid_field_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = GridField::from_fn(&["t", "x"], vec![uniform_axis(0.0, 1.0, 3), uniform_axis(-1.0, 1.0, 4)], |p| {
        p[0] * 0.1 + p[1].exp()
    });
    g.meta.insert("dt".into(), 0.5);
    let path = dir.path().join("field");
    g.save(&path).unwrap();
    assert_eq!(GridField::load(&path).unwrap(), g);
    g.write_csv(dir.path().join("field.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("field.csv")).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.starts_with("t,x,u0"));
}

#[test]
fn forward_quotients_of_bump_bounded_by_true_derivative() {
    let bump = |x: f64| if x.abs() < 1.0 { (-1.0 / (1.0 - x * x)).exp() } else { 0.0 };
    let dbump = |x: f64| {
        if x.abs() < 1.0 {
            -2.0 * x / (1.0 - x * x).powi(2) * bump(x)
        } else {
            0.0
        }
    };
    let dom = Domain::new(&["x"], vec![-2.0], vec![2.0], &[]);
    let s = FnSampler { f: |p: &[f64]| bump(p[0]), domain: &dom };
    for h in [1e-1f64, 1e-2, 1e-3] {
        let n = (3.0 / h).round() as usize;
        let (mut q2, mut d2) = (0.0, 0.0);
        for i in 0..n {
            let x = -1.5 + i as f64 * h;
            let q = empirical_derivative(&s, &[x], 0, h, Scheme::Forward).unwrap();
            q2 += h * q * q;
            d2 += h * dbump(x).powi(2);
        }
        assert!(q2.sqrt() <= d2.sqrt() + h, "h={h}: {} vs {}", q2.sqrt(), d2.sqrt());
    }
}
