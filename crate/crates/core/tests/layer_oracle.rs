//! Closed-form recomputation of the first two layers of the third-order
//! synthetic plant, with `φ_1 = [x_1², 0]` and `φ_2 = [x_1 x_2, x_2²]`.

#![allow(clippy::needless_range_loop)]

use expstab::backstepping::{Backstepping, GainConfig, Scaling};
use expstab::scenarios::build_synthetic;
use expstab::sim::ControllerKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle {
    alpha1: f64,
    dalpha1_dx1: f64,
    zeta2: f64,
    big_w2: [[f64; 2]; 2],
    alpha2: f64,
}

/// Composite Simpson rule on `[0, 1]`.
fn simpson(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
    let h = 1.0 / panels as f64;
    let mut acc = f(0.0) + f(1.0);
    for k in 1..panels {
        acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn oracle(g: &GainConfig, x: &[f64], th: &[f64], mu: f64) -> Oracle {
    let (k1, k2, lam, d, eps) = (g.k[0], g.k[1], g.lambda, g.delta_theta, g.epsilon_psi);
    let c = k1 + lam + 0.5 * (3.0 * d + 1.0 / eps);
    let a1 = |x1: f64| -c * x1 - 0.5 * d * x1.powi(3) - th[0] * x1 * x1;
    let a1p = |x1: f64| -c - 1.5 * d * x1 * x1 - 2.0 * th[0] * x1;
    let a1pp = |x1: f64| -3.0 * d * x1 - 2.0 * th[0];
    let (x1, x2) = (x[0], x[1]);
    let z1 = x1;
    let z2 = x2 - a1(x1);

    let w2 = [x1 * x2 - a1p(x1) * x1 * x1, x2 * x2];
    // ∂w_2/∂x as [[∂/∂x1 of each component], [∂/∂x2 of each component]]
    let jac_x = |x1: f64, x2: f64| {
        [
            [x2 - a1pp(x1) * x1 * x1 - 2.0 * a1p(x1) * x1, 0.0],
            [x1, 2.0 * x2],
        ]
    };
    let mut big_w2 = [[0.0; 2]; 2];
    for j in 0..2 {
        for p in 0..2 {
            big_w2[j][p] = simpson(
                |s| {
                    let x1s = s * z1;
                    let x2s = s * z2 + a1(x1s);
                    let jx = jac_x(x1s, x2s);
                    if j == 0 {
                        jx[0][p] + jx[1][p] * a1p(x1s)
                    } else {
                        jx[1][p]
                    }
                },
                2000,
            );
        }
    }
    let wf: f64 = big_w2.iter().flatten().map(|v| v * v).sum();
    let zeta2 = lam + 0.5 * (2.0 * d + 1.0 / eps + d * wf);

    let w1 = [x1 * x1, 0.0];
    let tau2: Vec<f64> = (0..2).map(|p| mu * mu * (z1 * w1[p] + z2 * w2[p])).collect();
    let gt: Vec<f64> = (0..2)
        .map(|a| (0..2).map(|b| g.gamma[(a, b)] * tau2[b]).sum())
        .collect();
    let t1 = [-x1 * x1, 0.0];
    let alpha2 = -(k2 + zeta2) * z2 - z1 - (w2[0] * th[0] + w2[1] * th[1]) + t1[0] * gt[0] + t1[1] * gt[1]
        + a1p(x1) * x2;
    Oracle {
        alpha1: a1(x1),
        dalpha1_dx1: a1p(x1),
        zeta2,
        big_w2,
        alpha2,
    }
}

#[test]
fn second_layer_of_third_order_plant_matches_closed_form() {
    let s = build_synthetic(3, ControllerKind::Theorem1).unwrap();
    let mut g = s.gains.clone();
    g.gamma = nalgebra::DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
    g.quadrature_nodes = 24;
    let eng = Backstepping::new(3, 2, g.clone(), Scaling::Exponential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: f64 = rng.gen_range(1.0..2.5);
        let e = eng.evaluate(&s.model, &x, &th, mu).unwrap();
        let o = oracle(&g, &x, &th, mu);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
        assert!(close(e.layers[0].alpha, o.alpha1), "{} vs {}", e.layers[0].alpha, o.alpha1);
        assert!(close(e.layers[0].dalpha_dx[0], o.dalpha1_dx1));
        assert!(close(e.layers[0].dalpha_dtheta[0], -x[0] * x[0]));
        assert_eq!(e.layers[0].dalpha_dtheta[1], 0.0);
        assert!(e.layers[0].dalpha_dmu.abs() < 1e-12);
        for j in 0..2 {
            for p in 0..2 {
                assert!(
                    close(e.layers[1].big_w[(j, p)], o.big_w2[j][p]),
                    "W_2[{j}][{p}]: {} vs {}",
                    e.layers[1].big_w[(j, p)],
                    o.big_w2[j][p]
                );
            }
        }
        assert!(close(e.layers[1].zeta, o.zeta2));
        assert!(close(e.layers[1].alpha, o.alpha2), "{} vs {}", e.layers[1].alpha, o.alpha2);
    }
}

#[test]
fn regressor_factorization_reproduces_the_regressor() {
    let s = build_synthetic(1, ControllerKind::Theorem2).unwrap();
    let eng = Backstepping::new(3, 2, s.gains.clone(), Scaling::Exponential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = eng.evaluate(&s.model, &x, &th, rng.gen_range(1.0..3.0)).unwrap();
        let z: Vec<f64> = e.layers.iter().map(|l| l.z).collect();
        for (i, l) in e.layers.iter().enumerate() {
            for p in 0..2 {
                let fit: f64 = (0..=i).map(|j| l.big_w[(j, p)] * z[j]).sum();
                assert!((fit - l.w[p]).abs() <= 1e-8 * (1.0 + l.w[p].abs()));
            }
        }
        let fit: f64 = e.psi_bar.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((fit - e.psi).abs() <= 1e-8 * (1.0 + e.psi.abs()));
    }
}

#[test]
fn first_layer_regressor_is_the_plant_regressor() {
    let s = build_synthetic(2, ControllerKind::Theorem1).unwrap();
    let eng = Backstepping::new(3, 2, s.gains.clone(), Scaling::Exponential).unwrap();
    let x = [0.4, -0.3, 0.7];
    let e = eng.evaluate(&s.model, &x, &[0.2, 0.1], 1.5).unwrap();
    assert_eq!(e.layers[0].w, s.model.eval_regressor(1, &x[..1]).unwrap());
    assert!((e.layers[0].big_w[(0, 0)] - 0.4).abs() < 1e-14);
}
