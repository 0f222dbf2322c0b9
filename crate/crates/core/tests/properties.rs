use expstab::analysis::{check_monotone, compare_runs, fit_envelope, MetricSpec};
use expstab::backstepping::factorize_line_integral;
use expstab::jet::{propagate_sensitivities, Jet, JetSpace};
use expstab::nussbaum::NussbaumSpec;
use expstab::scalar::{scalar_a_law, scalar_b_law, ScalarGains, ScalarState};
use expstab::sim::{time_grid, RunStatus, Trajectory};
use expstab::Error;
use proptest::prelude::*;

fn trajectory(name: &str, t: &[f64], x: &[f64], u: &[f64]) -> Trajectory {
    Trajectory {
        schema: "expstab.trajectory/v1".into(),
        scenario: name.into(),
        controller: "open-loop".into(),
        n: 1,
        q: 1,
        t: t.to_vec(),
        x: x.iter().map(|v| vec![*v]).collect(),
        u: u.to_vec(),
        theta_hat: vec![vec![0.0]; t.len()],
        aux_name: "aux".into(),
        aux: vec![0.0; t.len()],
        mu: vec![1.0; t.len()],
        diagnostic_names: Vec::new(),
        diagnostics: vec![Vec::new(); t.len()],
        status: RunStatus::Completed,
    }
}

fn signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 2..40)
}

proptest! {
    #[test]
    fn envelope_bounds_every_sample(x in signal(), lambda in 0.0..2.0f64) {
        let t: Vec<f64> = (0..x.len()).map(|k| 0.1 * k as f64).collect();
        let tr = trajectory("a", &t, &x, &x);
        let fit = fit_envelope(&tr, lambda);
        prop_assert!(fit.holds);
        for (k, m) in fit.margin.iter().enumerate() {
            prop_assert!(*m >= -1e-12 * (1.0 + fit.n), "margin {} at {}", m, k);
        }
        let at = t.iter().position(|v| *v == fit.t_max).unwrap();
        prop_assert!(fit.margin[at].abs() <= 1e-12 * (1.0 + fit.n));
        let sup = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let zero = fit_envelope(&tr, 0.0);
        prop_assert_eq!(zero.n, sup);
    }

    #[test]
    fn comparison_ignores_input_order(a in signal(), b in signal()) {
        let len = a.len().min(b.len());
        let t: Vec<f64> = (0..len).map(|k| 0.1 * k as f64).collect();
        let xa = a[..len].to_vec();
        let mut xb = b[..len].to_vec();
        xb[0] = xa[0];
        let ra = trajectory("a", &t, &xa, &xb);
        let rb = trajectory("b", &t, &xb, &xa);
        let spec = MetricSpec::default();
        let one = compare_runs(&[("a", &ra), ("b", &rb)], &spec).unwrap();
        let two = compare_runs(&[("b", &rb), ("a", &ra)], &spec).unwrap();
        prop_assert_eq!(one, two);
    }

    #[test]
    fn sorted_signals_are_monotone(mut x in signal()) {
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert!(check_monotone(&x, 0.0).holds);
    }

    #[test]
    fn time_grid_is_ordered_and_hits_breakpoints(
        horizon in 0.5..20.0f64,
        step in 1e-3..0.2f64,
        raw in prop::collection::vec(0.0..1.0f64, 0..8),
    ) {
        let bps: Vec<f64> = raw.iter().map(|r| r * horizon).collect();
        let g = time_grid(horizon, step, &bps);
        prop_assert_eq!(g[0], 0.0);
        prop_assert_eq!(*g.last().unwrap(), horizon);
        for w in g.windows(2) {
            prop_assert!(w[1] > w[0]);
            prop_assert!(w[1] - w[0] <= step * (1.0 + 1e-9));
        }
        for b in bps.iter().filter(|b| **b > 0.0 && **b < horizon) {
            prop_assert!(g.iter().any(|t| (t - b).abs() <= 1e-6 * step), "breakpoint {} missing", b);
        }
    }

    #[test]
    fn factorization_of_quadratic_maps(
        z in prop::collection::vec(-2.0..2.0f64, 1..4),
        c in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let g = |v: &[Jet]| -> Vec<Jet> {
            let mut a = &v[0] * c[0];
            let mut b = &v[0] * &v[0] * c[1];
            for (j, vj) in v.iter().enumerate().skip(1) {
                a = a + vj * &v[0] * c[2];
                b = b + vj * c[3] * (j as f64);
            }
            vec![a, b]
        };
        let f = factorize_line_integral(g, &z, 8).unwrap();
        prop_assert!(f.residual <= 1e-10, "residual {}", f.residual);
    }

    #[test]
    fn jets_match_hand_derivatives(a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let (v, grad) = propagate_sensitivities(|p| &p[0] * &p[1] + p[0].sin() * p[1].exp(), &[a, b]);
        prop_assert!((v - (a * b + a.sin() * b.exp())).abs() <= 1e-12 * (1.0 + v.abs()));
        prop_assert!((grad[0] - (b + a.cos() * b.exp())).abs() <= 1e-12 * (1.0 + grad[0].abs()));
        prop_assert!((grad[1] - (a + a.sin() * b.exp())).abs() <= 1e-12 * (1.0 + grad[1].abs()));
    }

    #[test]
    fn mixed_second_derivatives_commute(a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let sp = JetSpace::new(2, 3);
        let x = Jet::variable(&sp, 3, 0, a);
        let y = Jet::variable(&sp, 3, 1, b);
        let f = (&x * &y).sin() + &x * &x * &y;
        let xy = f.derivative(0).derivative(1).value();
        let yx = f.derivative(1).derivative(0).value();
        prop_assert!((xy - yx).abs() <= 1e-12);
        let want = (a * b).cos() - a * b * (a * b).sin() + 2.0 * a;
        prop_assert!((xy - want).abs() <= 1e-12);
    }

    #[test]
    fn design_b_without_damping_is_design_a(
        t in 0.0..10.0f64, x in -3.0..3.0f64, a_hat in -3.0..3.0f64, k in 0.1..3.0f64, lambda in 0.0..1.0f64,
    ) {
        let g = ScalarGains { k, lambda, delta_a: 0.0, ..ScalarGains::default() };
        let st = ScalarState { t, x, a_hat, xi: 0.0 };
        prop_assert_eq!(scalar_a_law(&st, &g).unwrap(), scalar_b_law(&st, &g).unwrap());
    }

    #[test]
    fn nussbaum_guard(xi in -3.0..9.0f64) {
        let spec = NussbaumSpec::sin_exp_square();
        match spec.eval(xi) {
            Ok(v) => {
                prop_assert!((0.0..=spec.xi_max).contains(&xi));
                prop_assert!((v - xi.sin() * (xi * xi).exp()).abs() <= 1e-12 * (1.0 + v.abs()));
            }
            Err(Error::NussbaumDomain(_)) => prop_assert!(xi < 0.0),
            Err(Error::NussbaumOverflow { .. }) => prop_assert!(xi > spec.xi_max),
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn trajectory_json_round_trip(x in signal()) {
        let t: Vec<f64> = (0..x.len()).map(|k| 0.25 * k as f64).collect();
        let tr = trajectory("rt", &t, &x, &x);
        let mut buf = Vec::new();
        tr.write_json(&mut buf).unwrap();
        prop_assert_eq!(Trajectory::read_json(buf.as_slice()).unwrap(), tr);
    }
}
