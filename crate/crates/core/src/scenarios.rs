//! Ready-made experiments: the wing-rock benchmark, a randomized third-order
//! plant and the scalar examples.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backstepping::GainConfig;
use crate::error::{Error, Result};
use crate::model::{mean_b, mean_theta, sgn_sin, Breakpoints, Monomial, Polynomial, ProbeGrid, Signal, SystemModel};
use crate::nussbaum::NussbaumSpec;
use crate::scalar::{ScalarDesign, ScalarGains};
use crate::sim::{ControllerKind, InitialState, LyapunovHints, Scenario};

/// Constants of the wing-rock study.
pub mod wing_rock {
    pub const THETA: [f64; 2] = [-26.6667, 0.67485];
    pub const THETA_SWITCH_FRACTION: f64 = 0.02;
    pub const SWITCH_FREQUENCY: f64 = 3.0;
    pub const B_NOMINAL: f64 = -2.0;
    pub const B_SWITCH_AMPLITUDE: f64 = 0.2;
    pub const DELTA_THETA: f64 = 0.6;
    pub const K: [f64; 2] = [1.0, 1.0];
    pub const THETA_HAT0: [f64; 2] = [0.0, 0.0];
    pub const LAMBDA: f64 = 0.6;
    pub const GAMMA: f64 = 0.001;
    pub const X0: [f64; 2] = [-1.0, 2.5];
    pub const RHO_HAT0: f64 = -0.3;
    pub const XI0: f64 = 0.0;

    pub const STEP: f64 = 1e-4;
    pub const HORIZON: f64 = 15.0;
}

/// `ẋ_1 = x_2`, `ẋ_2 = θ_1 x_1 + θ_2 x_2 + b(t) u` with
/// `θ_i(t) = θ_i (1 + 0.02 sgn(sin 3t))` and
/// `b(t) = −2 + 0.2 sgn(sin 3t) cos t`.
pub fn wing_rock_model() -> SystemModel {
    use wing_rock::*;
    let theta = Signal::new(|_t, br| {
        let sw = 1.0 + THETA_SWITCH_FRACTION * sgn_sin(SWITCH_FREQUENCY, br);
        vec![THETA[0] * sw, THETA[1] * sw]
    });
    let b = Signal::new(|t: f64, br| B_NOMINAL + B_SWITCH_AMPLITUDE * sgn_sin(SWITCH_FREQUENCY, br) * t.cos());
    SystemModel::new(
        "wing-rock",
        2,
        2,
        vec![
            Arc::new(Polynomial::zero(2)),
            Arc::new(Polynomial::new(vec![
                vec![Monomial::new(1.0, &[1, 0])],
                vec![Monomial::new(1.0, &[0, 1])],
            ])),
        ],
        theta,
        b,
        Breakpoints::Periodic {
            period: PI / SWITCH_FREQUENCY,
            phase: 0.0,
        },
    )
    .expect("wing-rock model is well formed")
}

/// Nominal values averaged over `[0, horizon]`, for the Lyapunov monitor.
pub fn averaged_hints(model: &SystemModel, horizon: f64) -> LyapunovHints {
    let times = ProbeGrid::new(0.0, horizon, 1e-3).times();
    LyapunovHints {
        ell_theta: mean_theta(model, &times),
        ell_b: mean_b(model, &times),
    }
}

/// The wing-rock study for `theorem1`, `theorem2` or `baseline-lambda0`.
pub fn build_wing_rock(variant: ControllerKind) -> Result<Scenario> {
    use wing_rock::*;
    if !matches!(
        variant,
        ControllerKind::Theorem1 | ControllerKind::Theorem2 | ControllerKind::BaselineLambda0
    ) {
        return Err(Error::Unknown {
            kind: "wing-rock variant",
            name: variant.name().into(),
        });
    }
    let model = wing_rock_model();
    let mut s = Scenario::new(
        format!("wing-rock-{}", variant.name()),
        model,
        variant,
        InitialState {
            x: X0.to_vec(),
            theta_hat: THETA_HAT0.to_vec(),
            rho_hat: RHO_HAT0,
            xi: XI0,
        },
    );
    s.gains = GainConfig {
        k: K.to_vec(),
        lambda: if variant == ControllerKind::BaselineLambda0 { 0.0 } else { LAMBDA },
        delta_theta: DELTA_THETA,
        gamma: DMatrix::identity(2, 2) * GAMMA,
        sign_b: B_NOMINAL.signum(),
        nussbaum: NussbaumSpec::sin_exp_square(),
        ..GainConfig::new(2, 2)
    };
    s.step = STEP;
    s.horizon = HORIZON;
    if variant != ControllerKind::Theorem2 {
        s.hints = Some(averaged_hints(&s.model, HORIZON));
    }
    Ok(s)
}

/// Third-order plant with
/// `φ_1 = [x_1², 0]`, `φ_2 = [x_1 x_2, x_2²]`, `φ_3 = [x_3², x_1 x_3]`,
/// switching parameters and a negative control coefficient, all drawn from
/// `seed`.
pub fn build_synthetic(seed: u64, variant: ControllerKind) -> Result<Scenario> {
    if !matches!(variant, ControllerKind::Theorem1 | ControllerKind::Theorem2) {
        return Err(Error::Unknown {
            kind: "synthetic variant",
            name: variant.name().into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nominal: [f64; 2] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let frac: f64 = rng.gen_range(0.05..0.2);
    let omega: f64 = rng.gen_range(1.0..3.0);
    let b0: f64 = rng.gen_range(1.0..2.0);
    let b_amp: f64 = rng.gen_range(0.0..0.3) * b0;
    let dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let radius: f64 = rng.gen_range(0.3..0.8);

    let theta = Signal::new(move |_t, br| {
        let sw = 1.0 + frac * sgn_sin(omega, br);
        vec![nominal[0] * sw, nominal[1] * sw]
    });
    let b = Signal::new(move |t: f64, br| -(b0 + b_amp * sgn_sin(omega, br) * t.cos()));
    let m = |c: f64, p: &[u32]| Monomial::new(c, p);
    let model = SystemModel::new(
        format!("synthetic-{seed}"),
        3,
        2,
        vec![
            Arc::new(Polynomial::new(vec![vec![m(1.0, &[2])], vec![]])),
            Arc::new(Polynomial::new(vec![vec![m(1.0, &[1, 1])], vec![m(1.0, &[0, 2])]])),
            Arc::new(Polynomial::new(vec![vec![m(1.0, &[0, 0, 2])], vec![m(1.0, &[1, 0, 1])]])),
        ],
        theta,
        b,
        Breakpoints::Periodic {
            period: PI / omega,
            phase: 0.0,
        },
    )?;

    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let x0: Vec<f64> = dir.iter().map(|v| radius * v / dn).collect();
    let deviation = frac * (nominal[0].powi(2) + nominal[1].powi(2)).sqrt();
    let mut s = Scenario::new(
        format!("synthetic-{seed}-{}", variant.name()),
        model,
        variant,
        InitialState {
            x: x0,
            theta_hat: vec![0.0, 0.0],
            rho_hat: -0.5,
            xi: 0.0,
        },
    );
    s.gains = GainConfig {
        k: vec![1.0; 3],
        lambda: 0.3,
        delta_theta: 1.1 * deviation,
        gamma: DMatrix::identity(2, 2) * 0.01,
        sign_b: -1.0,
        quadrature_nodes: 12,
        ..GainConfig::new(3, 2)
    };
    s.step = 2e-3;
    s.horizon = 10.0;
    if variant == ControllerKind::Theorem1 {
        s.hints = Some(LyapunovHints {
            ell_theta: nominal.to_vec(),
            ell_b: -b0,
        });
    }
    Ok(s)
}

/// `ẋ = b(t) u + a(t) x²`.
pub fn scalar_model(a: Signal<f64>, b: Signal<f64>, breakpoints: Breakpoints) -> SystemModel {
    let theta = Signal::new(move |t, br| vec![a.on_branch(t, br)]);
    SystemModel::new(
        "scalar",
        1,
        1,
        vec![Arc::new(Polynomial::new(vec![vec![Monomial::new(1.0, &[2])]]))],
        theta,
        b,
        breakpoints,
    )
    .expect("scalar model is well formed")
}

/// Parameters of one scalar closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCase {
    /// Constant part of `a(t)`.
    pub a: f64,
    /// Amplitude of the switching part of `a(t)` (designs B and C).
    pub a_switch: f64,
    /// Control coefficient (design C; A and B use 1).
    pub b: f64,
    pub x0: f64,
}

/// Scalar scenario for one design; `a(t) = a + a_switch sgn(sin 2t)`.
pub fn build_scalar(design: ScalarDesign, case: ScalarCase) -> Scenario {
    let omega = 2.0;
    let (a, sw) = (case.a, if design == ScalarDesign::A { 0.0 } else { case.a_switch });
    let b = if design == ScalarDesign::C { case.b } else { 1.0 };
    let model = scalar_model(
        Signal::new(move |_t, br| a + sw * sgn_sin(omega, br)),
        Signal::constant(b),
        if sw == 0.0 {
            Breakpoints::None
        } else {
            Breakpoints::Periodic {
                period: PI / omega,
                phase: 0.0,
            }
        },
    );
    let kind = match design {
        ScalarDesign::A => ControllerKind::ScalarA,
        ScalarDesign::B => ControllerKind::ScalarB,
        ScalarDesign::C => ControllerKind::ScalarC,
    };
    let mut s = Scenario::new(
        kind.name().to_string(),
        model,
        kind,
        InitialState {
            x: vec![case.x0],
            theta_hat: vec![0.0],
            rho_hat: 0.0,
            xi: 0.0,
        },
    );
    s.scalar_gains = ScalarGains {
        k: 1.0,
        lambda: 0.6,
        gamma_a: 1.0,
        delta_a: if design == ScalarDesign::A { 0.0 } else { case.a_switch.abs() },
        nussbaum: NussbaumSpec::sin_exp_square(),
    };
    s.horizon = 20.0;
    s.step = 1e-3;
    if design == ScalarDesign::C {
        s.local_tolerance = Some(1e-10);
    }
    s
}

/// Names accepted by [`build_named`].
pub const NAMES: [&str; 8] = [
    "wing-rock-theorem1",
    "wing-rock-theorem2",
    "wing-rock-baseline-lambda0",
    "synthetic-theorem1",
    "synthetic-theorem2",
    "scalar-A",
    "scalar-B",
    "scalar-C",
];

/// Builds a scenario by name. Synthetic scenarios use seed 0.
pub fn build_named(name: &str) -> Result<Scenario> {
    let default_case = ScalarCase {
        a: 2.0,
        a_switch: 0.5,
        b: -1.5,
        x0: 1.5,
    };
    match name {
        "wing-rock-theorem1" => build_wing_rock(ControllerKind::Theorem1),
        "wing-rock-theorem2" => build_wing_rock(ControllerKind::Theorem2),
        "wing-rock-baseline-lambda0" => build_wing_rock(ControllerKind::BaselineLambda0),
        "synthetic-theorem1" => build_synthetic(0, ControllerKind::Theorem1),
        "synthetic-theorem2" => build_synthetic(0, ControllerKind::Theorem2),
        "scalar-A" => Ok(build_scalar(ScalarDesign::A, default_case)),
        "scalar-B" => Ok(build_scalar(ScalarDesign::B, default_case)),
        "scalar-C" => Ok(build_scalar(ScalarDesign::C, default_case)),
        _ => Err(Error::Unknown {
            kind: "scenario",
            name: name.into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wing_rock_constants_match_table() {
        let table = include_str!("../data/wing_rock.txt");
        let get = |key: &str| -> f64 {
            table
                .lines()
                .find_map(|l| {
                    let (k, v) = l.split_once('=')?;
                    (k.trim() == key).then(|| v.trim().parse::<f64>().unwrap())
                })
                .unwrap_or_else(|| panic!("{key} missing"))
        };
        let s1 = build_wing_rock(ControllerKind::Theorem1).unwrap();
        let s2 = build_wing_rock(ControllerKind::Theorem2).unwrap();
        assert_eq!(wing_rock::THETA, [get("theta_1"), get("theta_2")]);
        assert_eq!(wing_rock::THETA_SWITCH_FRACTION, get("theta_switch_fraction"));
        assert_eq!(wing_rock::SWITCH_FREQUENCY, get("switch_frequency"));
        assert_eq!(wing_rock::B_NOMINAL, get("b_nominal"));
        assert_eq!(wing_rock::B_SWITCH_AMPLITUDE, get("b_switch_amplitude"));
        assert_eq!(s1.gains.delta_theta, get("delta_theta"));
        assert_eq!(s1.gains.k, vec![get("k_1"), get("k_2")]);
        assert_eq!(s1.initial.theta_hat, vec![get("theta_hat0_1"), get("theta_hat0_2")]);
        assert_eq!(s1.gains.lambda, get("lambda"));
        assert_eq!(s1.gains.gamma, DMatrix::identity(2, 2) * get("gamma"));
        assert_eq!(s1.initial.x, vec![get("x0_1"), get("x0_2")]);
        assert_eq!(s1.initial.rho_hat, get("rho_hat0"));
        assert_eq!(s2.initial.xi, get("xi0"));
    }

    #[test]
    fn wing_rock_signals() {
        let m = wing_rock_model();
        let (th, b) = m.eval_parameters(0.1).unwrap();
        assert!((th[0] + 27.200034).abs() < 1e-9);
        assert!((b - (-2.0 + 0.2 * 0.1f64.cos())).abs() < 1e-15);
        assert!((b + 1.800999).abs() < 1e-6);
        assert_eq!(m.eval_regressor(1, &[-3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.eval_regressor(2, &[-1.0, 2.5]).unwrap(), vec![-1.0, 2.5]);
        assert!(m.validate(&ProbeGrid::new(0.0, 20.0, 0.01)).all_passed());
        assert_eq!(m.eval_parameters(0.37).unwrap(), m.eval_parameters(0.37).unwrap());
    }

    #[test]
    fn variants() {
        let t1 = build_wing_rock(ControllerKind::Theorem1).unwrap();
        let t2 = build_wing_rock(ControllerKind::Theorem2).unwrap();
        let b0 = build_wing_rock(ControllerKind::BaselineLambda0).unwrap();
        assert_eq!(t2.initial.xi, 0.0);
        assert!(matches!(t2.gains.nussbaum.kind, crate::nussbaum::NussbaumKind::SinExpSquare));
        assert_eq!(t1.initial.rho_hat, -0.3);
        assert_eq!(b0.gains.lambda, 0.0);
        assert_eq!(b0.gains.k, t1.gains.k);
        assert_eq!(b0.initial, t1.initial);
        assert!(build_wing_rock(ControllerKind::ScalarA).is_err());
        for name in NAMES {
            assert!(build_named(name).is_ok(), "{name}");
        }
        assert!(build_named("nope").is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = build_synthetic(0, ControllerKind::Theorem1).unwrap();
        let b = build_synthetic(0, ControllerKind::Theorem1).unwrap();
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.gains.delta_theta, b.gains.delta_theta);
        for t in [0.0, 0.4, 1.7, 3.3] {
            assert_eq!(a.model.eval_parameters(t).unwrap(), b.model.eval_parameters(t).unwrap());
        }
        let r = a.model.validate(&ProbeGrid::new(0.0, 10.0, 0.01));
        assert!(r.all_passed(), "{r}");
        assert!(a.initial.x.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0);
    }
}
