//! Scalar designs for `ẋ = b u + a x²` with the scaled state `s = e^{λt} x`.
//!
//! * A: constant `a`, known `b = 1`.
//! * B: time-varying `a(t)` with `|a(t) − ℓ_a| ≤ δ`, known `b = 1`.
//! * C: time-varying `a(t)` and `b(t)` of unknown sign, Nussbaum gain.

use crate::error::{ensure_finite, Error, Result};
use crate::nussbaum::NussbaumSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarState {
    pub t: f64,
    pub x: f64,
    pub a_hat: f64,
    /// Nussbaum argument, design C only.
    pub xi: f64,
}

impl ScalarState {
    pub fn mu(&self, lambda: f64) -> f64 {
        (lambda * self.t).exp()
    }

    pub fn s(&self, lambda: f64) -> f64 {
        self.mu(lambda) * self.x
    }
}

#[derive(Debug, Clone)]
pub struct ScalarGains {
    pub k: f64,
    pub lambda: f64,
    pub gamma_a: f64,
    pub delta_a: f64,
    pub nussbaum: NussbaumSpec,
}

impl Default for ScalarGains {
    fn default() -> Self {
        ScalarGains {
            k: 1.0,
            lambda: 0.6,
            gamma_a: 1.0,
            delta_a: 0.0,
            nussbaum: NussbaumSpec::default(),
        }
    }
}

impl ScalarGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k = {} must be positive", self.k)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be non-negative", self.lambda)));
        }
        if !(self.gamma_a > 0.0 && self.gamma_a.is_finite()) {
            return Err(Error::Config(format!("gamma_a = {} must be positive", self.gamma_a)));
        }
        if !(self.delta_a >= 0.0 && self.delta_a.is_finite()) {
            return Err(Error::Config(format!("delta_a = {} must be non-negative", self.delta_a)));
        }
        Ok(())
    }
}

/// Which scalar design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScalarDesign {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarOutput {
    pub u: f64,
    pub a_hat_dot: f64,
    /// Zero for designs A and B.
    pub xi_dot: f64,
}

fn check_state(state: &ScalarState) -> Result<()> {
    ensure_finite("scalar state", &[state.t, state.x, state.a_hat, state.xi])
}

fn update(state: &ScalarState, gains: &ScalarGains) -> Result<f64> {
    let mu = state.mu(gains.lambda);
    let s = mu * state.x;
    let v = gains.gamma_a * mu * s * state.x * state.x;
    ensure_finite("adaptive update", &[v])?;
    Ok(v)
}

/// `u = −(k+λ)x − â x²`, `â̇ = γ μ s x²`.
pub fn scalar_a_law(state: &ScalarState, gains: &ScalarGains) -> Result<ScalarOutput> {
    check_state(state)?;
    let x = state.x;
    let u = -(gains.k + gains.lambda) * x - state.a_hat * x * x;
    ensure_finite("control", &[u])?;
    Ok(ScalarOutput {
        u,
        a_hat_dot: update(state, gains)?,
        xi_dot: 0.0,
    })
}

/// Design A plus the damping `−(δ/2)x³ − (δ/2)x`.
pub fn scalar_b_law(state: &ScalarState, gains: &ScalarGains) -> Result<ScalarOutput> {
    check_state(state)?;
    let x = state.x;
    let half = 0.5 * gains.delta_a;
    let u = -(gains.k + gains.lambda) * x - state.a_hat * x * x - half * x * x * x - half * x;
    ensure_finite("control", &[u])?;
    Ok(ScalarOutput {
        u,
        a_hat_dot: update(state, gains)?,
        xi_dot: 0.0,
    })
}

/// `κ(â, x) = ½((âx)² + 1) + (δ/2)(x² + 1)`.
pub fn scalar_kappa(a_hat: f64, x: f64, delta_a: f64) -> f64 {
    0.5 * ((a_hat * x).powi(2) + 1.0) + 0.5 * delta_a * (x * x + 1.0)
}

/// `ū = (k+λ)x + κx`, `u = N(ξ)ū`, `ξ̇ = μ s ū`, `â̇ = γ μ s x²`.
pub fn scalar_c_law(state: &ScalarState, gains: &ScalarGains) -> Result<ScalarOutput> {
    check_state(state)?;
    let n = gains.nussbaum.eval(state.xi)?;
    let x = state.x;
    let kappa = scalar_kappa(state.a_hat, x, gains.delta_a);
    let ubar = (gains.k + gains.lambda) * x + kappa * x;
    let mu = state.mu(gains.lambda);
    let s = mu * x;
    let xi_dot = mu * s * ubar;
    let u = n * ubar;
    ensure_finite("control", &[u, xi_dot])?;
    Ok(ScalarOutput {
        u,
        a_hat_dot: update(state, gains)?,
        xi_dot,
    })
}

pub fn scalar_law(design: ScalarDesign, state: &ScalarState, gains: &ScalarGains) -> Result<ScalarOutput> {
    match design {
        ScalarDesign::A => scalar_a_law(state, gains),
        ScalarDesign::B => scalar_b_law(state, gains),
        ScalarDesign::C => scalar_c_law(state, gains),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(t: f64, x: f64, a_hat: f64, xi: f64) -> ScalarState {
        ScalarState { t, x, a_hat, xi }
    }

    #[test]
    fn design_a_examples() {
        let g = ScalarGains {
            k: 1.0,
            lambda: 0.6,
            ..Default::default()
        };
        let o = scalar_a_law(&st(0.0, 1.0, 2.0, 0.0), &g).unwrap();
        assert!((o.u + 3.6).abs() < 1e-15);
        let o = scalar_a_law(&st(3.0, 0.0, 5.0, 0.0), &g).unwrap();
        assert_eq!((o.u, o.a_hat_dot), (0.0, 0.0));
    }

    #[test]
    fn design_a_update_forms_agree() {
        let g = ScalarGains {
            lambda: 0.5,
            gamma_a: 1.0,
            ..Default::default()
        };
        let s = st(1.0, 0.5, 0.0, 0.0);
        let o = scalar_a_law(&s, &g).unwrap();
        let sv = s.s(0.5);
        let alt = g.gamma_a * s.x * sv * sv;
        let lit = 1f64.exp() * 0.125;
        assert!((o.a_hat_dot - alt).abs() < 1e-12);
        assert!((o.a_hat_dot - lit).abs() < 1e-12);
    }

    #[test]
    fn design_b_examples() {
        let g = ScalarGains {
            k: 1.0,
            lambda: 0.0,
            delta_a: 2.0,
            ..Default::default()
        };
        assert_eq!(scalar_b_law(&st(0.0, 1.0, 0.0, 0.0), &g).unwrap().u, -3.0);
        let g0 = ScalarGains {
            delta_a: 0.0,
            ..Default::default()
        };
        let s = st(0.7, -1.3, 0.4, 0.0);
        assert_eq!(scalar_b_law(&s, &g0).unwrap(), scalar_a_law(&s, &g0).unwrap());
    }

    #[test]
    fn design_c_example() {
        let g = ScalarGains {
            k: 1.0,
            lambda: 0.0,
            delta_a: 1.0,
            ..Default::default()
        };
        assert_eq!(scalar_kappa(1.0, 1.0, 1.0), 2.0);
        let o = scalar_c_law(&st(0.0, 1.0, 1.0, 0.0), &g).unwrap();
        assert_eq!(o.u, 0.0);
        // ξ̇ = μ s ū with ū = 3
        assert_eq!(o.xi_dot, 3.0);
        let o = scalar_c_law(&st(0.0, 0.0, 1.0, 2.0), &g).unwrap();
        assert_eq!((o.u, o.xi_dot), (0.0, 0.0));
    }

    #[test]
    fn design_c_with_constant_minus_one_gain() {
        let g = ScalarGains {
            k: 1.3,
            lambda: 0.4,
            delta_a: 0.0,
            nussbaum: NussbaumSpec::user("minus-one", 10.0, |_| -1.0),
            ..Default::default()
        };
        for &(x, a) in &[(0.3, 1.2), (-1.7, -0.4), (2.0, 0.0)] {
            let s = st(0.2, x, a, 1.0);
            let uc = scalar_c_law(&s, &g).unwrap().u;
            let ua = scalar_a_law(&s, &g).unwrap().u;
            let want = ua - 0.5 * x * (a * x - 1.0).powi(2);
            assert!((uc - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn overflow_guard_and_bad_input() {
        let g = ScalarGains::default();
        assert!(matches!(scalar_c_law(&st(0.0, 1.0, 0.0, 7.0), &g), Err(Error::NussbaumOverflow { .. })));
        assert!(matches!(scalar_a_law(&st(0.0, f64::NAN, 0.0, 0.0), &g), Err(Error::NonFinite(_))));
        assert!(ScalarGains { k: 0.0, ..Default::default() }.validate().is_err());
    }
}
