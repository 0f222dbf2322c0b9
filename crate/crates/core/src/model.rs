//! Strict-feedback plants with time-varying parameters.
//!
//! The plant is
//!
//! ```text
//! ẋ_i = φ_i(x̄_i)ᵀ θ(t) + x_{i+1},   i < n
//! ẋ_n = φ_n(x̄_n)ᵀ θ(t) + b(t) u
//! ```
//!
//! `θ` and `b` are piecewise continuous. Signals are evaluated as
//! `f(t, branch)`: `branch` selects the smooth piece and `t` is where that
//! piece is evaluated. Plain evaluation uses `branch = t` and returns the
//! right limit at a jump; the integrator passes the midpoint of each step so
//! that no stage ever reads across a jump.

use std::fmt;
use std::sync::Arc;

use crate::error::{ensure_finite, Error, Result};
use crate::jet::{Jet, Scalar};

/// A regressor written once over [`Scalar`] so it can be evaluated on plain
/// numbers and on jets.
pub trait RegressorFn: Send + Sync {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

/// Object-safe view of a regressor `φ_i : Rⁱ → R^q`.
pub trait Regressor: Send + Sync {
    fn eval_f64(&self, x: &[f64]) -> Vec<f64>;
    fn eval_jet(&self, x: &[Jet]) -> Vec<Jet>;
}

impl<T: RegressorFn> Regressor for T {
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
    }
    fn eval_jet(&self, x: &[Jet]) -> Vec<Jet> {
        self.eval(x)
    }
}

/// `coefficient · Π x_j^{powers[j]}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coefficient: f64, powers: &[u32]) -> Self {
        Monomial {
            coefficient,
            powers: powers.to_vec(),
        }
    }
}

/// A vector of multivariate polynomials, one per output component.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Polynomial {
    pub components: Vec<Vec<Monomial>>,
}

impl Polynomial {
    pub fn new(components: Vec<Vec<Monomial>>) -> Self {
        Polynomial { components }
    }

    /// The zero map into `R^q`.
    pub fn zero(q: usize) -> Self {
        Polynomial {
            components: vec![Vec::new(); q],
        }
    }

    pub fn has_constant_term(&self) -> bool {
        self.components.iter().flatten().any(|m| {
            m.coefficient != 0.0 && m.powers.iter().all(|&p| p == 0)
        })
    }
}

impl RegressorFn for Polynomial {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let zero = x[0].lift(0.0);
        self.components
            .iter()
            .map(|terms| {
                let mut acc = zero.clone();
                for m in terms {
                    let mut term: Option<S> = None;
                    for (xj, &p) in x.iter().zip(&m.powers) {
                        if p == 0 {
                            continue;
                        }
                        let f = if p == 1 { xj.clone() } else { xj.powi(p as i32) };
                        term = Some(match term {
                            None => f,
                            Some(t) => t * f,
                        });
                    }
                    acc = match term {
                        None => acc + m.coefficient,
                        Some(t) => acc + t * m.coefficient,
                    };
                }
                acc
            })
            .collect()
    }
}

/// Adapter for regressors given as a closure over `f64` plus a closure over
/// jets.
pub struct FnRegressor<F, G> {
    pub plain: F,
    pub jet: G,
}

impl<F, G> Regressor for FnRegressor<F, G>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    G: Fn(&[Jet]) -> Vec<Jet> + Send + Sync,
{
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        (self.plain)(x)
    }
    fn eval_jet(&self, x: &[Jet]) -> Vec<Jet> {
        (self.jet)(x)
    }
}

/// A piecewise continuous signal `f(t, branch)`.
pub struct Signal<T> {
    f: Arc<dyn Fn(f64, f64) -> T + Send + Sync>,
}

impl<T> Clone for Signal<T> {
    fn clone(&self) -> Self {
        Signal {
            f: Arc::clone(&self.f),
        }
    }
}

impl<T> fmt::Debug for Signal<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Signal(..)")
    }
}

impl<T: Clone + Send + Sync + 'static> Signal<T> {
    pub fn new(f: impl Fn(f64, f64) -> T + Send + Sync + 'static) -> Self {
        Signal { f: Arc::new(f) }
    }

    /// A signal without jumps.
    pub fn smooth(f: impl Fn(f64) -> T + Send + Sync + 'static) -> Self {
        Signal::new(move |t, _| f(t))
    }

    pub fn constant(value: T) -> Self {
        Signal::new(move |_, _| value.clone())
    }

    #[inline]
    pub fn at(&self, t: f64) -> T {
        (self.f)(t, t)
    }

    #[inline]
    pub fn on_branch(&self, t: f64, branch: f64) -> T {
        (self.f)(t, branch)
    }
}

/// Right-continuous `sgn(sin(ω t))`.
///
/// At a zero of `sin(ω t)` this returns the sign on the interval to the
/// right, so `sgn_sin(ω, 0.0) == 1.0`.
pub fn sgn_sin(omega: f64, t: f64) -> f64 {
    let q = omega * t / std::f64::consts::PI;
    let k = q.round();
    let piece = if (q - k).abs() <= 1e-9 * q.abs().max(1.0) {
        k
    } else {
        q.floor()
    };
    if piece.rem_euclid(2.0) == 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Times at which `θ` or `b` may jump.
#[derive(Debug, Clone, PartialEq)]
pub enum Breakpoints {
    None,
    /// `phase + k · period` for `k ≥ 0`.
    Periodic { period: f64, phase: f64 },
    List(Vec<f64>),
}

impl Breakpoints {
    /// Breakpoints strictly inside `(0, horizon)`, sorted.
    pub fn within(&self, horizon: f64) -> Vec<f64> {
        match self {
            Breakpoints::None => Vec::new(),
            Breakpoints::Periodic { period, phase } => {
                let mut out = Vec::new();
                let mut k = 0u64;
                loop {
                    let t = phase + k as f64 * period;
                    if t >= horizon {
                        break;
                    }
                    if t > 0.0 {
                        out.push(t);
                    }
                    k += 1;
                }
                out
            }
            Breakpoints::List(v) => {
                let mut out: Vec<f64> = v.iter().copied().filter(|&t| t > 0.0 && t < horizon).collect();
                out.sort_by(f64::total_cmp);
                out.dedup();
                out
            }
        }
    }
}

/// A strict-feedback plant description.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n: usize,
    q: usize,
    regressors: Vec<Arc<dyn Regressor>>,
    theta: Signal<Vec<f64>>,
    b: Signal<f64>,
    breakpoints: Breakpoints,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("q", &self.q)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        q: usize,
        regressors: Vec<Arc<dyn Regressor>>,
        theta: Signal<Vec<f64>>,
        b: Signal<f64>,
        breakpoints: Breakpoints,
    ) -> Result<Self> {
        if n == 0 || q == 0 {
            return Err(Error::Config("state and parameter dimensions must be at least 1".into()));
        }
        if regressors.len() != n {
            return Err(Error::DimensionMismatch {
                what: "regressor list",
                expected: n,
                got: regressors.len(),
            });
        }
        let model = SystemModel {
            name: name.into(),
            n,
            q,
            regressors,
            theta,
            b,
            breakpoints,
        };
        let theta0 = model.theta.at(0.0);
        if theta0.len() != q {
            return Err(Error::DimensionMismatch {
                what: "theta signal",
                expected: q,
                got: theta0.len(),
            });
        }
        for i in 1..=n {
            let out = model.regressors[i - 1].eval_f64(&vec![0.0; i]);
            if out.len() != q {
                return Err(Error::DimensionMismatch {
                    what: "regressor output",
                    expected: q,
                    got: out.len(),
                });
            }
        }
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn breakpoints(&self) -> &Breakpoints {
        &self.breakpoints
    }

    /// `φ_i(x̄_i)` for `1 ≤ i ≤ n`.
    pub fn eval_regressor(&self, i: usize, x_prefix: &[f64]) -> Result<Vec<f64>> {
        if i == 0 || i > self.n {
            return Err(Error::IndexOutOfRange { index: i, n: self.n });
        }
        if x_prefix.len() != i {
            return Err(Error::DimensionMismatch {
                what: "state prefix",
                expected: i,
                got: x_prefix.len(),
            });
        }
        ensure_finite("regressor input", x_prefix)?;
        Ok(self.regressors[i - 1].eval_f64(x_prefix))
    }

    /// `φ_i` on jets; `i` is 1-based and `x_prefix.len() == i`.
    pub fn eval_regressor_jet(&self, i: usize, x_prefix: &[Jet]) -> Vec<Jet> {
        debug_assert_eq!(x_prefix.len(), i);
        self.regressors[i - 1].eval_jet(x_prefix)
    }

    /// `(θ(t), b(t))`, right limits at jumps.
    pub fn eval_parameters(&self, t: f64) -> Result<(Vec<f64>, f64)> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::NegativeTime(t));
        }
        Ok((self.theta.at(t), self.b.at(t)))
    }

    /// Parameters on the smooth piece containing `branch`, evaluated at `t`.
    pub fn parameters_on_branch(&self, t: f64, branch: f64) -> (Vec<f64>, f64) {
        (self.theta.on_branch(t, branch), self.b.on_branch(t, branch))
    }

    /// Open-loop vector field `ẋ` for input `u`.
    pub fn plant_rhs(&self, t: f64, branch: f64, x: &[f64], u: f64, dx: &mut [f64]) {
        let (theta, b) = self.parameters_on_branch(t, branch);
        for i in 0..self.n {
            let phi = self.regressors[i].eval_f64(&x[..=i]);
            let drift: f64 = phi.iter().zip(&theta).map(|(p, th)| p * th).sum();
            dx[i] = drift + if i + 1 < self.n { x[i + 1] } else { b * u };
        }
    }

    /// Checks the structural assumptions over a finite probe grid.
    pub fn validate(&self, grid: &ProbeGrid) -> ValidationReport {
        let mut checks = Vec::new();

        let mut worst = 0.0f64;
        let mut worst_i = 0;
        for i in 1..=self.n {
            let phi0 = self.regressors[i - 1].eval_f64(&vec![0.0; i]);
            let norm = phi0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > worst || !norm.is_finite() {
                worst = norm;
                worst_i = i;
            }
        }
        checks.push(Check {
            name: "regressors vanish at the origin".into(),
            passed: worst == 0.0,
            detail: if worst == 0.0 {
                format!("‖φ_i(0)‖ = 0 for all {} layers", self.n)
            } else {
                format!("‖φ_{worst_i}(0)‖ = {worst:e}")
            },
        });

        let times = grid.times();
        if times.is_empty() {
            checks.push(Check {
                name: "probe grid".into(),
                passed: false,
                detail: "empty probe grid".into(),
            });
            return ValidationReport { checks };
        }

        let bs: Vec<f64> = times.iter().map(|&t| self.b.at(t)).collect();
        let sign0 = bs[0].signum();
        let min_abs = bs.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let sign_ok = bs.iter().all(|&v| v != 0.0 && v.is_finite() && v.signum() == sign0);
        checks.push(Check {
            name: "control coefficient has constant sign".into(),
            passed: sign_ok,
            detail: format!(
                "sign {}, min |b| = {min_abs:e} over {} probes",
                if sign0 > 0.0 { "+" } else { "-" },
                times.len()
            ),
        });

        let mut lo = vec![f64::INFINITY; self.q];
        let mut hi = vec![f64::NEG_INFINITY; self.q];
        let mut finite = true;
        for &t in &times {
            let th = self.theta.at(t);
            for (k, v) in th.iter().enumerate() {
                finite &= v.is_finite();
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        checks.push(Check {
            name: "parameters stay in a bounded box".into(),
            passed: finite,
            detail: format!("box {:?}", lo.iter().zip(&hi).collect::<Vec<_>>()),
        });

        ValidationReport { checks }
    }
}

/// Uniform probe times `t_start, t_start + step, ..., t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub step: f64,
}

impl ProbeGrid {
    pub fn new(t_start: f64, t_end: f64, step: f64) -> Self {
        ProbeGrid { t_start, t_end, step }
    }

    pub fn times(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.t_end < self.t_start {
            return Vec::new();
        }
        let count = ((self.t_end - self.t_start) / self.step + 1e-9).floor() as usize;
        (0..=count).map(|k| self.t_start + k as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, prefix: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name.starts_with(prefix))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Known bound on the parameter deviation, with optional test-only nominal
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBounds {
    pub delta_theta: f64,
    pub ell_theta_hint: Option<Vec<f64>>,
    pub ell_b_hint: Option<f64>,
}

impl ParameterBounds {
    /// `sup_t ‖θ(t) − ℓ_θ‖ ≤ δ` over the grid. Uses the hint for `ℓ_θ` when
    /// given, the grid mean otherwise.
    pub fn check(&self, model: &SystemModel, grid: &ProbeGrid) -> Check {
        let times = grid.times();
        let center = match &self.ell_theta_hint {
            Some(c) => c.clone(),
            None => mean_theta(model, &times),
        };
        let sup = times
            .iter()
            .map(|&t| {
                model
                    .theta
                    .at(t)
                    .iter()
                    .zip(&center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        Check {
            name: "deviation radius covers the parameter signal".into(),
            passed: sup <= self.delta_theta,
            detail: format!("sup ‖Δθ‖ = {sup:.6}, δ = {}", self.delta_theta),
        }
    }
}

/// Average of `θ(t)` over the given times.
pub fn mean_theta(model: &SystemModel, times: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; model.q];
    for &t in times {
        for (a, v) in acc.iter_mut().zip(model.theta.at(t)) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / times.len().max(1) as f64).collect()
}

/// Average of `b(t)` over the given times.
pub fn mean_b(model: &SystemModel, times: &[f64]) -> f64 {
    times.iter().map(|&t| model.b.at(t)).sum::<f64>() / times.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(phi: Polynomial, b: Signal<f64>) -> SystemModel {
        SystemModel::new(
            "test",
            1,
            1,
            vec![Arc::new(phi)],
            Signal::constant(vec![1.0]),
            b,
            Breakpoints::None,
        )
        .unwrap()
    }

    #[test]
    fn sgn_sin_is_right_continuous() {
        use std::f64::consts::PI;
        assert_eq!(sgn_sin(3.0, 0.0), 1.0);
        assert_eq!(sgn_sin(3.0, PI / 3.0), -1.0);
        assert_eq!(sgn_sin(3.0, 2.0 * PI / 3.0), 1.0);
        assert_eq!(sgn_sin(3.0, 0.1), 1.0);
        assert_eq!(sgn_sin(3.0, 1.1), -1.0);
        assert_eq!(sgn_sin(3.0, PI / 3.0 - 1e-6), 1.0);
    }

    #[test]
    fn periodic_breakpoints_inside_horizon() {
        use std::f64::consts::PI;
        let bp = Breakpoints::Periodic {
            period: PI / 3.0,
            phase: 0.0,
        };
        let v = bp.within(2.0);
        assert_eq!(v.len(), 1);
        assert!((v[0] - PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn polynomial_evaluates_on_jets_and_numbers() {
        let p = Polynomial::new(vec![
            vec![Monomial::new(2.0, &[1, 1])],
            vec![Monomial::new(1.0, &[0, 2]), Monomial::new(-1.0, &[1, 0])],
        ]);
        assert_eq!(p.eval(&[2.0, 3.0]), vec![12.0, 7.0]);
        let (v, g) = crate::jet::propagate_sensitivities(|x| p.eval(x)[1].clone(), &[2.0, 3.0]);
        assert_eq!(v, 7.0);
        assert_eq!(g, vec![-1.0, 6.0]);
    }

    #[test]
    fn index_and_input_errors() {
        let m = scalar_model(Polynomial::new(vec![vec![Monomial::new(1.0, &[2])]]), Signal::constant(1.0));
        assert!(matches!(m.eval_regressor(0, &[]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(m.eval_regressor(2, &[1.0, 1.0]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(m.eval_regressor(1, &[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(m.eval_regressor(1, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.eval_parameters(-1.0), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn sign_change_fails_validation() {
        let m = scalar_model(
            Polynomial::new(vec![vec![Monomial::new(1.0, &[2])]]),
            Signal::smooth(f64::sin),
        );
        let r = m.validate(&ProbeGrid::new(0.0, 20.0, 0.01));
        assert!(!r.check("control coefficient").unwrap().passed);
        assert!(r.check("regressors vanish").unwrap().passed);
    }

    #[test]
    fn offset_regressor_fails_origin_check() {
        let m = scalar_model(
            Polynomial::new(vec![vec![Monomial::new(1.0, &[1]), Monomial::new(1.0, &[0])]]),
            Signal::constant(1.0),
        );
        let r = m.validate(&ProbeGrid::new(0.0, 1.0, 0.1));
        assert!(!r.check("regressors vanish").unwrap().passed);
        assert!(!r.all_passed());
    }

    #[test]
    fn probe_grid_includes_end() {
        let g = ProbeGrid::new(0.0, 20.0, 0.01);
        let t = g.times();
        assert_eq!(t.len(), 2001);
        assert!((t[2000] - 20.0).abs() < 1e-9);
    }
}
