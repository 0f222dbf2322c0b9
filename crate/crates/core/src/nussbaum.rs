//! Enhanced Nussbaum functions: guarded evaluation, a finite-window check of
//! the four growth conditions, and a monitor for the premises of the
//! boundedness lemma used with them.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Which closed form a [`NussbaumSpec`] evaluates.
#[derive(Clone)]
pub enum NussbaumKind {
    /// `sin(ξ) e^{ξ²}`
    SinExpSquare,
    /// `cos(ξ) e^{ξ²}`
    CosExpSquare,
    User {
        name: String,
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for NussbaumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl NussbaumKind {
    pub fn name(&self) -> String {
        match self {
            NussbaumKind::SinExpSquare => "sin-exp-square".into(),
            NussbaumKind::CosExpSquare => "cos-exp-square".into(),
            NussbaumKind::User { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NussbaumSpec {
    pub kind: NussbaumKind,
    /// Arguments above this are rejected instead of evaluated.
    pub xi_max: f64,
}

impl Default for NussbaumSpec {
    fn default() -> Self {
        NussbaumSpec::sin_exp_square()
    }
}

impl NussbaumSpec {
    pub const DEFAULT_XI_MAX: f64 = 6.0;

    pub fn sin_exp_square() -> Self {
        NussbaumSpec {
            kind: NussbaumKind::SinExpSquare,
            xi_max: Self::DEFAULT_XI_MAX,
        }
    }

    pub fn cos_exp_square() -> Self {
        NussbaumSpec {
            kind: NussbaumKind::CosExpSquare,
            xi_max: Self::DEFAULT_XI_MAX,
        }
    }

    pub fn user(name: impl Into<String>, xi_max: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        NussbaumSpec {
            kind: NussbaumKind::User {
                name: name.into(),
                f: Arc::new(f),
            },
            xi_max,
        }
    }

    pub fn with_xi_max(mut self, xi_max: f64) -> Self {
        self.xi_max = xi_max;
        self
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sin-exp-square" => Ok(Self::sin_exp_square()),
            "cos-exp-square" => Ok(Self::cos_exp_square()),
            _ => Err(Error::Unknown {
                kind: "Nussbaum function",
                name: name.into(),
            }),
        }
    }

    /// `N(ξ)` for `0 ≤ ξ ≤ xi_max`.
    pub fn eval(&self, xi: f64) -> Result<f64> {
        if xi.is_nan() || xi < 0.0 {
            return Err(Error::NussbaumDomain(xi));
        }
        if xi > self.xi_max {
            return Err(Error::NussbaumOverflow {
                xi,
                xi_max: self.xi_max,
            });
        }
        Ok(self.eval_unchecked(xi))
    }

    fn eval_unchecked(&self, xi: f64) -> f64 {
        match &self.kind {
            NussbaumKind::SinExpSquare => xi.sin() * (xi * xi).exp(),
            NussbaumKind::CosExpSquare => xi.cos() * (xi * xi).exp(),
            NussbaumKind::User { f, .. } => f(xi),
        }
    }
}

/// `max(0, v)`
pub fn positive_part(v: f64) -> f64 {
    v.max(0.0)
}

/// `max(0, −v)`
pub fn negative_part(v: f64) -> f64 {
    (-v).max(0.0)
}

/// Options for [`verify_enhanced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Every running quantity must exceed this somewhere on the window.
    pub threshold: f64,
    /// Beyond this argument the trapezoid step is refined.
    pub refine_from: f64,
    pub refined_step: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            threshold: 10.0,
            refine_from: 4.0,
            refined_step: 1e-3,
        }
    }
}

/// Running behaviour of one of the four defining quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCheck {
    pub name: &'static str,
    /// Largest value seen on the window; `None` if never evaluable.
    pub running_sup: Option<f64>,
    /// First argument at which the threshold was exceeded.
    pub crossed_at: Option<f64>,
    /// Grid points where the denominator was still zero.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub function: String,
    pub window: (f64, f64),
    pub threshold: f64,
    pub checks: Vec<RatioCheck>,
}

impl RatioReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for RatioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "enhanced Nussbaum check for {} on [{}, {}] (finite-range evidence, threshold {})",
            self.function, self.window.0, self.window.1, self.threshold
        )?;
        for c in &self.checks {
            let sup = c.running_sup.map_or("not evaluable".to_string(), |v| format!("{v:.6e}"));
            let at = c.crossed_at.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                f,
                "  [{}] {:<28} sup = {sup}, crossed at ξ = {at}, skipped {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.skipped
            )?;
        }
        write!(
            f,
            "  overall: {}",
            if self.all_passed() {
                "all four conditions show growth on the window"
            } else {
                "growth not observed on the window"
            }
        )
    }
}

/// Checks the four growth conditions of an enhanced Nussbaum function on the
/// window spanned by `grid`.
///
/// Limits at infinity cannot be observed, so each quantity passes when its
/// running supremum exceeds `threshold` inside the window. Ratios whose
/// denominator integral is still zero are skipped at that point.
pub fn verify_enhanced(spec: &NussbaumSpec, grid: &[f64], opts: &VerifyOptions) -> Result<RatioReport> {
    if grid.len() < 2 {
        return Err(Error::GridTooCoarse("at least two points are required".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 {
        return Err(Error::Config("grid must be non-negative and strictly increasing".into()));
    }
    let span = grid[grid.len() - 1] - grid[0];
    let density = (grid.len() - 1) as f64 / span;
    if density < 10.0 {
        return Err(Error::GridTooCoarse(format!(
            "{density:.2} points per unit argument, need at least 10"
        )));
    }
    if grid[grid.len() - 1] > spec.xi_max {
        return Err(Error::NussbaumOverflow {
            xi: grid[grid.len() - 1],
            xi_max: spec.xi_max,
        });
    }

    let names = ["mean of N+", "mean of N-", "ratio int N+ / int N-", "ratio int N- / int N+"];
    let mut sup: [Option<f64>; 4] = [None; 4];
    let mut crossed: [Option<f64>; 4] = [None; 4];
    let mut skipped = [0usize; 4];

    let mut ip = 0.0;
    let mut im = 0.0;
    let mut record = |k: usize, xi: f64, v: Option<f64>| match v {
        None => skipped[k] += 1,
        Some(v) => {
            sup[k] = Some(sup[k].map_or(v, |s: f64| s.max(v)));
            if crossed[k].is_none() && v > opts.threshold {
                crossed[k] = Some(xi);
            }
        }
    };

    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pieces = if b > opts.refine_from {
            ((b - a) / opts.refined_step).ceil().max(1.0) as usize
        } else {
            1
        };
        let dx = (b - a) / pieces as f64;
        let mut fa = spec.eval(a)?;
        for p in 0..pieces {
            let xr = if p + 1 == pieces { b } else { a + (p + 1) as f64 * dx };
            let fb = spec.eval(xr)?;
            ip += 0.5 * dx * (positive_part(fa) + positive_part(fb));
            im += 0.5 * dx * (negative_part(fa) + negative_part(fb));
            fa = fb;
        }
        let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
        let mean = |v: f64| if b > 0.0 { Some(v / b) } else { None };
        record(0, b, mean(ip));
        record(1, b, mean(im));
        record(2, b, ratio(ip, im));
        record(3, b, ratio(im, ip));
    }

    let checks = (0..4)
        .map(|k| RatioCheck {
            name: names[k],
            running_sup: sup[k],
            crossed_at: crossed[k],
            skipped: skipped[k],
            passed: crossed[k].is_some(),
        })
        .collect();
    Ok(RatioReport {
        function: spec.kind.name(),
        window: (grid[0], grid[grid.len() - 1]),
        threshold: opts.threshold,
        checks,
    })
}

/// Uniform grid on `[0, end]` with `per_unit` points per unit argument.
pub fn uniform_grid(end: f64, per_unit: usize) -> Vec<f64> {
    let count = (end * per_unit as f64).ceil() as usize;
    (0..=count).map(|k| end * k as f64 / count as f64).collect()
}

/// Outcome of [`lemma1_premises`].
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub xi_nondecreasing: bool,
    pub first_xi_decrease: Option<usize>,
    pub b_sign_constant: bool,
    pub b_range: (f64, f64),
    /// Only checked when a `V` series is supplied.
    pub dissipation_holds: Option<bool>,
    pub worst_dissipation_excess: f64,
}

impl Lemma1Report {
    pub fn passed(&self) -> bool {
        self.xi_nondecreasing && self.b_sign_constant && self.dissipation_holds.unwrap_or(true)
    }
}

/// Checks along a recorded trajectory that `ξ` never decreases, that `b`
/// stays in an interval not containing zero and, when `v` is given, that
/// `V(t_{k+1}) − V(t_k) ≤ ∫ (b N(ξ) + 1) dξ` up to `tol · (1 + |V|)`.
///
/// `n_of_xi` holds `N(ξ(t_k))`; the integral is taken by the trapezoid rule
/// in `ξ`.
pub fn lemma1_premises(xi: &[f64], b: &[f64], n_of_xi: &[f64], v: Option<&[f64]>, tol: f64) -> Lemma1Report {
    let first_xi_decrease = xi.windows(2).position(|w| w[1] < w[0]);
    let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut worst = f64::NEG_INFINITY;
    let dissipation_holds = v.map(|v| {
        let mut ok = true;
        for k in 0..v.len().saturating_sub(1) {
            let dxi = xi[k + 1] - xi[k];
            let rhs = 0.5 * dxi * ((b[k] * n_of_xi[k] + 1.0) + (b[k + 1] * n_of_xi[k + 1] + 1.0));
            let excess = v[k + 1] - v[k] - rhs;
            worst = worst.max(excess / (1.0 + v[k].abs()));
            if excess > tol * (1.0 + v[k].abs()) {
                ok = false;
            }
        }
        ok
    });
    Lemma1Report {
        xi_nondecreasing: first_xi_decrease.is_none(),
        first_xi_decrease,
        b_sign_constant: lo * hi > 0.0,
        b_range: (lo, hi),
        dissipation_holds,
        worst_dissipation_excess: if worst.is_finite() { worst } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let n = NussbaumSpec::sin_exp_square();
        assert_eq!(n.eval(0.0).unwrap(), 0.0);
        assert!(n.eval(std::f64::consts::PI).unwrap().abs() < 1e-10 * (std::f64::consts::PI.powi(2)).exp());
        let half_pi = std::f64::consts::FRAC_PI_2;
        // exp(π²/4) = 11.7917613...
        assert!((n.eval(half_pi).unwrap() - 11.791_761_389_234_804).abs() < 1e-9);
    }

    #[test]
    fn guards() {
        let n = NussbaumSpec::sin_exp_square();
        assert!(matches!(n.eval(-0.1), Err(Error::NussbaumDomain(_))));
        assert!(matches!(n.eval(6.01), Err(Error::NussbaumOverflow { .. })));
        assert!(n.eval(6.0).is_ok());
        assert!(matches!(n.eval(f64::NAN), Err(Error::NussbaumDomain(_))));
    }

    #[test]
    fn parts_split_the_function() {
        for &v in &[-3.0, -0.0, 0.0, 2.5] {
            assert_eq!(positive_part(v) - negative_part(v), v);
            assert_eq!(positive_part(v) * negative_part(v), 0.0);
        }
    }

    #[test]
    fn sin_exp_square_passes_on_zero_to_six() {
        let r = verify_enhanced(&NussbaumSpec::sin_exp_square(), &uniform_grid(6.0, 100), &VerifyOptions::default()).unwrap();
        assert!(r.all_passed(), "{r}");
        // ratio int N+/int N- is not evaluable until N first turns negative at π
        assert!(r.checks[2].skipped > 0);
    }

    #[test]
    fn non_nussbaum_functions_fail() {
        let grid = uniform_grid(6.0, 100);
        let one = NussbaumSpec::user("one", 6.0, |_| 1.0);
        let r = verify_enhanced(&one, &grid, &VerifyOptions::default()).unwrap();
        assert!(!r.all_passed());
        assert!(!r.checks[1].passed);
        assert!(r.checks[2].running_sup.is_none());
        let ident = NussbaumSpec::user("identity", 6.0, |x| x);
        assert!(!verify_enhanced(&ident, &grid, &VerifyOptions::default()).unwrap().all_passed());
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let grid = uniform_grid(6.0, 5);
        assert!(matches!(
            verify_enhanced(&NussbaumSpec::sin_exp_square(), &grid, &VerifyOptions::default()),
            Err(Error::GridTooCoarse(_))
        ));
    }

    #[test]
    fn lemma1_monitor_flags_decrease_and_sign_change() {
        let r = lemma1_premises(&[0.0, 1.0, 0.5], &[1.0, 1.0, 1.0], &[0.0; 3], None, 0.0);
        assert_eq!(r.first_xi_decrease, Some(1));
        assert!(!r.passed());
        let r = lemma1_premises(&[0.0, 1.0, 2.0], &[1.0, -1.0, 1.0], &[0.0; 3], None, 0.0);
        assert!(!r.b_sign_constant);
        let r = lemma1_premises(&[0.0, 1.0, 2.0], &[2.0, 2.0, 2.0], &[0.0; 3], Some(&[1.0, 2.0, 3.0]), 1e-12);
        assert_eq!(r.dissipation_holds, Some(true));
        assert!(r.passed());
    }
}
