//! Post-hoc checks on recorded trajectories.

use std::fmt;

use crate::error::{Error, Result};
use crate::sim::Trajectory;

/// `‖x(t)‖ ≤ N e^{−λt}` with the tightest `N` on the recorded grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub lambda: f64,
    /// `max_t ‖x(t)‖ e^{λt}`.
    pub n: f64,
    /// Time at which the maximum is attained.
    pub t_max: f64,
    pub holds: bool,
    /// `N e^{−λt} − ‖x(t)‖` at every recorded time; zero at `t_max`.
    pub margin: Vec<f64>,
}

/// Fits the exponential envelope. A run that did not complete yields
/// `holds = false`.
pub fn fit_envelope(tr: &Trajectory, lambda: f64) -> EnvelopeFit {
    let scaled: Vec<f64> = (0..tr.len()).map(|k| tr.x_norm(k) * (lambda * tr.t[k]).exp()).collect();
    let (mut n, mut arg) = (0.0f64, 0usize);
    let mut finite = true;
    for (k, &v) in scaled.iter().enumerate() {
        if !v.is_finite() {
            finite = false;
        } else if v > n {
            n = v;
            arg = k;
        }
    }
    let margin = (0..tr.len())
        .map(|k| n * (-lambda * tr.t[k]).exp() - tr.x_norm(k))
        .collect();
    EnvelopeFit {
        lambda,
        n,
        t_max: tr.t.get(arg).copied().unwrap_or(0.0),
        holds: finite && !tr.is_empty() && tr.status.is_completed(),
        margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneCheck {
    pub holds: bool,
    /// Index `k` of the first `s_{k+1} < s_k − tol`.
    pub first_violation: Option<usize>,
}

/// `s_{k+1} ≥ s_k − tolerance` for all `k`.
pub fn check_monotone(signal: &[f64], tolerance: f64) -> MonotoneCheck {
    let first_violation = signal.windows(2).position(|w| w[1] < w[0] - tolerance);
    MonotoneCheck {
        holds: first_violation.is_none(),
        first_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCheck {
    pub holds: bool,
    /// Terminal value.
    pub limit: f64,
    /// `sup_{t ≥ tail_start} |s(t) − s(T)|`.
    pub tail_variation: f64,
}

/// Finite-horizon evidence that a signal has a limit: the tail stays within
/// `epsilon` of the terminal value.
pub fn detect_limit(t: &[f64], signal: &[f64], tail_start: f64, epsilon: f64) -> Result<LimitCheck> {
    let end = *t.last().ok_or_else(|| Error::Config("empty signal".into()))?;
    if !(end > tail_start) {
        return Err(Error::Config(format!("tail start {tail_start} is not before the horizon {end}")));
    }
    let limit = *signal.last().unwrap();
    let tail_variation = t
        .iter()
        .zip(signal)
        .filter(|(&ti, _)| ti >= tail_start)
        .map(|(_, &v)| (v - limit).abs())
        .fold(0.0, f64::max);
    Ok(LimitCheck {
        holds: tail_variation < epsilon,
        limit,
        tail_variation,
    })
}

/// Default tail tolerance `1e−3 (1 + |terminal|)`.
pub fn default_limit_epsilon(terminal: f64) -> f64 {
    1e-3 * (1.0 + terminal.abs())
}

/// `V(t_{k+1}) ≤ V(t_k) + rel · (1 + V(t_k))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    pub holds: bool,
    pub first_violation: Option<usize>,
    /// Largest `(V_{k+1} − V_k) / (1 + V_k)`.
    pub worst_increase: f64,
}

pub fn check_descent(v: &[f64], rel: f64) -> DescentCheck {
    let mut first = None;
    let mut worst = f64::NEG_INFINITY;
    for (k, w) in v.windows(2).enumerate() {
        let inc = (w[1] - w[0]) / (1.0 + w[0].abs());
        worst = worst.max(inc);
        if inc > rel && first.is_none() {
            first = Some(k);
        }
    }
    DescentCheck {
        holds: first.is_none(),
        first_violation: first,
        worst_increase: if worst.is_finite() { worst } else { 0.0 },
    }
}

/// Metrics compared across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub settling_threshold: f64,
    pub envelope_lambda: f64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            settling_threshold: 0.05,
            envelope_lambda: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    /// First recorded time after which `|x_1| < threshold` for the rest of
    /// the run; `None` if never settled.
    pub settling_time: Option<f64>,
    pub peak_x1: f64,
    pub max_u: f64,
    pub envelope_n: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub spec: MetricSpec,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,settling_time,peak_abs_x1,max_abs_u,envelope_N,completed\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.name,
                r.settling_time.map_or("inf".into(), |v| v.to_string()),
                r.peak_x1,
                r.max_u,
                r.envelope_n,
                r.completed
            ));
        }
        s
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>14} {:>12} {:>14} {:>14}",
            "run",
            format!("settle(<{})", self.spec.settling_threshold),
            "peak|x1|",
            "max|u|",
            format!("N(λ={})", self.spec.envelope_lambda)
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>14} {:>12.5} {:>14.5} {:>14.5}{}",
                r.name,
                r.settling_time.map_or("never".into(), |v| format!("{v:.4}")),
                r.peak_x1,
                r.max_u,
                r.envelope_n,
                if r.completed { "" } else { "  (incomplete)" }
            )?;
        }
        Ok(())
    }
}

/// First time after which `|signal| < threshold` on the rest of the grid.
pub fn settling_time(t: &[f64], signal: &[f64], threshold: f64) -> Option<f64> {
    match signal.iter().rposition(|v| v.abs() >= threshold) {
        None => t.first().copied(),
        Some(k) if k + 1 < t.len() => Some(t[k + 1]),
        Some(_) => None,
    }
}

/// Tabulates runs that share the horizon and the initial state. Rows are
/// ordered by run name, so the table does not depend on input order.
pub fn compare_runs(runs: &[(&str, &Trajectory)], spec: &MetricSpec) -> Result<ComparisonTable> {
    if let Some((_, first)) = runs.first() {
        for (name, tr) in runs {
            if tr.is_empty() || first.is_empty() {
                return Err(Error::MismatchedRuns(format!("run '{name}' is empty")));
            }
            if tr.x[0] != first.x[0] {
                return Err(Error::MismatchedRuns(format!("run '{name}' starts from a different state")));
            }
            let (a, b) = (tr.t.last().unwrap(), first.t.last().unwrap());
            if tr.status.is_completed() && first.status.is_completed() && (a - b).abs() > 1e-9 * b.abs().max(1.0) {
                return Err(Error::MismatchedRuns(format!("run '{name}' ends at {a}, expected {b}")));
            }
        }
    }
    let mut rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|(name, tr)| {
            let x1 = tr.state(1);
            ComparisonRow {
                name: name.to_string(),
                settling_time: settling_time(&tr.t, &x1, spec.settling_threshold),
                peak_x1: x1.iter().fold(0.0, |m, v| m.max(v.abs())),
                max_u: tr.u.iter().fold(0.0, |m, v| m.max(v.abs())),
                envelope_n: fit_envelope(tr, spec.envelope_lambda).n,
                completed: tr.status.is_completed(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(ComparisonTable {
        spec: spec.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{RunStatus, SCHEMA};

    pub(crate) fn synthetic(t: &[f64], f: impl Fn(f64) -> f64) -> Trajectory {
        Trajectory {
            schema: SCHEMA.into(),
            scenario: "synthetic".into(),
            controller: "none".into(),
            n: 1,
            q: 1,
            t: t.to_vec(),
            x: t.iter().map(|&s| vec![f(s)]).collect(),
            u: t.iter().map(|&s| -f(s)).collect(),
            theta_hat: vec![vec![0.0]; t.len()],
            aux_name: "aux".into(),
            aux: vec![0.0; t.len()],
            mu: vec![1.0; t.len()],
            diagnostic_names: vec![],
            diagnostics: vec![vec![]; t.len()],
            status: RunStatus::Completed,
        }
    }

    fn grid(end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| end * k as f64 / n as f64).collect()
    }

    #[test]
    fn envelope_of_exact_exponentials() {
        let t = grid(10.0, 1000);
        let f = fit_envelope(&synthetic(&t, |s| (-0.6 * s).exp()), 0.6);
        assert!((f.n - 1.0).abs() < 1e-12 && f.holds);
        let f = fit_envelope(&synthetic(&t, |s| 2.0 * (-0.6 * s).exp()), 0.6);
        assert!((f.n - 2.0).abs() < 1e-12);
        assert!(f.margin.iter().all(|&m| m >= -1e-12));
    }

    #[test]
    fn envelope_with_zero_rate_is_sup_norm() {
        let t = grid(10.0, 1000);
        let tr = synthetic(&t, |s| s.sin());
        let f = fit_envelope(&tr, 0.0);
        let sup = (0..tr.len()).map(|k| tr.x_norm(k)).fold(0.0, f64::max);
        assert_eq!(f.n, sup);
    }

    #[test]
    fn diverged_run_does_not_hold() {
        let t = grid(1.0, 10);
        let mut tr = synthetic(&t, |s| s);
        tr.status = RunStatus::Diverged {
            t: 1.0,
            reason: "x".into(),
        };
        assert!(!fit_envelope(&tr, 0.1).holds);
    }

    #[test]
    fn monotone_examples() {
        let t = grid(6.0, 600);
        let s: Vec<f64> = t.iter().map(|v| v.sin()).collect();
        let c = check_monotone(&s, 0.0);
        assert!(!c.holds);
        let tv = t[c.first_violation.unwrap()];
        assert!((tv - std::f64::consts::FRAC_PI_2).abs() < 0.02);
        assert!(check_monotone(&[2.0; 10], 0.0).holds);
    }

    #[test]
    fn limit_examples() {
        let t = grid(20.0, 2000);
        let c: Vec<f64> = vec![3.0; t.len()];
        let r = detect_limit(&t, &c, 10.0, 1e-3).unwrap();
        assert!(r.holds && r.limit == 3.0);
        let e: Vec<f64> = t.iter().map(|v| (-v).exp()).collect();
        let r = detect_limit(&t, &e, 10.0, 1e-3).unwrap();
        assert!(r.holds && r.limit.abs() < 1e-8);
        let l: Vec<f64> = t.iter().map(|v| (1.0 + v).ln()).collect();
        assert!(!detect_limit(&t, &l, 10.0, 1e-3).unwrap().holds);
        assert!(detect_limit(&t, &l, 25.0, 1e-3).is_err());
    }

    #[test]
    fn comparison_is_permutation_invariant() {
        let t = grid(10.0, 1000);
        let a = synthetic(&t, |s| (-s).exp());
        let b = synthetic(&t, |s| (-0.3 * s).exp());
        let spec = MetricSpec::default();
        let t1 = compare_runs(&[("a", &a), ("b", &b)], &spec).unwrap();
        let t2 = compare_runs(&[("b", &b), ("a", &a)], &spec).unwrap();
        assert_eq!(t1, t2);
        let same = compare_runs(&[("a", &a), ("a2", &a)], &spec).unwrap();
        assert_eq!(same.rows[0].settling_time, same.rows[1].settling_time);
        assert!(t1.row("a").unwrap().settling_time < t1.row("b").unwrap().settling_time);
        let c = synthetic(&t, |s| 2.0 * (-s).exp());
        assert!(compare_runs(&[("a", &a), ("c", &c)], &spec).is_err());
    }

    #[test]
    fn descent_examples() {
        assert!(check_descent(&[3.0, 2.0, 2.0, 1.0], 0.0).holds);
        let d = check_descent(&[3.0, 2.0, 2.5], 1e-6);
        assert_eq!(d.first_violation, Some(1));
    }
}
