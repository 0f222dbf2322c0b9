//! Post-run invariant monitors and the text report.

use std::fmt::Write as _;

use expstab::analysis::{check_descent, check_monotone, detect_limit, fit_envelope, settling_time};
use expstab::sim::{ControllerKind, Scenario, Trajectory};

pub struct Monitor {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Invariants that must hold along a completed run of this controller.
pub fn monitors(s: &Scenario, tr: &Trajectory) -> Vec<Monitor> {
    let mut out = Vec::new();
    if tr.is_empty() {
        return out;
    }
    if let Some(res) = tr.diagnostic("residual_max") {
        let worst = res.iter().fold(0.0f64, |m, v| m.max(*v));
        let tol = s.gains.residual_tolerance;
        out.push(Monitor {
            name: "factorization residual",
            passed: worst <= tol,
            detail: format!("max {worst:.3e} (tolerance {tol:.1e})"),
        });
    }
    match s.controller {
        ControllerKind::Theorem1 | ControllerKind::BaselineLambda0 => {
            let sign = s.gains.sign_b;
            let worst = tr.aux.iter().map(|v| v * sign).fold(f64::INFINITY, f64::min);
            let start = tr.aux[0] * sign;
            let kept = tr.aux.windows(2).all(|w| (w[1] - w[0]) * sign >= 0.0);
            out.push(Monitor {
                name: "rho_hat keeps the sign of b and grows in magnitude",
                passed: kept && worst >= start,
                detail: format!("terminal rho_hat {:.6}", tr.aux[tr.len() - 1]),
            });
            if let Some(v) = tr.diagnostic("V") {
                let d = check_descent(&v, 1e-6);
                out.push(Monitor {
                    name: "Lyapunov function non-increasing",
                    passed: d.holds,
                    detail: format!("worst relative increase {:.3e}", d.worst_increase),
                });
            }
        }
        ControllerKind::Theorem2 | ControllerKind::ScalarC => {
            let m = check_monotone(&tr.aux, 0.0);
            out.push(Monitor {
                name: "xi non-decreasing",
                passed: m.holds,
                detail: match m.first_violation {
                    Some(k) => format!("first decrease at t = {}", tr.t[k]),
                    None => format!("terminal xi {:.6}", tr.aux[tr.len() - 1]),
                },
            });
        }
        _ => {}
    }
    out
}

fn lambda_of(s: &Scenario) -> f64 {
    if s.controller.scalar_design().is_some() {
        s.scalar_gains.lambda
    } else {
        s.effective_gains().lambda
    }
}

pub fn render(s: &Scenario, tr: &Trajectory, mons: &[Monitor], seconds: f64) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "scenario    {}", tr.scenario);
    let _ = writeln!(r, "controller  {}", tr.controller);
    let _ = writeln!(r, "status      {}", tr.status);
    let _ = writeln!(r, "horizon     {} s, step {} s, {} samples", s.horizon, s.step, tr.len());
    let _ = writeln!(r, "runtime     {seconds:.2} s");
    if tr.is_empty() {
        return r;
    }
    let k = tr.len() - 1;
    let lambda = lambda_of(s);
    let env = fit_envelope(tr, lambda);
    let _ = writeln!(
        r,
        "envelope    |x(t)| <= N exp(-{lambda} t) with N = {:.6} (max at t = {:.4}), holds: {}",
        env.n, env.t_max, env.holds
    );
    let x1 = tr.state(1);
    let _ = writeln!(
        r,
        "settling    |x_1| < 0.05 from t = {}",
        settling_time(&tr.t, &x1, 0.05).map_or("never".into(), |v| format!("{v:.4}"))
    );
    let peak = x1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_u = tr.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let _ = writeln!(r, "peak |x_1|  {peak:.6}");
    let _ = writeln!(r, "max |u|     {max_u:.6}");
    let _ = writeln!(r, "x(T)        {:?}", tr.x[k]);
    let _ = writeln!(r, "theta_hat(T) {:?}", tr.theta_hat[k]);
    if tr.aux_name != "aux" {
        let _ = writeln!(r, "{}(T)  {:.6}", tr.aux_name, tr.aux[k]);
    }
    let end = tr.t[k];
    if end > 0.0 {
        for p in 1..=tr.q {
            let est = tr.estimate(p);
            if let Ok(l) = detect_limit(&tr.t, &est, end * 2.0 / 3.0, 1e-3 * (1.0 + est[k].abs())) {
                let _ = writeln!(
                    r,
                    "limit       theta_hat_{p}: tail variation {:.3e}, settled: {}",
                    l.tail_variation, l.holds
                );
            }
        }
    }
    if !mons.is_empty() {
        let _ = writeln!(r, "monitors");
        for m in mons {
            let _ = writeln!(r, "  [{}] {}: {}", if m.passed { "pass" } else { "FAIL" }, m.name, m.detail);
        }
    }
    r
}
