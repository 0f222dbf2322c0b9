//! End-to-end verification suite.
//!
//! Each criterion returns a [`CriterionResult`] with a pass flag and the
//! measured quantities behind it. Closed-loop runs shared by several
//! criteria are computed once per [`Suite`].

use std::fmt;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{check_descent, check_monotone, compare_runs, detect_limit, fit_envelope, MetricSpec};
use crate::backstepping::{AdaptiveState, Backstepping, Scaling};
use crate::nussbaum::{uniform_grid, verify_enhanced, NussbaumSpec, VerifyOptions};
use crate::scalar::{scalar_a_law, scalar_b_law, ScalarDesign, ScalarGains, ScalarState};
use crate::scenarios::{build_scalar, build_synthetic, build_wing_rock, ScalarCase};
use crate::sim::{simulate, ControllerKind, Scenario, Trajectory};

/// Criterion numbers, in order.
pub const CRITERIA: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub details: Vec<String>,
    pub seconds: f64,
}

impl CriterionResult {
    fn new(id: u8, title: &'static str) -> Self {
        CriterionResult {
            id,
            title,
            passed: true,
            details: Vec::new(),
            seconds: 0.0,
        }
    }

    /// Records one check; the criterion fails if any check fails.
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let mark = if ok { "ok  " } else { "FAIL" };
        self.details.push(format!("{mark} {}", what.into()));
        self.passed &= ok;
    }

    /// One-line summary.
    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {} ({:.1} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.seconds
        )
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.line())?;
        for d in &self.details {
            writeln!(f, "    {d}")?;
        }
        Ok(())
    }
}

/// A recorded run together with its wall-clock time.
#[derive(Debug, Clone)]
pub struct TimedRun {
    pub trajectory: Trajectory,
    pub seconds: f64,
}

fn timed(s: &Scenario) -> TimedRun {
    let start = Instant::now();
    let trajectory = simulate(s).expect("acceptance scenarios are valid");
    TimedRun {
        trajectory,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum RunId {
    WingRock1,
    WingRock1Coarse,
    WingRock2,
    Baseline,
    Synthetic1,
    Synthetic2,
}

const RUN_IDS: [RunId; 6] = [
    RunId::WingRock1,
    RunId::WingRock1Coarse,
    RunId::WingRock2,
    RunId::Baseline,
    RunId::Synthetic1,
    RunId::Synthetic2,
];

fn scenario(id: RunId) -> Scenario {
    let build = |k| build_wing_rock(k).expect("wing-rock variants exist");
    match id {
        RunId::WingRock1 => build(ControllerKind::Theorem1),
        RunId::WingRock1Coarse => {
            let mut s = build(ControllerKind::Theorem1);
            s.step *= 2.0;
            s
        }
        RunId::WingRock2 => build(ControllerKind::Theorem2),
        RunId::Baseline => build(ControllerKind::BaselineLambda0),
        RunId::Synthetic1 => build_synthetic(SYNTHETIC_SEED, ControllerKind::Theorem1).expect("valid"),
        RunId::Synthetic2 => build_synthetic(SYNTHETIC_SEED, ControllerKind::Theorem2).expect("valid"),
    }
}

const SYNTHETIC_SEED: u64 = 0;

/// Shared, lazily computed closed-loop runs.
#[derive(Default)]
pub struct Suite {
    runs: [OnceLock<TimedRun>; 6],
}

impl Suite {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(&self, id: RunId) -> &TimedRun {
        let k = RUN_IDS.iter().position(|r| *r == id).expect("known run");
        self.runs[k].get_or_init(|| timed(&scenario(id)))
    }

    /// Computes every shared run on parallel workers.
    pub fn prefetch(&self) {
        RUN_IDS.par_iter().for_each(|&id| {
            self.run(id);
        });
    }

    pub fn criterion(&self, id: u8) -> Option<CriterionResult> {
        let start = Instant::now();
        let mut r = match id {
            1 => self.wing_rock_theorem1(),
            2 => self.wing_rock_theorem2(),
            3 => self.baseline_comparison(),
            4 => self.lyapunov_descent(),
            5 => scalar_suites(),
            6 => reduction_identities(),
            7 => self.numerical_kernels(),
            8 => nussbaum_verifier(),
            9 => self.synthetic_runs(),
            _ => return None,
        };
        r.seconds = start.elapsed().as_secs_f64();
        Some(r)
    }

    /// Evaluates the given criteria in order.
    pub fn run_criteria(&self, ids: &[u8]) -> Vec<CriterionResult> {
        ids.iter().filter_map(|&id| self.criterion(id)).collect()
    }

    fn wing_rock_theorem1(&self) -> CriterionResult {
        let mut r = CriterionResult::new(1, "wing-rock Theorem 1 run");
        let run = self.run(RunId::WingRock1);
        let tr = &run.trajectory;
        r.check(tr.status.is_completed(), format!("run status: {}", tr.status));
        let env = fit_envelope(tr, 0.6);
        r.check(env.holds && env.n.is_finite(), format!("envelope at lambda = 0.6: N = {:.6}", env.n));
        let max_u = max_abs(&tr.u);
        r.check(max_u.is_finite(), format!("max |u| = {max_u:.4}"));
        let worst_rho = tr.aux.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.check(worst_rho <= -0.3, format!("max rho_hat = {worst_rho} (must stay <= -0.3)"));
        for p in 1..=tr.q {
            let est = tr.estimate(p);
            let lim = detect_limit(&tr.t, &est, 10.0, 1e-3).expect("horizon exceeds 10 s");
            r.check(
                lim.holds,
                format!("theta_hat_{p} tail variation after t = 10: {:.3e}", lim.tail_variation),
            );
        }
        r.check(run.seconds <= 60.0, format!("runtime {:.1} s (budget 60 s)", run.seconds));
        r
    }

    fn wing_rock_theorem2(&self) -> CriterionResult {
        let mut r = CriterionResult::new(2, "wing-rock Theorem 2 run");
        let tr = &self.run(RunId::WingRock2).trajectory;
        r.check(tr.status.is_completed(), format!("run status: {}", tr.status));
        let mono = check_monotone(&tr.aux, 0.0);
        r.check(mono.holds, format!("xi non-decreasing (first violation: {:?})", mono.first_violation));
        let xi_max = NussbaumSpec::sin_exp_square().xi_max;
        let xi_end = tr.aux.last().copied().unwrap_or(f64::NAN);
        r.check(xi_end < xi_max, format!("xi(T) = {xi_end:.6} < xi_max = {xi_max}"));
        let env = fit_envelope(tr, 0.6);
        r.check(env.holds, format!("envelope at lambda = 0.6: N = {:.6}", env.n));
        let end = tr.x_norm(tr.len() - 1);
        r.check(end < 1e-3, format!("|x(T)| = {end:.3e}"));
        r
    }

    fn baseline_comparison(&self) -> CriterionResult {
        let mut r = CriterionResult::new(3, "comparison with the lambda = 0 baseline");
        let t1 = &self.run(RunId::WingRock1).trajectory;
        let t2 = &self.run(RunId::WingRock2).trajectory;
        let b0 = &self.run(RunId::Baseline).trajectory;
        let table = match compare_runs(
            &[("theorem1", t1), ("theorem2", t2), ("baseline-lambda0", b0)],
            &MetricSpec::default(),
        ) {
            Ok(t) => t,
            Err(e) => {
                r.check(false, format!("comparison failed: {e}"));
                return r;
            }
        };
        let row = |n: &str| table.row(n).expect("row present").clone();
        let (a, b, c) = (row("theorem1"), row("theorem2"), row("baseline-lambda0"));
        let settle = match (a.settling_time, c.settling_time) {
            (Some(x), Some(y)) => x < y,
            (Some(_), None) => true,
            _ => false,
        };
        r.check(
            settle,
            format!(
                "settling time to |x_1| < 0.05: theorem1 {:?} < baseline {:?}",
                a.settling_time, c.settling_time
            ),
        );
        r.check(
            b.max_u > a.max_u,
            format!("peak |u|: theorem2 {:.4} > theorem1 {:.4}", b.max_u, a.max_u),
        );
        r.details.push(format!("peak |x_1|: theorem1 {:.4}, baseline {:.4}", a.peak_x1, c.peak_x1));
        r
    }

    fn lyapunov_descent(&self) -> CriterionResult {
        let mut r = CriterionResult::new(4, "Lyapunov descent along the Theorem 1 run");
        let tr = &self.run(RunId::WingRock1).trajectory;
        match tr.diagnostic("V") {
            Some(v) => {
                let d = check_descent(&v, 1e-6);
                r.check(
                    d.holds,
                    format!(
                        "V non-increasing within 1e-6 (1 + V): worst relative increase {:.3e}, first violation {:?}",
                        d.worst_increase,
                        d.first_violation.map(|k| tr.t[k])
                    ),
                );
                r.details.push(format!("V(0) = {:.6}, V(T) = {:.6}", v[0], v[v.len() - 1]));
            }
            None => r.check(false, "the run recorded no Lyapunov values"),
        }
        r
    }

    fn numerical_kernels(&self) -> CriterionResult {
        let mut r = CriterionResult::new(7, "numerical kernels");
        for (label, s) in [
            ("n = 2 (wing rock)", scenario(RunId::WingRock1)),
            ("n = 3 (synthetic)", scenario(RunId::Synthetic1)),
        ] {
            let worst = sensitivity_error(&s, 100, 11);
            r.check(
                worst <= 1e-5,
                format!("{label}: worst relative sensitivity error vs central differences {worst:.3e}"),
            );
        }
        let mut worst_res: f64 = 0.0;
        let mut complete = true;
        for id in RUN_IDS {
            let tr = &self.run(id).trajectory;
            complete &= tr.status.is_completed();
            if let Some(res) = tr.diagnostic("residual_max") {
                worst_res = worst_res.max(max_abs(&res));
            }
        }
        r.check(
            complete && worst_res <= 1e-8,
            format!("factorization residual over every step of every run: {worst_res:.3e}"),
        );
        let fine = &self.run(RunId::WingRock1).trajectory;
        let coarse = &self.run(RunId::WingRock1Coarse).trajectory;
        let diff = terminal_difference(fine, coarse);
        r.check(diff <= 1e-5, format!("step halving 2e-4 -> 1e-4: terminal state change {diff:.3e}"));
        let (nf, nc) = (fit_envelope(fine, 0.6).n, fit_envelope(coarse, 0.6).n);
        let rel = (nf - nc).abs() / nf;
        r.check(rel <= 0.01, format!("envelope N under step halving: {nc:.6} -> {nf:.6}"));
        r
    }

    fn synthetic_runs(&self) -> CriterionResult {
        let mut r = CriterionResult::new(9, "n = 3 synthetic runs");
        for (label, id) in [("theorem1", RunId::Synthetic1), ("theorem2", RunId::Synthetic2)] {
            let tr = &self.run(id).trajectory;
            r.check(tr.status.is_completed(), format!("{label}: run status: {}", tr.status));
            let env = fit_envelope(tr, 0.3);
            r.check(env.holds, format!("{label}: envelope at lambda = 0.3: N = {:.6}", env.n));
            let res = tr.diagnostic("residual_max").map_or(f64::INFINITY, |v| max_abs(&v));
            r.check(res <= 1e-8, format!("{label}: factorization residual {res:.3e}"));
            if id == RunId::Synthetic1 {
                let worst = tr.aux.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                r.check(worst <= tr.aux[0], format!("{label}: rho_hat keeps its sign, max {worst:.6}"));
                if let Some(v) = tr.diagnostic("V") {
                    let d = check_descent(&v, 1e-6);
                    r.check(d.holds, format!("{label}: V descent, worst increase {:.3e}", d.worst_increase));
                }
            } else {
                let mono = check_monotone(&tr.aux, 0.0);
                r.check(mono.holds, format!("{label}: xi non-decreasing"));
            }
        }
        r
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn terminal_difference(a: &Trajectory, b: &Trajectory) -> f64 {
    let (ka, kb) = (a.len() - 1, b.len() - 1);
    let mut d: f64 = 0.0;
    for (x, y) in a.x[ka].iter().zip(&b.x[kb]) {
        d = d.max((x - y).abs());
    }
    for (x, y) in a.theta_hat[ka].iter().zip(&b.theta_hat[kb]) {
        d = d.max((x - y).abs());
    }
    d.max((a.aux[ka] - b.aux[kb]).abs())
}

/// Worst norm-relative error between the propagated partials of every
/// virtual law and central differences, over `draws` random points.
pub fn sensitivity_error(s: &Scenario, draws: usize, seed: u64) -> f64 {
    let (n, q) = (s.model.n(), s.model.q());
    let eng = Backstepping::new(n, q, s.gains.clone(), Scaling::Exponential).expect("valid gains");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: f64 = rng.gen_range(1.0..5.0);
        let base = eng.evaluate(&s.model, &x, &th, mu).expect("evaluation succeeds");
        let alpha = |x: &[f64], th: &[f64], mu: f64, layer: usize| {
            eng.evaluate(&s.model, x, th, mu).expect("evaluation succeeds").layers[layer].alpha
        };
        for layer in 0..n - 1 {
            let l = &base.layers[layer];
            let mut analytic = l.dalpha_dx.clone();
            analytic.extend(&l.dalpha_dtheta);
            analytic.push(l.dalpha_dmu);
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..=layer {
                let h = 1e-5 * (1.0 + x[j].abs());
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                numeric.push((alpha(&xp, &th, mu, layer) - alpha(&xm, &th, mu, layer)) / (2.0 * h));
            }
            for p in 0..q {
                let h = 1e-5 * (1.0 + th[p].abs());
                let (mut tp, mut tm) = (th.clone(), th.clone());
                tp[p] += h;
                tm[p] -= h;
                numeric.push((alpha(&x, &tp, mu, layer) - alpha(&x, &tm, mu, layer)) / (2.0 * h));
            }
            let h = 1e-5 * mu;
            numeric.push((alpha(&x, &th, mu + h, layer) - alpha(&x, &th, mu - h, layer)) / (2.0 * h));
            let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
    }
    worst
}

fn random_case(rng: &mut ChaCha8Rng, design: ScalarDesign) -> ScalarCase {
    let a = rng.gen_range(-1.0..1.0);
    let x0 = rng.gen_range(-1.0..1.0);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let b = sign * rng.gen_range(0.5..2.0);
    ScalarCase {
        a,
        a_switch: if design == ScalarDesign::A { 0.0 } else { 0.3 },
        b,
        x0,
    }
}

/// Fifty random closed loops per scalar design.
pub fn scalar_suites() -> CriterionResult {
    let mut r = CriterionResult::new(5, "scalar suites");
    let start = Instant::now();
    for (k, design) in [ScalarDesign::A, ScalarDesign::B, ScalarDesign::C].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let cases: Vec<ScalarCase> = (0..50).map(|_| random_case(&mut rng, design)).collect();
        let failures: Vec<String> = cases
            .par_iter()
            .filter_map(|c| {
                let tr = simulate(&build_scalar(design, *c)).expect("valid scalar scenario");
                let env = fit_envelope(&tr, 0.6);
                let mono = design != ScalarDesign::C || check_monotone(&tr.aux, 0.0).holds;
                (!env.holds || !mono).then(|| format!("{c:?}: {}", tr.status))
            })
            .collect();
        r.check(
            failures.is_empty(),
            format!("design {design:?}: {} of 50 draws failed", failures.len()),
        );
        for f in failures.iter().take(3) {
            r.details.push(format!("     {f}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.check(secs <= 120.0, format!("runtime {secs:.1} s (budget 120 s)"));
    r
}

/// Theorem 1 at `λ = 0` against the unscaled code path, and design B at
/// `δ = 0` against design A.
pub fn reduction_identities() -> CriterionResult {
    let mut r = CriterionResult::new(6, "reduction identities");
    for (label, mut s) in [
        ("wing rock", scenario(RunId::WingRock1)),
        ("synthetic", scenario(RunId::Synthetic1)),
    ] {
        s.gains.lambda = 0.0;
        let (n, q) = (s.model.n(), s.model.q());
        let scaled = Backstepping::new(n, q, s.gains.clone(), Scaling::Exponential).expect("valid");
        let plain = Backstepping::new(n, q, s.gains.clone(), Scaling::Unscaled).expect("valid");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let st = AdaptiveState {
                theta_hat: (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rho_hat: s.gains.sign_b * rng.gen_range(0.1..2.0),
                xi: 0.0,
            };
            let a = scaled.control_theorem1(&s.model, &x, &st, 1.0).expect("evaluation succeeds");
            let b = plain.control_theorem1(&s.model, &x, &st, 1.0).expect("evaluation succeeds");
            let mut pairs = vec![(a.u, b.u), (a.rho_hat_dot, b.rho_hat_dot)];
            pairs.extend(a.theta_hat_dot.iter().copied().zip(b.theta_hat_dot.iter().copied()));
            for (u, v) in pairs {
                worst = worst.max((u - v).abs() / u.abs().max(v.abs()).max(1e-300));
            }
        }
        r.check(worst <= 1e-12, format!("{label}: lambda = 0 vs unscaled, worst relative gap {worst:.3e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let g = ScalarGains {
        delta_a: 0.0,
        ..ScalarGains::default()
    };
    let mut equal = true;
    for _ in 0..100 {
        let st = ScalarState {
            t: rng.gen_range(0.0..10.0),
            x: rng.gen_range(-2.0..2.0),
            a_hat: rng.gen_range(-2.0..2.0),
            xi: 0.0,
        };
        equal &= scalar_a_law(&st, &g).ok() == scalar_b_law(&st, &g).ok();
    }
    r.check(equal, "design B with delta = 0 equals design A exactly on 100 states");
    r
}

/// `sin(ξ)e^{ξ²}` passes on `[0, 6]`; `N ≡ 1` and `N(ξ) = ξ` fail.
pub fn nussbaum_verifier() -> CriterionResult {
    let mut r = CriterionResult::new(8, "Nussbaum verifier");
    let grid = uniform_grid(6.0, 100);
    let opts = VerifyOptions::default();
    let cases = [
        (NussbaumSpec::sin_exp_square(), true),
        (NussbaumSpec::user("one", 6.0, |_| 1.0), false),
        (NussbaumSpec::user("identity", 6.0, |x| x), false),
    ];
    for (spec, expect) in cases {
        match verify_enhanced(&spec, &grid, &opts) {
            Ok(rep) => r.check(
                rep.all_passed() == expect,
                format!(
                    "{}: {} (expected {})",
                    spec.kind.name(),
                    if rep.all_passed() { "passes" } else { "fails" },
                    if expect { "pass" } else { "fail" }
                ),
            ),
            Err(e) => r.check(false, format!("{}: {e}", spec.kind.name())),
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_criteria_pass() {
        let suite = Suite::new();
        for r in suite.run_criteria(&[6, 8]) {
            assert!(r.passed, "{r}");
        }
        assert!(suite.criterion(10).is_none());
    }

    #[test]
    fn result_formatting() {
        let mut r = CriterionResult::new(3, "x");
        r.check(true, "a");
        assert!(r.line().contains("[PASS]"));
        r.check(false, "b");
        assert!(r.line().contains("[FAIL]"));
        assert!(r.to_string().contains("FAIL b"));
    }
}
