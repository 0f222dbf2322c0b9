//! Closed-loop simulation: plant, controller and adaptive laws integrated
//! together by classical RK4 on a grid that contains every parameter jump.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backstepping::{check_initial_state, lyapunov_theorem1, AdaptiveState, Backstepping, GainConfig, Law, Scaling};
use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::scalar::{scalar_law, ScalarDesign, ScalarGains, ScalarState};

pub const SCHEMA: &str = "expstab.trajectory/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    OpenLoop,
    ScalarA,
    ScalarB,
    ScalarC,
    Theorem1,
    Theorem2,
    /// Theorem 1 with `λ = 0`.
    BaselineLambda0,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 7] = [
        ControllerKind::OpenLoop,
        ControllerKind::ScalarA,
        ControllerKind::ScalarB,
        ControllerKind::ScalarC,
        ControllerKind::Theorem1,
        ControllerKind::Theorem2,
        ControllerKind::BaselineLambda0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::OpenLoop => "open-loop",
            ControllerKind::ScalarA => "scalar-A",
            ControllerKind::ScalarB => "scalar-B",
            ControllerKind::ScalarC => "scalar-C",
            ControllerKind::Theorem1 => "theorem1",
            ControllerKind::Theorem2 => "theorem2",
            ControllerKind::BaselineLambda0 => "baseline-lambda0",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Unknown {
                kind: "controller",
                name: name.into(),
            })
    }

    /// Name of the scalar controller state stored after `θ̂`.
    pub fn aux_name(self) -> &'static str {
        match self {
            ControllerKind::Theorem1 | ControllerKind::BaselineLambda0 => "rho_hat",
            ControllerKind::Theorem2 | ControllerKind::ScalarC => "xi",
            _ => "aux",
        }
    }

    /// The scalar design this controller runs, if any.
    pub fn scalar_design(self) -> Option<ScalarDesign> {
        match self {
            ControllerKind::ScalarA => Some(ScalarDesign::A),
            ControllerKind::ScalarB => Some(ScalarDesign::B),
            ControllerKind::ScalarC => Some(ScalarDesign::C),
            _ => None,
        }
    }

    fn law(self) -> Option<Law> {
        match self {
            ControllerKind::Theorem1 | ControllerKind::BaselineLambda0 => Some(Law::Theorem1),
            ControllerKind::Theorem2 => Some(Law::Theorem2),
            _ => None,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub x: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub rho_hat: f64,
    pub xi: f64,
}

/// Test-only nominal values used to evaluate the Lyapunov function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovHints {
    pub ell_theta: Vec<f64>,
    pub ell_b: f64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: SystemModel,
    pub controller: ControllerKind,
    pub gains: GainConfig,
    pub scalar_gains: ScalarGains,
    pub initial: InitialState,
    pub horizon: f64,
    pub step: f64,
    pub hints: Option<LyapunovHints>,
    /// Keep every `record_stride`-th grid point (the last one always).
    pub record_stride: usize,
    /// State magnitude treated as divergence.
    pub divergence_bound: f64,
    /// Local error tolerance. When set, each grid step is split by step
    /// doubling until a full step and two half steps agree to
    /// `tol·(1 + |y|)`; the recorded grid is unchanged.
    pub local_tolerance: Option<f64>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, model: SystemModel, controller: ControllerKind, initial: InitialState) -> Self {
        let (n, q) = (model.n(), model.q());
        Scenario {
            name: name.into(),
            model,
            controller,
            gains: GainConfig::new(n, q),
            scalar_gains: ScalarGains::default(),
            initial,
            horizon: 10.0,
            step: 1e-3,
            hints: None,
            record_stride: 1,
            divergence_bound: 1e10,
            local_tolerance: None,
        }
    }

    /// Gains actually used by the controller.
    pub fn effective_gains(&self) -> GainConfig {
        let mut g = self.gains.clone();
        if self.controller == ControllerKind::BaselineLambda0 {
            g.lambda = 0.0;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let (n, q) = (self.model.n(), self.model.q());
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step = {} must be positive", self.step)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon = {} must be positive", self.horizon)));
        }
        if let Some(tol) = self.local_tolerance {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Error::Config(format!("local tolerance = {tol} must be positive")));
            }
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record stride must be at least 1".into()));
        }
        if self.initial.x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: n,
                got: self.initial.x.len(),
            });
        }
        if self.initial.theta_hat.len() != q {
            return Err(Error::DimensionMismatch {
                what: "initial theta_hat",
                expected: q,
                got: self.initial.theta_hat.len(),
            });
        }
        crate::error::ensure_finite("initial state", &self.initial.x)?;
        if let Some(design) = self.controller.scalar_design() {
            if n != 1 || q != 1 {
                return Err(Error::Config("scalar designs need a plant with n = q = 1".into()));
            }
            self.scalar_gains.validate()?;
            if design == ScalarDesign::C {
                self.scalar_gains.nussbaum.eval(self.initial.xi)?;
            }
        }
        if let Some(law) = self.controller.law() {
            let g = self.effective_gains();
            g.validate(n, q)?;
            check_initial_state(&self.adaptive_initial(), &g, law)?;
            if let Some(h) = &self.hints {
                if h.ell_theta.len() != q || h.ell_b == 0.0 {
                    return Err(Error::Config("Lyapunov hints must give q values and a non-zero ell_b".into()));
                }
            }
        }
        Ok(())
    }

    fn adaptive_initial(&self) -> AdaptiveState {
        AdaptiveState {
            theta_hat: self.initial.theta_hat.clone(),
            rho_hat: self.initial.rho_hat,
            xi: self.initial.xi,
        }
    }

    fn aux0(&self) -> f64 {
        match self.controller.aux_name() {
            "rho_hat" => self.initial.rho_hat,
            "xi" => self.initial.xi,
            _ => 0.0,
        }
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { t: f64, reason: String },
    NussbaumOverflow { t: f64, xi: f64 },
    MonitorFailure { t: f64, reason: String },
    Failed { t: f64, reason: String },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }

    fn from_error(t: f64, e: Error) -> Self {
        match e {
            Error::NussbaumOverflow { xi, .. } => RunStatus::NussbaumOverflow { t, xi },
            Error::NonFinite(r) => RunStatus::Diverged { t, reason: r },
            e @ Error::FactorizationResidual { .. } => RunStatus::MonitorFailure { t, reason: e.to_string() },
            e => RunStatus::Failed { t, reason: e.to_string() },
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => write!(f, "completed"),
            RunStatus::Diverged { t, reason } => write!(f, "diverged at t = {t}: {reason}"),
            RunStatus::NussbaumOverflow { t, xi } => write!(f, "Nussbaum guard fired at t = {t} (xi = {xi})"),
            RunStatus::MonitorFailure { t, reason } => write!(f, "monitor failure at t = {t}: {reason}"),
            RunStatus::Failed { t, reason } => write!(f, "failed at t = {t}: {reason}"),
        }
    }
}

/// Recorded closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: String,
    pub scenario: String,
    pub controller: String,
    pub n: usize,
    pub q: usize,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub theta_hat: Vec<Vec<f64>>,
    pub aux_name: String,
    pub aux: Vec<f64>,
    pub mu: Vec<f64>,
    pub diagnostic_names: Vec<String>,
    pub diagnostics: Vec<Vec<f64>>,
    pub status: RunStatus,
}

impl Trajectory {
    fn empty(s: &Scenario, diagnostic_names: Vec<String>) -> Self {
        Trajectory {
            schema: SCHEMA.into(),
            scenario: s.name.clone(),
            controller: s.controller.name().into(),
            n: s.model.n(),
            q: s.model.q(),
            t: Vec::new(),
            x: Vec::new(),
            u: Vec::new(),
            theta_hat: Vec::new(),
            aux_name: s.controller.aux_name().into(),
            aux: Vec::new(),
            mu: Vec::new(),
            diagnostic_names,
            diagnostics: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn x_norm(&self, k: usize) -> f64 {
        self.x[k].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Values of one state component, 1-based.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[i - 1]).collect()
    }

    /// Values of one estimate component, 1-based.
    pub fn estimate(&self, i: usize) -> Vec<f64> {
        self.theta_hat.iter().map(|r| r[i - 1]).collect()
    }

    pub fn diagnostic(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.diagnostic_names.iter().position(|d| d == name)?;
        Some(self.diagnostics.iter().map(|r| r[c]).collect())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n).map(|i| format!("x_{i}")));
        h.push("u".into());
        h.extend((1..=self.q).map(|i| format!("theta_hat_{i}")));
        h.push(self.aux_name.clone());
        h.push("mu".into());
        h.extend(self.diagnostic_names.iter().cloned());
        h
    }

    fn row(&self, k: usize) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.header().len());
        r.push(self.t[k]);
        r.extend(&self.x[k]);
        r.push(self.u[k]);
        r.extend(&self.theta_hat[k]);
        r.push(self.aux[k]);
        r.push(self.mu[k]);
        r.extend(&self.diagnostics[k]);
        r
    }

    /// One row per recorded step in the documented column order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for k in 0..self.len() {
            wr.write_record(self.row(k).iter().map(|v| v.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Time plus the diagnostic columns only.
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut h = vec!["t".to_string()];
        h.extend(self.diagnostic_names.iter().cloned());
        wr.write_record(&h)?;
        for k in 0..self.len() {
            let mut r = vec![self.t[k].to_string()];
            r.extend(self.diagnostics[k].iter().map(|v| v.to_string()));
            wr.write_record(&r)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trajectory CSV written by [`Trajectory::write_csv`]. Metadata
    /// not stored in the CSV (names, status) is left at defaults.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let q = header.iter().filter(|h| h.starts_with("theta_hat_")).count();
        let fixed = 1 + n + 1 + q + 2;
        if header.len() < fixed || header[0] != "t" || header[n + 1] != "u" || header[fixed - 1] != "mu" {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let mut tr = Trajectory {
            schema: SCHEMA.into(),
            scenario: String::new(),
            controller: String::new(),
            n,
            q,
            t: Vec::new(),
            x: Vec::new(),
            u: Vec::new(),
            theta_hat: Vec::new(),
            aux_name: header[fixed - 2].clone(),
            aux: Vec::new(),
            mu: Vec::new(),
            diagnostic_names: header[fixed..].to_vec(),
            diagnostics: Vec::new(),
            status: RunStatus::Completed,
        };
        for rec in rd.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != header.len() {
                return Err(Error::Format("row length differs from header".into()));
            }
            tr.t.push(v[0]);
            tr.x.push(v[1..=n].to_vec());
            tr.u.push(v[n + 1]);
            tr.theta_hat.push(v[n + 2..n + 2 + q].to_vec());
            tr.aux.push(v[fixed - 2]);
            tr.mu.push(v[fixed - 1]);
            tr.diagnostics.push(v[fixed..].to_vec());
        }
        Ok(tr)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let tr: Trajectory = serde_json::from_reader(r)?;
        if tr.schema != SCHEMA {
            return Err(Error::Format(format!("unsupported schema '{}'", tr.schema)));
        }
        Ok(tr)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_json(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_json(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Uniform grid of step `h` on `[0, T]` merged with the breakpoints.
///
/// A uniform point closer than `1e−6·h` to a breakpoint is replaced by it,
/// so no step straddles a jump and no step is vanishingly short.
pub fn time_grid(horizon: f64, step: f64, breakpoints: &[f64]) -> Vec<f64> {
    let count = (horizon / step - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..count).map(|k| k as f64 * step).collect();
    grid.push(horizon);
    let snap = 1e-6 * step;
    for &b in breakpoints {
        if !(b > 0.0 && b < horizon) {
            continue;
        }
        let pos = grid.partition_point(|&t| t < b);
        let near_left = pos > 0 && b - grid[pos - 1] <= snap;
        let near_right = pos < grid.len() && grid[pos] - b <= snap;
        if near_right && pos + 1 < grid.len() {
            grid[pos] = b;
        } else if near_left && pos > 1 {
            grid[pos - 1] = b;
        } else if !near_left && !near_right {
            grid.insert(pos, b);
        }
    }
    grid
}

#[allow(clippy::large_enum_variant)]
enum Plant {
    Open,
    Scalar(ScalarDesign, ScalarGains),
    Backstepping {
        law: Law,
        engine: Backstepping,
        lambda: f64,
        lyapunov: Option<(LyapunovHints, DMatrix<f64>, f64)>,
    },
}

struct Stage {
    u: f64,
    mu: f64,
    diag: Vec<f64>,
}

struct ClosedLoop<'a> {
    model: &'a SystemModel,
    plant: Plant,
    n: usize,
    q: usize,
}

impl<'a> ClosedLoop<'a> {
    fn new(s: &'a Scenario) -> Result<(Self, Vec<String>)> {
        let (n, q) = (s.model.n(), s.model.q());
        let mut names = Vec::new();
        let plant = if let Some(d) = s.controller.scalar_design() {
            names.extend(["s", "a_hat_dot", "xi_dot"].map(String::from));
            Plant::Scalar(d, s.scalar_gains.clone())
        } else if let Some(law) = s.controller.law() {
            let g = s.effective_gains();
            names.push("kappa".into());
            names.extend((1..=n).map(|i| format!("zeta_{i}")));
            names.extend((1..=n).map(|i| format!("s_{i}")));
            names.push("psi".into());
            names.push("residual_max".into());
            names.push("b".into());
            if law == Law::Theorem2 {
                names.push("nussbaum_gain".into());
            }
            let lyapunov = match (&s.hints, law) {
                (Some(h), Law::Theorem1) => {
                    names.push("V".into());
                    let inv = g
                        .gamma
                        .clone()
                        .try_inverse()
                        .ok_or_else(|| Error::Config("Gamma is singular".into()))?;
                    Some((h.clone(), inv, g.gamma_rho))
                }
                _ => None,
            };
            Plant::Backstepping {
                law,
                lambda: g.lambda,
                engine: Backstepping::new(n, q, g, Scaling::Exponential)?,
                lyapunov,
            }
        } else {
            Plant::Open
        };
        Ok((
            ClosedLoop {
                model: &s.model,
                plant,
                n,
                q,
            },
            names,
        ))
    }

    /// Augmented vector field at `(t, y)` on the smooth piece containing
    /// `branch`.
    fn rhs(&self, t: f64, branch: f64, y: &[f64], dy: &mut [f64], diag: bool) -> Result<Stage> {
        let (n, q) = (self.n, self.q);
        let x = &y[..n];
        let th = &y[n..n + q];
        let aux = y[n + q];
        match &self.plant {
            Plant::Open => {
                self.model.plant_rhs(t, branch, x, 0.0, &mut dy[..n]);
                dy[n..].iter_mut().for_each(|v| *v = 0.0);
                Ok(Stage {
                    u: 0.0,
                    mu: 1.0,
                    diag: Vec::new(),
                })
            }
            Plant::Scalar(design, g) => {
                let st = ScalarState {
                    t,
                    x: x[0],
                    a_hat: th[0],
                    xi: aux,
                };
                let o = scalar_law(*design, &st, g)?;
                self.model.plant_rhs(t, branch, x, o.u, &mut dy[..n]);
                dy[n] = o.a_hat_dot;
                dy[n + 1] = o.xi_dot;
                let mu = st.mu(g.lambda);
                Ok(Stage {
                    u: o.u,
                    mu,
                    diag: if diag { vec![mu * x[0], o.a_hat_dot, o.xi_dot] } else { Vec::new() },
                })
            }
            Plant::Backstepping {
                law,
                engine,
                lambda,
                lyapunov,
            } => {
                let mu = (lambda * t).exp();
                let state = AdaptiveState {
                    theta_hat: th.to_vec(),
                    rho_hat: aux,
                    xi: aux,
                };
                let (u, th_dot, aux_dot, eval, ngain) = match law {
                    Law::Theorem1 => {
                        let o = engine.control_theorem1(self.model, x, &state, mu)?;
                        (o.u, o.theta_hat_dot, o.rho_hat_dot, o.eval, None)
                    }
                    Law::Theorem2 => {
                        let o = engine.control_theorem2(self.model, x, &state, mu)?;
                        (o.u, o.theta_hat_dot, o.xi_dot, o.eval, Some(o.nussbaum_gain))
                    }
                };
                self.model.plant_rhs(t, branch, x, u, &mut dy[..n]);
                dy[n..n + q].copy_from_slice(&th_dot);
                dy[n + q] = aux_dot;
                let mut d = Vec::new();
                if diag {
                    d.push(eval.kappa);
                    d.extend(eval.layers.iter().map(|l| l.zeta));
                    d.extend(eval.layers.iter().map(|l| l.s));
                    d.push(eval.psi);
                    d.push(eval.max_residual());
                    d.push(self.model.parameters_on_branch(t, branch).1);
                    if let Some(gn) = ngain {
                        d.push(gn);
                    }
                    if let Some((h, inv, gr)) = lyapunov {
                        d.push(lyapunov_theorem1(&eval.s(), th, aux, &h.ell_theta, h.ell_b, inv, *gr));
                    }
                }
                Ok(Stage { u, mu, diag: d })
            }
        }
    }
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

const MAX_SPLIT_DEPTH: u32 = 30;

impl Rk4 {
    fn new(dim: usize) -> Self {
        Rk4 {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    /// One classical step of size `h` from `t`; `k1` may be supplied.
    fn step(&mut self, cl: &ClosedLoop, t: f64, h: f64, branch: f64, y: &[f64], k1: Option<&[f64]>) -> Result<Vec<f64>> {
        let dim = y.len();
        let [k1s, k2, k3, k4] = &mut self.k;
        match k1 {
            Some(v) => k1s.copy_from_slice(v),
            None => {
                cl.rhs(t, branch, y, k1s, false)?;
            }
        }
        let tmp = &mut self.tmp;
        let mut stage = |c: f64, from: &[f64], out: &mut [f64]| -> Result<()> {
            for i in 0..dim {
                tmp[i] = y[i] + c * h * from[i];
            }
            cl.rhs(t + c * h, branch, tmp, out, false).map(|_| ())
        };
        stage(0.5, k1s, k2)?;
        stage(0.5, k2, k3)?;
        stage(1.0, k3, k4)?;
        Ok((0..dim)
            .map(|i| y[i] + h / 6.0 * (k1s[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn controlled(&mut self, cl: &ClosedLoop, t0: f64, t1: f64, branch: f64, y: &[f64], k1: &[f64], tol: f64) -> Result<Vec<f64>> {
        self.split(cl, t0, t1, branch, y, Some(k1), tol, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn split(
        &mut self,
        cl: &ClosedLoop,
        t0: f64,
        t1: f64,
        branch: f64,
        y: &[f64],
        k1: Option<&[f64]>,
        tol: f64,
        depth: u32,
    ) -> Result<Vec<f64>> {
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        let full = self.step(cl, t0, h, branch, y, k1);
        let first_k1 = self.k[0].clone();
        let half = self
            .step(cl, t0, 0.5 * h, branch, y, Some(&first_k1))
            .and_then(|a| self.step(cl, tm, 0.5 * h, branch, &a, None));
        if let (Ok(f), Ok(hv)) = (&full, &half) {
            let err = f
                .iter()
                .zip(hv)
                .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                .fold(0.0, f64::max);
            if err <= tol || depth >= MAX_SPLIT_DEPTH {
                return half;
            }
        } else if depth >= MAX_SPLIT_DEPTH {
            return half;
        }
        let a = self.split(cl, t0, tm, branch, y, Some(&first_k1), tol, depth + 1)?;
        self.split(cl, tm, t1, branch, &a, None, tol, depth + 1)
    }
}

/// Integrates the scenario. Invalid scenarios are rejected; failures during
/// the run end it early and are reported in [`Trajectory::status`].
pub fn simulate(scenario: &Scenario) -> Result<Trajectory> {
    scenario.validate()?;
    let (cl, names) = ClosedLoop::new(scenario)?;
    let (n, q) = (cl.n, cl.q);
    let dim = n + q + 1;
    let grid = time_grid(
        scenario.horizon,
        scenario.step,
        &scenario.model.breakpoints().within(scenario.horizon),
    );
    let mut tr = Trajectory::empty(scenario, names);

    let mut y = Vec::with_capacity(dim);
    y.extend(&scenario.initial.x);
    y.extend(&scenario.initial.theta_hat);
    y.push(scenario.aux0());

    let record = |tr: &mut Trajectory, t: f64, y: &[f64], st: &Stage| {
        tr.t.push(t);
        tr.x.push(y[..n].to_vec());
        tr.theta_hat.push(y[n..n + q].to_vec());
        tr.aux.push(y[n + q]);
        tr.u.push(st.u);
        tr.mu.push(st.mu);
        tr.diagnostics.push(st.diag.clone());
    };

    let mut k1 = vec![0.0; dim];
    let mut rk = Rk4::new(dim);
    let steps = grid.len() - 1;
    for k in 0..steps {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let mid = 0.5 * (t0 + t1);
        let s1 = match cl.rhs(t0, mid, &y, &mut k1, true) {
            Ok(s) => s,
            Err(e) => {
                tr.status = RunStatus::from_error(t0, e);
                return Ok(tr);
            }
        };
        if k % scenario.record_stride == 0 {
            record(&mut tr, t0, &y, &s1);
        }
        let res = match scenario.local_tolerance {
            None => rk.step(&cl, t0, t1 - t0, mid, &y, Some(&k1)),
            Some(tol) => rk.controlled(&cl, t0, t1, mid, &y, &k1, tol),
        };
        match res {
            Ok(next) => y = next,
            Err(e) => {
                tr.status = RunStatus::from_error(t0, e);
                return Ok(tr);
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite() || v.abs() > scenario.divergence_bound) {
            tr.status = RunStatus::Diverged {
                t: t1,
                reason: format!("component {i} of the augmented state reached {}", y[i]),
            };
            return Ok(tr);
        }
    }
    let t_end = grid[steps];
    let branch = if steps > 0 { 0.5 * (grid[steps - 1] + t_end) } else { t_end };
    match cl.rhs(t_end, branch, &y, &mut k1, true) {
        Ok(s) => record(&mut tr, t_end, &y, &s),
        Err(e) => tr.status = RunStatus::from_error(t_end, e),
    }
    Ok(tr)
}

/// Runs independent scenarios on parallel workers; results keep the input
/// order.
pub fn simulate_batch(scenarios: &[Scenario]) -> Vec<Result<Trajectory>> {
    scenarios.par_iter().map(simulate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Breakpoints, Monomial, Polynomial, Signal};
    use std::sync::Arc;

    fn decay_model() -> SystemModel {
        // ẋ = −x written as φ = x, θ = −1
        SystemModel::new(
            "decay",
            1,
            1,
            vec![Arc::new(Polynomial::new(vec![vec![Monomial::new(1.0, &[1])]]))],
            Signal::constant(vec![-1.0]),
            Signal::constant(1.0),
            Breakpoints::None,
        )
        .unwrap()
    }

    fn init1() -> InitialState {
        InitialState {
            x: vec![1.0],
            theta_hat: vec![0.0],
            rho_hat: 1.0,
            xi: 0.0,
        }
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let mut s = Scenario::new("decay", decay_model(), ControllerKind::OpenLoop, init1());
        s.horizon = 1.0;
        s.step = 0.01;
        let tr = simulate(&s).unwrap();
        assert!(tr.status.is_completed());
        assert_eq!(tr.len(), 101);
        let xe = tr.x.last().unwrap()[0];
        assert!((xe - (-1f64).exp()).abs() < 1e-8, "{xe}");
    }

    #[test]
    fn grid_contains_breakpoints() {
        let bp = [0.25, 1.0 / 3.0, 0.5 + 1e-12];
        let g = time_grid(1.0, 0.1, &bp);
        assert!(g.contains(&0.25) && g.contains(&(1.0 / 3.0)) && g.contains(&(0.5 + 1e-12)));
        assert!(!g.contains(&0.5));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let mut s = Scenario::new("decay", decay_model(), ControllerKind::ScalarA, init1());
        s.horizon = 0.3;
        s.step = 0.01;
        let tr = simulate(&s).unwrap();
        let mut buf = Vec::new();
        tr.write_json(&mut buf).unwrap();
        assert_eq!(Trajectory::read_json(&buf[..]).unwrap(), tr);
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let back = Trajectory::read_csv(&csv[..]).unwrap();
        assert_eq!(back.t, tr.t);
        assert_eq!(back.x, tr.x);
        assert_eq!(back.diagnostics, tr.diagnostics);
    }

    #[test]
    fn empty_trajectory_writes_header_only() {
        let s = Scenario::new("decay", decay_model(), ControllerKind::OpenLoop, init1());
        let tr = Trajectory::empty(&s, vec![]);
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.trim(), "t,x_1,u,theta_hat_1,aux,mu");
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = Scenario::new("decay", decay_model(), ControllerKind::OpenLoop, init1());
        s.step = 0.0;
        assert!(simulate(&s).is_err());
        let mut s = Scenario::new("decay", decay_model(), ControllerKind::Theorem1, init1());
        s.gains.k[0] = -1.0;
        assert!(simulate(&s).is_err());
    }

    #[test]
    fn controller_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(ControllerKind::from_name(k.name()).unwrap(), k);
        }
        assert!(ControllerKind::from_name("nope").is_err());
    }
}
