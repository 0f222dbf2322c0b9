//! Adaptive backstepping with exponential state scaling.
//!
//! Error coordinates `z_1 = x_1`, `z_i = x_i − α_{i−1}` are scaled by
//! `μ = e^{λt}` into `s_i = μ z_i`. Every virtual law needs partial
//! derivatives of the previous one, and the damping gains `ζ_i`, `κ` need
//! the regression matrices `W_i` with `w_i = W_iᵀ z̄_i`, which are themselves
//! line integrals of Jacobians along the ray from the origin to `z̄_i`.
//!
//! [`Backstepping::evaluate`] computes all of this in one sweep. Each layer
//! is evaluated at the Gauss–Legendre nodes `r_b z̄` of the ray and at the
//! top point `z̄`, on truncated Taylor jets in the displacement of the top
//! point, of `θ̂` and of `μ`. The ray integral for `W_i` at the top point is
//! the plain Gauss–Legendre rule; at an interior node `r_a z̄` it is the
//! integral of the interpolant of the same samples over `[0, r_a]`. The jets
//! carry exactly the derivative orders the next layers consume, so the
//! partials of `α_i` with respect to `x`, `θ̂` and `μ` are exact derivatives
//! of the computed `α_i`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{ensure_finite, Error, Result};
use crate::jet::{Jet, JetSpace};
use crate::model::SystemModel;
use crate::nussbaum::NussbaumSpec;
use crate::quadrature::GaussLegendre;

/// Whether the exponential scaling is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scaling {
    /// `μ = e^{λt}` enters as an argument of every law.
    Exponential,
    /// `μ ≡ 1`, `s = z` and no `μ` derivatives: the plain adaptive
    /// backstepping design.
    Unscaled,
}

#[derive(Debug, Clone)]
pub struct GainConfig {
    pub k: Vec<f64>,
    pub lambda: f64,
    pub delta_theta: f64,
    pub epsilon_psi: f64,
    /// Adaptation gain, `q × q` symmetric positive definite.
    pub gamma: DMatrix<f64>,
    pub gamma_rho: f64,
    /// Known sign of the control coefficient (Theorem 1 only).
    pub sign_b: f64,
    pub nussbaum: NussbaumSpec,
    pub quadrature_nodes: usize,
    /// Largest accepted `‖w_i − W_iᵀ z̄_i‖` and `|ψ − ψ̄ᵀ z̄_n|`.
    pub residual_tolerance: f64,
}

impl GainConfig {
    pub const DEFAULT_EPSILON_PSI: f64 = 1.0;
    pub const DEFAULT_GAMMA_RHO: f64 = 1.0;
    pub const DEFAULT_NODES: usize = 8;
    pub const DEFAULT_TOLERANCE: f64 = 1e-8;

    /// Default gains for an `n`-state, `q`-parameter plant.
    pub fn new(n: usize, q: usize) -> Self {
        GainConfig {
            k: vec![1.0; n],
            lambda: 0.0,
            delta_theta: 0.0,
            epsilon_psi: Self::DEFAULT_EPSILON_PSI,
            gamma: DMatrix::identity(q, q),
            gamma_rho: Self::DEFAULT_GAMMA_RHO,
            sign_b: 1.0,
            nussbaum: NussbaumSpec::default(),
            quadrature_nodes: Self::DEFAULT_NODES,
            residual_tolerance: Self::DEFAULT_TOLERANCE,
        }
    }

    pub fn validate(&self, n: usize, q: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k.len() != n {
            return Err(Error::DimensionMismatch {
                what: "gain list k",
                expected: n,
                got: self.k.len(),
            });
        }
        if let Some((i, k)) = self.k.iter().enumerate().find(|(_, &k)| !(k > 0.0 && k.is_finite())) {
            return bad(format!("k_{} = {k} must be positive", i + 1));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        if !(self.delta_theta >= 0.0 && self.delta_theta.is_finite()) {
            return bad(format!("delta_theta = {} must be non-negative", self.delta_theta));
        }
        if !(self.epsilon_psi > 0.0 && self.epsilon_psi.is_finite()) {
            return bad(format!("epsilon_psi = {} must be positive", self.epsilon_psi));
        }
        if !(self.gamma_rho > 0.0 && self.gamma_rho.is_finite()) {
            return bad(format!("gamma_rho = {} must be positive", self.gamma_rho));
        }
        if self.sign_b != 1.0 && self.sign_b != -1.0 {
            return bad(format!("sign_b = {} must be +1 or -1", self.sign_b));
        }
        if self.gamma.nrows() != q || self.gamma.ncols() != q {
            return bad(format!(
                "Gamma is {}x{}, expected {q}x{q}",
                self.gamma.nrows(),
                self.gamma.ncols()
            ));
        }
        let asym = (&self.gamma - self.gamma.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.gamma.amax()) {
            return bad("Gamma must be symmetric".into());
        }
        if self.gamma.clone().cholesky().is_none() {
            return bad("Gamma must be positive definite".into());
        }
        if self.quadrature_nodes == 0 {
            return bad("at least one quadrature node is required".into());
        }
        if !(self.nussbaum.xi_max > 0.0) {
            return bad("Nussbaum xi_max must be positive".into());
        }
        if !(self.residual_tolerance > 0.0) {
            return bad("residual tolerance must be positive".into());
        }
        Ok(())
    }
}

/// Parameter estimates carried by the controller.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptiveState {
    pub theta_hat: Vec<f64>,
    /// Estimate of `1/ℓ_b` (Theorem 1).
    pub rho_hat: f64,
    /// Nussbaum argument (Theorem 2).
    pub xi: f64,
}

/// Which of the two main laws closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Law {
    /// Known control direction: `u = ρ̂ ū`, `ū = −κ z_n`.
    Theorem1,
    /// Unknown control direction: `u = N(ξ) ū`, `ū = κ z_n`.
    Theorem2,
}

/// Initialization rules of the adaptive laws.
pub fn check_initial_state(state: &AdaptiveState, gains: &GainConfig, law: Law) -> Result<()> {
    if let Some(v) = state.theta_hat.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Config(format!("theta_hat(0) must be elementwise non-negative, found {v}")));
    }
    match law {
        Law::Theorem1 => {
            if !(state.rho_hat * gains.sign_b > 0.0) {
                return Err(Error::Config(format!(
                    "rho_hat(0) = {} must have the sign of b ({})",
                    state.rho_hat, gains.sign_b
                )));
            }
        }
        Law::Theorem2 => {
            if !(state.xi >= 0.0) {
                return Err(Error::Config(format!("xi(0) = {} must be non-negative", state.xi)));
            }
            gains.nussbaum.eval(state.xi)?;
        }
    }
    Ok(())
}

/// Layer-wise quantities at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub z: f64,
    pub s: f64,
    /// `α_i`; zero for the last layer, which has no virtual law.
    pub alpha: f64,
    pub w: Vec<f64>,
    pub tau: Vec<f64>,
    /// `W_i`, `i × q`.
    pub big_w: DMatrix<f64>,
    pub zeta: f64,
    /// `∂α_i/∂x_j` for `j ≤ i`; empty for the last layer.
    pub dalpha_dx: Vec<f64>,
    pub dalpha_dtheta: Vec<f64>,
    pub dalpha_dmu: f64,
    /// `‖w_i − W_iᵀ z̄_i‖`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mu: f64,
    pub layers: Vec<LayerState>,
    pub psi: f64,
    pub psi_bar: Vec<f64>,
    pub psi_residual: f64,
    pub kappa: f64,
}

impl Evaluation {
    pub fn z_n(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.z)
    }

    pub fn s_n(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.s)
    }

    pub fn tau_n(&self) -> &[f64] {
        self.layers.last().map_or(&[], |l| &l.tau)
    }

    pub fn s(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.s).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(self.psi_residual, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Output {
    pub u: f64,
    pub ubar: f64,
    pub rho_hat_dot: f64,
    pub theta_hat_dot: Vec<f64>,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Output {
    pub u: f64,
    pub ubar: f64,
    pub xi_dot: f64,
    pub nussbaum_gain: f64,
    pub theta_hat_dot: Vec<f64>,
    pub eval: Evaluation,
}

/// `ζ_i = λ + ½((n+1−i)δ + 1/ε + δ|W_i|_F²)`.
pub fn compute_zeta(i: usize, n: usize, w_frobenius_sq: f64, gains: &GainConfig) -> Result<f64> {
    if !(gains.epsilon_psi > 0.0) {
        return Err(Error::Config("epsilon_psi must be positive".into()));
    }
    let d = gains.delta_theta;
    Ok(gains.lambda + 0.5 * ((n + 1 - i) as f64 * d + 1.0 / gains.epsilon_psi + d * w_frobenius_sq))
}

/// `κ = k_n + λ + ½(δ(|W_n|_F² + 1) + 1/ε + ε|ψ̄|²)`.
pub fn compute_kappa(k_n: f64, w_frobenius_sq: f64, psi_bar: &[f64], gains: &GainConfig) -> f64 {
    let eps = gains.epsilon_psi;
    let pb: f64 = psi_bar.iter().map(|v| v * v).sum();
    k_n + gains.lambda + 0.5 * (gains.delta_theta * (w_frobenius_sq + 1.0) + 1.0 / eps + eps * pb)
}

/// Result of [`factorize_line_integral`].
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// `G` with `g(z̄) ≈ Gᵀ z̄`; `i × m`.
    pub g: DMatrix<f64>,
    pub value: Vec<f64>,
    pub residual: f64,
}

/// `Gᵀ = ∫₀¹ J_g(σ z̄) dσ` by Gauss–Legendre quadrature, with `J_g` from
/// first-order sensitivity propagation.
///
/// `g` must vanish at the origin (checked to `1e−10`).
pub fn factorize_line_integral<F>(g: F, z: &[f64], nodes: usize) -> Result<Factorization>
where
    F: Fn(&[Jet]) -> Vec<Jet>,
{
    ensure_finite("factorization point", z)?;
    let i = z.len();
    let space = JetSpace::new(i, 1);
    let at = |scale: f64| -> Vec<Jet> {
        let vars: Vec<Jet> = z
            .iter()
            .enumerate()
            .map(|(j, &zj)| Jet::variable(&space, 1, j, scale * zj))
            .collect();
        g(&vars)
    };
    let origin = at(0.0);
    let g0 = origin.iter().map(|v| v.value() * v.value()).sum::<f64>().sqrt();
    if !(g0 <= 1e-10) {
        return Err(Error::FactorizationInapplicable(g0));
    }
    let m = origin.len();
    let rule = GaussLegendre::new(nodes);
    let mut big = DMatrix::zeros(i, m);
    for (&sigma, &wt) in rule.nodes.iter().zip(&rule.weights) {
        for (p, gp) in at(sigma).iter().enumerate() {
            for (j, d) in gp.gradient().into_iter().enumerate() {
                big[(j, p)] += wt * d;
            }
        }
    }
    let value: Vec<f64> = at(1.0).iter().map(|v| v.value()).collect();
    let mut residual = 0.0;
    for (p, v) in value.iter().enumerate() {
        let fit: f64 = (0..i).map(|j| big[(j, p)] * z[j]).sum();
        residual += (v - fit) * (v - fit);
    }
    Ok(Factorization {
        g: big,
        value,
        residual: residual.sqrt(),
    })
}

/// Quantities of the current and earlier layers at one point of the ray.
struct Node {
    r: f64,
    x: Vec<Jet>,
    z: Vec<Jet>,
    s: Vec<Jet>,
    phi: Vec<Vec<Jet>>,
    tau: Vec<Jet>,
    alpha: Option<Jet>,
    // partials of the latest α with respect to x_j, θ̂ and μ
    p: Vec<Jet>,
    t_hist: Vec<Vec<Jet>>,
    m: Option<Jet>,
}

/// The recursive design for a fixed plant dimension and gain set.
#[derive(Debug, Clone)]
pub struct Backstepping {
    n: usize,
    q: usize,
    gains: GainConfig,
    scaling: Scaling,
    weights: Vec<f64>,
    radii: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
    space: Arc<JetSpace>,
}

impl Backstepping {
    pub fn new(n: usize, q: usize, gains: GainConfig, scaling: Scaling) -> Result<Self> {
        gains.validate(n, q)?;
        let rule = GaussLegendre::new(gains.quadrature_nodes);
        let mut radii = rule.nodes.clone();
        radii.push(1.0);
        let mut cumulative = rule.cumulative_matrix(&rule.nodes);
        cumulative.push(rule.weights.clone());
        let nvars = n + q + usize::from(scaling == Scaling::Exponential);
        let max_order = if n == 1 { 1 } else { 2 * n - 1 };
        Ok(Backstepping {
            n,
            q,
            gains,
            scaling,
            weights: rule.weights,
            radii,
            cumulative,
            space: JetSpace::new(nvars, max_order),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn gains(&self) -> &GainConfig {
        &self.gains
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    /// Jet order used for the regressor-level quantities of layer `k`.
    fn level(&self, k: usize) -> usize {
        if k == self.n {
            1
        } else {
            2 * (self.n - k) + 1
        }
    }

    fn mu_var(&self) -> usize {
        self.n + self.q
    }

    /// All layer quantities, `ψ`, `ψ̄` and `κ` at `(x, θ̂, μ)`.
    ///
    /// In [`Scaling::Unscaled`] mode `mu` is ignored and taken as 1.
    pub fn evaluate(&self, model: &SystemModel, x: &[f64], theta_hat: &[f64], mu: f64) -> Result<Evaluation> {
        let (n, q) = (self.n, self.q);
        if model.n() != n || model.q() != q {
            return Err(Error::DimensionMismatch {
                what: "model dimensions",
                expected: n * 1000 + q,
                got: model.n() * 1000 + model.q(),
            });
        }
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: n,
                got: x.len(),
            });
        }
        if theta_hat.len() != q {
            return Err(Error::DimensionMismatch {
                what: "theta_hat",
                expected: q,
                got: theta_hat.len(),
            });
        }
        ensure_finite("state", x)?;
        ensure_finite("theta_hat", theta_hat)?;
        let scaled = self.scaling == Scaling::Exponential;
        let mu = if scaled { mu } else { 1.0 };
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::NonFinite(format!("scaling factor mu = {mu}")));
        }

        let g = &self.gains;
        let sp = &self.space;
        let top_order = sp.max_order();
        let lam = g.lambda;
        let delta = g.delta_theta;
        let gam: Vec<Vec<f64>> = (0..q).map(|a| (0..q).map(|b| g.gamma[(a, b)]).collect()).collect();

        let th: Vec<Jet> = (0..q)
            .map(|p| Jet::variable(sp, top_order, n + p, theta_hat[p]))
            .collect();
        let mu_j = if scaled {
            Jet::variable(sp, top_order, self.mu_var(), mu)
        } else {
            Jet::constant(sp, top_order, 1.0)
        };
        let zero = |order: usize| Jet::constant(sp, order, 0.0);
        let dot = |a: &[Jet], b: &[Jet], order: usize| -> Jet {
            a.iter().zip(b).fold(zero(order), |acc, (u, v)| acc + u * v)
        };
        let gamma_times = |v: &[Jet], order: usize| -> Vec<Jet> {
            (0..q)
                .map(|a| (0..q).fold(zero(order), |acc, b| acc + &v[b] * gam[a][b]))
                .collect()
        };

        let mut nodes: Vec<Node> = self
            .radii
            .iter()
            .map(|&r| Node {
                r,
                x: Vec::with_capacity(n),
                z: Vec::with_capacity(n),
                s: Vec::with_capacity(n),
                phi: Vec::with_capacity(n),
                tau: vec![zero(top_order); q],
                alpha: None,
                p: Vec::new(),
                t_hist: Vec::new(),
                m: None,
            })
            .collect();
        let top = nodes.len() - 1;

        let mut layers = Vec::with_capacity(n);
        let mut z_top = vec![0.0; n];
        let mut psi = 0.0;
        let mut psi_bar = vec![0.0; n];
        let mut psi_residual = 0.0;
        let mut kappa = 0.0;

        for k in 1..=n {
            let lv = self.level(k);
            let alpha_prev_top = nodes[top].alpha.as_ref().map_or(0.0, Jet::value);
            z_top[k - 1] = x[k - 1] - alpha_prev_top;

            // regressor-level quantities at every node
            let mut w_nodes: Vec<Vec<Jet>> = Vec::with_capacity(nodes.len());
            for node in nodes.iter_mut() {
                let zk = Jet::variable(sp, lv, k - 1, z_top[k - 1]) * node.r;
                let xk = match &node.alpha {
                    Some(a) => &zk + a,
                    None => zk.clone(),
                };
                let sk = &mu_j * &zk;
                node.x.push(xk);
                node.z.push(zk);
                node.s.push(sk);
                let xs: Vec<Jet> = node.x.iter().map(|v| v.truncate(lv)).collect();
                let phi = model.eval_regressor_jet(k, &xs);
                if phi.len() != q {
                    return Err(Error::DimensionMismatch {
                        what: "regressor output",
                        expected: q,
                        got: phi.len(),
                    });
                }
                let mut w = phi.clone();
                for (j, pj) in node.p.iter().enumerate() {
                    for (wp, fp) in w.iter_mut().zip(&node.phi[j]) {
                        *wp = &*wp - pj * fp;
                    }
                }
                node.phi.push(phi);
                let muws = &mu_j * &node.s[k - 1];
                for (tp, wp) in node.tau.iter_mut().zip(&w) {
                    *tp = &*tp + wp * &muws;
                }
                w_nodes.push(w);
            }

            // Jacobians along the ray, J(b)[j][p] = ∂w_k[p]/∂z_j at r_b z̄
            let jac: Vec<Vec<Vec<Jet>>> = w_nodes
                .iter()
                .zip(&self.radii)
                .take(top)
                .map(|(w, &r)| {
                    (0..k)
                        .map(|j| w.iter().map(|wp| wp.derivative(j).scale(1.0 / r)).collect())
                        .collect()
                })
                .collect();

            // W_k at the top point: the quadrature rule itself
            let w_top: Vec<f64> = w_nodes[top].iter().map(Jet::value).collect();
            let mut big_w = DMatrix::zeros(k, q);
            for (b, jb) in jac.iter().enumerate() {
                for j in 0..k {
                    for p in 0..q {
                        big_w[(j, p)] += self.weights[b] * jb[j][p].value();
                    }
                }
            }
            let mut residual = 0.0;
            for p in 0..q {
                let fit: f64 = (0..k).map(|j| big_w[(j, p)] * z_top[j]).sum();
                residual += (w_top[p] - fit).powi(2);
            }
            let residual = residual.sqrt();
            let wf_sq_top = big_w.iter().map(|v| v * v).sum::<f64>();
            let zeta_top = compute_zeta(k, n, wf_sq_top, g)?;
            let tau_top: Vec<f64> = nodes[top].tau.iter().map(Jet::value).collect();
            let s_top = z_top[k - 1] * mu;

            if k == n {
                // ψ at every node, then its factorization
                let mut psi_nodes = Vec::with_capacity(nodes.len());
                for (node, w) in nodes.iter().zip(&w_nodes) {
                    let mut v = dot(w, &th, 1);
                    if n >= 2 {
                        v = v + &node.z[n - 2];
                        for i in 0..n - 1 {
                            v = v - &node.p[i] * &node.x[i + 1];
                        }
                        let t_last = &node.t_hist[n - 2];
                        v = v - dot(t_last, &gamma_times(&node.tau, 1), 1);
                        if let (true, Some(m)) = (scaled, &node.m) {
                            v = v - m * &mu_j * lam;
                        }
                        let gw = gamma_times(w, 1);
                        for i in 2..n {
                            v = v - dot(&node.t_hist[i - 2], &gw, 1) * &mu_j * &node.s[i - 1];
                        }
                    }
                    psi_nodes.push(v);
                }
                psi = psi_nodes[top].value();
                for (b, pb) in psi_nodes.iter().take(top).enumerate() {
                    for (j, slot) in psi_bar.iter_mut().enumerate() {
                        *slot += self.weights[b] * pb.derivative(j).value() / self.radii[b];
                    }
                }
                let fit: f64 = psi_bar.iter().zip(&z_top).map(|(a, b)| a * b).sum();
                psi_residual = (psi - fit).abs();
                kappa = compute_kappa(g.k[n - 1], wf_sq_top, &psi_bar, g);
                layers.push(LayerState {
                    z: z_top[k - 1],
                    s: s_top,
                    alpha: 0.0,
                    w: w_top,
                    tau: tau_top,
                    big_w,
                    zeta: zeta_top,
                    dalpha_dx: Vec::new(),
                    dalpha_dtheta: Vec::new(),
                    dalpha_dmu: 0.0,
                    residual,
                });
                break;
            }

            // virtual law α_k at every node
            let ord = lv - 1;
            let kk = g.k[k - 1];
            let c_zeta = lam + 0.5 * ((n + 1 - k) as f64 * delta + 1.0 / g.epsilon_psi);
            for (a, node) in nodes.iter_mut().enumerate() {
                let row = &self.cumulative[a];
                let inv_r = 1.0 / node.r;
                let mut wf = zero(ord);
                for j in 0..k {
                    for p in 0..q {
                        let mut e = zero(ord);
                        for (b, jb) in jac.iter().enumerate() {
                            e.add_scaled(row[b], &jb[j][p]);
                        }
                        let e = e * inv_r;
                        wf = wf + &e * &e;
                    }
                }
                let zeta = wf * (0.5 * delta) + c_zeta;
                let w = &w_nodes[a];
                let mut alpha = -((zeta + kk) * &node.z[k - 1]) - dot(w, &th, ord);
                if k >= 2 {
                    alpha = alpha - &node.z[k - 2];
                    let t_prev = &node.t_hist[k - 2];
                    alpha = alpha + dot(t_prev, &gamma_times(&node.tau, ord), ord);
                    let gw = gamma_times(w, ord);
                    for j in 2..k {
                        alpha = alpha + dot(&node.t_hist[j - 2], &gw, ord) * &mu_j * &node.s[j - 1];
                    }
                    for j in 0..k - 1 {
                        alpha = alpha + &node.p[j] * &node.x[j + 1];
                    }
                    if let (true, Some(m)) = (scaled, &node.m) {
                        alpha = alpha + m * &mu_j * lam;
                    }
                }

                // partials with respect to x, θ̂, μ by back-substitution
                // through the triangular map (h, η, ν) -> x
                let mut p = vec![zero(ord.saturating_sub(1)); k];
                for j in (0..k).rev() {
                    let mut v = alpha.derivative(j);
                    for l in j + 1..k {
                        v = v - &p[l] * node.x[l].derivative(j);
                    }
                    p[j] = v * inv_r;
                }
                let sub = |var: usize| -> Jet {
                    let mut v = alpha.derivative(var);
                    for (j, pj) in p.iter().enumerate() {
                        v = v - pj * node.x[j].derivative(var);
                    }
                    v
                };
                let t: Vec<Jet> = (0..q).map(|pp| sub(n + pp)).collect();
                let m = if scaled { Some(sub(self.mu_var())) } else { None };
                node.p = p;
                node.t_hist.push(t);
                node.m = m;
                node.alpha = Some(alpha);
            }

            let tn = &nodes[top];
            let alpha_top = tn.alpha.as_ref().map_or(0.0, Jet::value);
            layers.push(LayerState {
                z: z_top[k - 1],
                s: s_top,
                alpha: alpha_top,
                w: w_top,
                tau: tau_top,
                big_w,
                zeta: zeta_top,
                dalpha_dx: tn.p.iter().map(Jet::value).collect(),
                dalpha_dtheta: tn.t_hist[k - 1].iter().map(Jet::value).collect(),
                dalpha_dmu: tn.m.as_ref().map_or(0.0, Jet::value),
                residual,
            });
        }

        let eval = Evaluation {
            mu,
            layers,
            psi,
            psi_bar,
            psi_residual,
            kappa,
        };
        self.check(&eval, x)?;
        Ok(eval)
    }

    fn check(&self, eval: &Evaluation, x: &[f64]) -> Result<()> {
        let tol = self.gains.residual_tolerance;
        for (i, l) in eval.layers.iter().enumerate() {
            if !(l.residual <= tol) {
                return Err(Error::FactorizationResidual {
                    what: format!("w_{}", i + 1),
                    residual: l.residual,
                    tolerance: tol,
                });
            }
            let mut vals = vec![l.alpha, l.zeta];
            vals.extend(&l.w);
            vals.extend(&l.tau);
            ensure_finite("layer quantities", &vals)?;
        }
        if !(eval.psi_residual <= tol) {
            return Err(Error::FactorizationResidual {
                what: "psi".into(),
                residual: eval.psi_residual,
                tolerance: tol,
            });
        }
        ensure_finite("kappa", &[eval.kappa, eval.psi])?;
        if x.iter().all(|&v| v == 0.0) && eval.layers.iter().any(|l| l.alpha != 0.0) {
            return Err(Error::Config("virtual law does not vanish at the origin".into()));
        }
        Ok(())
    }

    /// Known control direction: `ū = −κ z_n`, `u = ρ̂ ū`,
    /// `ρ̂̇ = −γ_ρ sgn(ℓ_b) μ s_n ū`, `θ̂̇ = Γ τ_n`.
    pub fn control_theorem1(&self, model: &SystemModel, x: &[f64], state: &AdaptiveState, mu: f64) -> Result<Theorem1Output> {
        let eval = self.evaluate(model, x, &state.theta_hat, mu)?;
        let ubar = -eval.kappa * eval.z_n();
        let u = state.rho_hat * ubar;
        let rho_hat_dot = -self.gains.gamma_rho * self.gains.sign_b * eval.mu * eval.s_n() * ubar;
        let theta_hat_dot = self.gamma_tau(&eval);
        Ok(Theorem1Output {
            u,
            ubar,
            rho_hat_dot,
            theta_hat_dot,
            eval,
        })
    }

    /// Unknown control direction: `ū = κ z_n`, `ξ̇ = μ s_n ū`,
    /// `u = N(ξ) ū`, `θ̂̇ = Γ τ_n`.
    pub fn control_theorem2(&self, model: &SystemModel, x: &[f64], state: &AdaptiveState, mu: f64) -> Result<Theorem2Output> {
        let nussbaum_gain = self.gains.nussbaum.eval(state.xi)?;
        let eval = self.evaluate(model, x, &state.theta_hat, mu)?;
        let ubar = eval.kappa * eval.z_n();
        let xi_dot = eval.mu * eval.s_n() * ubar;
        let theta_hat_dot = self.gamma_tau(&eval);
        Ok(Theorem2Output {
            u: nussbaum_gain * ubar,
            ubar,
            xi_dot,
            nussbaum_gain,
            theta_hat_dot,
            eval,
        })
    }

    fn gamma_tau(&self, eval: &Evaluation) -> Vec<f64> {
        let tau = eval.tau_n();
        (0..self.q)
            .map(|a| (0..self.q).map(|b| self.gains.gamma[(a, b)] * tau[b]).sum())
            .collect()
    }
}

/// `V = ½‖s̄‖² + ½(ℓ_θ − θ̂)ᵀΓ⁻¹(ℓ_θ − θ̂) + |ℓ_b|/(2γ_ρ)·(1/ℓ_b − ρ̂)²`.
pub fn lyapunov_theorem1(
    s: &[f64],
    theta_hat: &[f64],
    rho_hat: f64,
    ell_theta: &[f64],
    ell_b: f64,
    gamma_inv: &DMatrix<f64>,
    gamma_rho: f64,
) -> f64 {
    let e: Vec<f64> = ell_theta.iter().zip(theta_hat).map(|(l, t)| l - t).collect();
    let mut quad = 0.0;
    for a in 0..e.len() {
        for b in 0..e.len() {
            quad += e[a] * gamma_inv[(a, b)] * e[b];
        }
    }
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let r = 1.0 / ell_b - rho_hat;
    0.5 * ss + 0.5 * quad + ell_b.abs() / (2.0 * gamma_rho) * r * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Breakpoints, Monomial, Polynomial, Signal};

    fn wing_rock_like() -> SystemModel {
        SystemModel::new(
            "wr",
            2,
            2,
            vec![
                Arc::new(Polynomial::zero(2)),
                Arc::new(Polynomial::new(vec![
                    vec![Monomial::new(1.0, &[1, 0])],
                    vec![Monomial::new(1.0, &[0, 1])],
                ])),
            ],
            Signal::constant(vec![-26.6667, 0.67485]),
            Signal::constant(-2.0),
            Breakpoints::None,
        )
        .unwrap()
    }

    fn wr_gains() -> GainConfig {
        GainConfig {
            lambda: 0.6,
            delta_theta: 0.6,
            gamma: DMatrix::identity(2, 2) * 0.001,
            sign_b: -1.0,
            ..GainConfig::new(2, 2)
        }
    }

    #[test]
    fn zeta_examples() {
        let g = wr_gains();
        assert!((compute_zeta(1, 2, 0.0, &g).unwrap() - 1.7).abs() < 1e-15);
        let g0 = GainConfig {
            delta_theta: 0.0,
            epsilon_psi: 4.0,
            lambda: 0.3,
            ..GainConfig::new(2, 2)
        };
        assert!((compute_zeta(1, 2, 123.0, &g0).unwrap() - (0.3 + 0.125)).abs() < 1e-15);
        let bad = GainConfig {
            epsilon_psi: 0.0,
            ..GainConfig::new(2, 2)
        };
        assert!(compute_zeta(1, 2, 0.0, &bad).is_err());
    }

    #[test]
    fn kappa_example() {
        let g = GainConfig::new(1, 1);
        assert_eq!(compute_kappa(1.0, 0.0, &[0.0], &g), 1.5);
        assert!(compute_kappa(1.0, 3.0, &[2.0, -1.0], &g) >= 1.0);
    }

    #[test]
    fn factorization_examples() {
        // linear map is reproduced exactly
        let f = factorize_line_integral(|z| vec![&z[0] * 2.0 - &z[1] * 3.0, z[1].clone()], &[0.7, -1.3], 8).unwrap();
        assert_eq!(f.g.shape(), (2, 2));
        assert!((f.g[(0, 0)] - 2.0).abs() < 1e-15 && (f.g[(1, 0)] + 3.0).abs() < 1e-15);
        assert!(f.residual < 1e-14);
        // g(z) = z² at 2 gives G = z = 2
        let f = factorize_line_integral(|z| vec![&z[0] * &z[0]], &[2.0], 8).unwrap();
        assert!((f.g[(0, 0)] - 2.0).abs() < 1e-14);
        // g(0) != 0
        let e = factorize_line_integral(|z| vec![&z[0] + 1.0], &[2.0], 8).unwrap_err();
        assert!(matches!(e, Error::FactorizationInapplicable(_)));
    }

    #[test]
    fn wing_rock_first_layer_is_linear() {
        let bs = Backstepping::new(2, 2, wr_gains(), Scaling::Exponential).unwrap();
        let m = wing_rock_like();
        let e = bs.evaluate(&m, &[-1.0, 2.5], &[0.0, 0.0], 1.0).unwrap();
        assert!((e.layers[0].zeta - 1.7).abs() < 1e-14);
        assert!((e.layers[0].alpha - 2.7).abs() < 1e-14);
        assert!((e.layers[0].dalpha_dx[0] + 2.7).abs() < 1e-14);
        assert_eq!(e.layers[0].dalpha_dtheta, vec![0.0, 0.0]);
        assert_eq!(e.layers[1].w, vec![-1.0, 2.5]);
        // W_2ᵀ = [[1, 0], [−2.7, 1]]
        let w = &e.layers[1].big_w;
        assert!((w[(0, 0)] - 1.0).abs() < 1e-14 && (w[(1, 0)]).abs() < 1e-14);
        assert!((w[(0, 1)] + 2.7).abs() < 1e-14 && (w[(1, 1)] - 1.0).abs() < 1e-14);
        // ψ̄ = [1 − 7.29, 2.7] at θ̂ = 0
        assert!((e.psi_bar[0] + 6.29).abs() < 1e-12);
        assert!((e.psi_bar[1] - 2.7).abs() < 1e-12);
        let kappa = 1.0 + 0.6 + 0.5 * (0.6 * (9.29 + 1.0) + 1.0 + 6.29f64.powi(2) + 2.7f64.powi(2));
        assert!((e.kappa - kappa).abs() < 1e-12);
    }

    #[test]
    fn origin_gives_zero_control() {
        let bs = Backstepping::new(2, 2, wr_gains(), Scaling::Exponential).unwrap();
        let st = AdaptiveState {
            theta_hat: vec![0.3, 0.1],
            rho_hat: -0.3,
            xi: 0.0,
        };
        let o = bs.control_theorem1(&wing_rock_like(), &[0.0, 0.0], &st, 2.0).unwrap();
        assert_eq!(o.u, 0.0);
        assert_eq!(o.rho_hat_dot, 0.0);
        assert_eq!(o.theta_hat_dot, vec![0.0, 0.0]);
        assert!(o.eval.psi_bar.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rho_update_forms_agree_and_have_sign_of_b() {
        let bs = Backstepping::new(2, 2, wr_gains(), Scaling::Exponential).unwrap();
        let st = AdaptiveState {
            theta_hat: vec![0.2, 0.5],
            rho_hat: -0.3,
            xi: 0.0,
        };
        let o = bs.control_theorem1(&wing_rock_like(), &[0.4, -1.1], &st, 1.7).unwrap();
        let alt = bs.gains().gamma_rho * bs.gains().sign_b * o.eval.kappa * o.eval.s_n().powi(2);
        assert!((o.rho_hat_dot - alt).abs() <= 1e-12 * alt.abs());
        assert!(o.rho_hat_dot <= 0.0);
    }

    #[test]
    fn theorem2_at_zero_argument_gives_zero_input() {
        let bs = Backstepping::new(2, 2, wr_gains(), Scaling::Exponential).unwrap();
        let st = AdaptiveState {
            theta_hat: vec![0.0, 0.0],
            rho_hat: 0.0,
            xi: 0.0,
        };
        let o = bs.control_theorem2(&wing_rock_like(), &[-1.0, 2.5], &st, 1.0).unwrap();
        assert_eq!(o.u, 0.0);
        assert!(o.ubar != 0.0);
        assert!(o.xi_dot >= 0.0);
    }

    #[test]
    fn config_rules() {
        let mut g = wr_gains();
        g.k[0] = -1.0;
        assert!(Backstepping::new(2, 2, g, Scaling::Exponential).is_err());
        let mut g = wr_gains();
        g.gamma[(0, 1)] = 0.5;
        assert!(g.validate(2, 2).is_err());
        let mut g = wr_gains();
        g.gamma[(0, 0)] = -1.0;
        assert!(g.validate(2, 2).is_err());
        let g = wr_gains();
        let st = AdaptiveState {
            theta_hat: vec![0.0, 0.0],
            rho_hat: 0.3,
            xi: 0.0,
        };
        assert!(check_initial_state(&st, &g, Law::Theorem1).is_err());
        assert!(check_initial_state(&AdaptiveState { rho_hat: -0.3, ..st.clone() }, &g, Law::Theorem1).is_ok());
        assert!(check_initial_state(&AdaptiveState { theta_hat: vec![-1.0, 0.0], rho_hat: -0.3, xi: 0.0 }, &g, Law::Theorem1).is_err());
        assert!(check_initial_state(&AdaptiveState { xi: -1.0, ..st }, &g, Law::Theorem2).is_err());
    }

    #[test]
    fn scalar_plant_reduces_to_single_layer() {
        let m = SystemModel::new(
            "scalar",
            1,
            1,
            vec![Arc::new(Polynomial::new(vec![vec![Monomial::new(1.0, &[2])]]))],
            Signal::constant(vec![1.0]),
            Signal::constant(1.0),
            Breakpoints::None,
        )
        .unwrap();
        let bs = Backstepping::new(1, 1, GainConfig::new(1, 1), Scaling::Exponential).unwrap();
        let e = bs.evaluate(&m, &[1.5], &[0.4], 1.0).unwrap();
        // ψ = w_1 θ̂ = θ̂ x², ψ̄ = θ̂ x
        assert!((e.psi - 0.4 * 2.25).abs() < 1e-14);
        assert!((e.psi_bar[0] - 0.6).abs() < 1e-14);
        assert!((e.layers[0].big_w[(0, 0)] - 1.5).abs() < 1e-14);
    }
}
