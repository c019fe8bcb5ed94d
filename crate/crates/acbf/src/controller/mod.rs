//! Adaptive CBF controllers: bound constants, the `Psi0`/`Psi1` terms,
//! per-channel splitting, adaptive laws and the closed-form solves.

mod general;
mod sfun;
mod solve;

pub use general::{compute_psi_general, solve_general, stack_general, StackedBounds};
pub use sfun::{s_scalar, stationary_point, SBranch, SParams, TIE_TOL};
pub use solve::{closed_form_solve, Branch, ChannelProblem, SolveDiagnostics, MARGIN_TOL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_len, dot, norm, Barrier, GMode, ModelError, System, UncertaintyPrior, VecFn};
use crate::parallel::{self, Execution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contract violation: {0}")]
    Contract(String),
}

fn config<T>(msg: impl Into<String>) -> Result<T, ControllerError> {
    Err(ControllerError::Config(msg.into()))
}

/// `sqrt(sum_j max((hi_j - nom_j)^2, (lo_j - nom_j)^2))`.
pub fn bound_constant(lo: &[f64], hi: &[f64], nominal: &[f64]) -> Result<f64, ControllerError> {
    check_len("bound vector", lo.len(), hi.len())?;
    check_len("nominal vector", lo.len(), nominal.len())?;
    let mut acc = 0.0;
    for (j, ((&l, &h), &x)) in lo.iter().zip(hi).zip(nominal).enumerate() {
        if !(l <= x && x <= h) {
            return config(format!("nominal entry {j} = {x} outside bounds [{l}, {h}]"));
        }
        acc += ((h - x) * (h - x)).max((l - x) * (l - x));
    }
    Ok(acc.sqrt())
}

/// Per-block bound constants `(mu_bar, nu_bar)` in diagonal mode, or single
/// stacked values in full mode.
pub fn compute_bound_constants(
    prior: &UncertaintyPrior,
    theta0: &[Vec<f64>],
    lambda0: &[Vec<f64>],
    mode: GMode,
) -> Result<(Vec<f64>, Vec<f64>), ControllerError> {
    check_len("theta0 blocks", prior.theta_lo.len(), theta0.len())?;
    check_len("lambda0 blocks", prior.lambda_lo.len(), lambda0.len())?;
    match mode {
        GMode::Diagonal => {
            let mu = (0..theta0.len())
                .map(|i| bound_constant(&prior.theta_lo[i], &prior.theta_hi[i], &theta0[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let nu = (0..lambda0.len())
                .map(|i| bound_constant(&prior.lambda_lo[i], &prior.lambda_hi[i], &lambda0[i]))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((mu, nu))
        }
        GMode::Full => {
            let s = stack_general(prior, theta0, lambda0)?;
            Ok((vec![s.mu_bar], vec![s.nu_bar]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalSelection {
    pub theta0: Vec<Vec<f64>>,
    pub lambda0: Vec<Vec<f64>>,
    pub mu_bar: Vec<f64>,
    pub nu_bar: Vec<f64>,
    /// Values given by the bound formula, before any override.
    pub mu_bar_formula: Vec<f64>,
    pub nu_bar_formula: Vec<f64>,
}

impl NominalSelection {
    /// Computes the bound constants and applies optional overrides, which
    /// may only raise them.
    pub fn new(
        prior: &UncertaintyPrior,
        theta0: Vec<Vec<f64>>,
        lambda0: Vec<Vec<f64>>,
        mode: GMode,
        mu_override: Option<Vec<f64>>,
        nu_override: Option<Vec<f64>>,
    ) -> Result<Self, ControllerError> {
        let (mu_f, nu_f) = compute_bound_constants(prior, &theta0, &lambda0, mode)?;
        let mu_bar = apply_override("mu_bar", &mu_f, mu_override)?;
        let nu_bar = apply_override("nu_bar", &nu_f, nu_override)?;
        Ok(Self {
            theta0,
            lambda0,
            mu_bar,
            nu_bar,
            mu_bar_formula: mu_f,
            nu_bar_formula: nu_f,
        })
    }

    pub fn overridden(&self) -> (Vec<bool>, Vec<bool>) {
        let flag = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x != y).collect();
        (
            flag(&self.mu_bar, &self.mu_bar_formula),
            flag(&self.nu_bar, &self.nu_bar_formula),
        )
    }
}

fn apply_override(name: &str, formula: &[f64], o: Option<Vec<f64>>) -> Result<Vec<f64>, ControllerError> {
    let Some(o) = o else {
        return Ok(formula.to_vec());
    };
    check_len(name, formula.len(), o.len())?;
    for (i, (&v, &f)) in o.iter().zip(formula).enumerate() {
        // Relative slack so that printed values like 66.1438 are accepted.
        if v < f * (1.0 - 1e-9) {
            return config(format!(
                "{name}[{i}] override {v} is below the bound formula value {f}; overrides may only raise it"
            ));
        }
    }
    Ok(o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainConfig {
    pub gamma: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// One entry per channel in diagonal mode, a single entry in full mode.
    pub gamma_theta: Vec<f64>,
    pub gamma_lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Lower bounds `b_i` in diagonal mode, `[b*]` in full mode.
    pub b: Vec<f64>,
}

impl GainConfig {
    pub fn validate(&self, n: usize, mode: GMode) -> Result<(), ControllerError> {
        let k = match mode {
            GMode::Diagonal => n,
            GMode::Full => 1,
        };
        check_len("gamma_theta", k, self.gamma_theta.len())?;
        check_len("gamma_lambda", k, self.gamma_lambda.len())?;
        check_len("b", k, self.b.len())?;
        if mode == GMode::Diagonal {
            check_len("rho", n, self.rho.len())?;
        }
        let scalars = [("gamma", self.gamma), ("eps1", self.eps1), ("eps2", self.eps2)];
        for (name, v) in scalars {
            if !(v > 0.0 && v.is_finite()) {
                return config(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("gamma_theta", &self.gamma_theta),
            ("gamma_lambda", &self.gamma_lambda),
            ("rho", &self.rho),
            ("b", &self.b),
        ] {
            if let Some(bad) = v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return config(format!("{name} entries must be positive, got {bad}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub mu_hat: Vec<f64>,
    pub nu_hat: Vec<f64>,
}

impl AdaptiveState {
    pub fn uniform(k: usize, v: f64) -> Self {
        Self {
            mu_hat: vec![v; k],
            nu_hat: vec![v; k],
        }
    }
}

/// `M = h_x f + sum_j min(h_x,j f_u_lo,j, h_x,j f_u_hi,j)`.
pub fn compute_m(hx: &[f64], f_val: &[f64], fu_lo: &[f64], fu_hi: &[f64]) -> f64 {
    let worst: f64 = hx
        .iter()
        .zip(fu_lo.iter().zip(fu_hi))
        .map(|(&h, (&lo, &hi))| (h * lo).min(h * hi))
        .sum();
    dot(hx, f_val) + worst
}

/// Splits `Psi0` across channels in proportion to `rho_i |Phi1_i|`, or
/// evenly when every `Phi1_i` vanishes. Returns `(Phi0_i, Phi1_i)` pairs.
pub fn split_phi(psi0: f64, psi1: &[f64], rho: &[f64]) -> Vec<(f64, f64)> {
    let n = psi1.len();
    let all_zero = psi1.iter().all(|v| v.abs() <= TIE_TOL);
    let denom: f64 = psi1.iter().zip(rho).map(|(p, r)| r * p.abs()).sum();
    psi1.iter()
        .zip(rho)
        .map(|(&p1, &r)| {
            let p0 = if all_zero {
                psi0 / n as f64
            } else {
                psi0 * (r * p1.abs() / denom)
            };
            (p0, p1)
        })
        .collect()
}

/// Diagonal-mode adaptive rates for one channel.
#[allow(clippy::too_many_arguments)]
pub fn adapt_rates_channel(
    gamma: f64,
    mu_hat: f64,
    nu_hat: f64,
    gamma_theta: f64,
    gamma_lambda: f64,
    hx2: f64,
    phi_norm: f64,
    psi_norm: f64,
    u0: f64,
) -> (f64, f64) {
    (
        -gamma * mu_hat + gamma_theta * hx2.abs() * phi_norm,
        -gamma * nu_hat + gamma_lambda * hx2 * hx2 * u0.abs() * psi_norm,
    )
}

/// `h0 - sum_i [(mu_hat_i^2 + mu_bar_i^2)/(2 g_theta_i) + (nu_hat_i^2 + nu_bar_i^2)/(2 g_lambda_i)]`.
pub fn condition_iv_margin(h0: f64, state0: &AdaptiveState, nominal: &NominalSelection, gains: &GainConfig) -> f64 {
    let mut s = 0.0;
    for i in 0..nominal.mu_bar.len() {
        s += (state0.mu_hat[i].powi(2) + nominal.mu_bar[i].powi(2)) / (2.0 * gains.gamma_theta[i]);
    }
    for i in 0..nominal.nu_bar.len() {
        s += (state0.nu_hat[i].powi(2) + nominal.nu_bar[i].powi(2)) / (2.0 * gains.gamma_lambda[i]);
    }
    h0 - s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionIv {
    pub margin: f64,
    pub holds: bool,
}

pub fn check_condition_iv(
    h0: f64,
    state0: &AdaptiveState,
    nominal: &NominalSelection,
    gains: &GainConfig,
) -> ConditionIv {
    let margin = condition_iv_margin(h0, state0, nominal, gains);
    ConditionIv {
        margin,
        holds: margin >= 0.0,
    }
}

/// `||theta_i - theta0_i||` per block (diagonal) or stacked (full).
pub fn parameter_mismatch(
    theta: &[Vec<f64>],
    lambda: &[Vec<f64>],
    theta0: &[Vec<f64>],
    lambda0: &[Vec<f64>],
    mode: GMode,
) -> (Vec<f64>, Vec<f64>) {
    let blockwise = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
            .collect()
    };
    let (mu, nu) = (blockwise(theta, theta0), blockwise(lambda, lambda0));
    match mode {
        GMode::Diagonal => (mu, nu),
        GMode::Full => (
            vec![mu.iter().map(|v| v * v).sum::<f64>().sqrt()],
            vec![nu.iter().map(|v| v * v).sum::<f64>().sqrt()],
        ),
    }
}

/// Everything the controller computes at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub u0: Vec<f64>,
    pub diagnostics: Vec<SolveDiagnostics>,
    pub psi0: f64,
    pub psi1: Vec<f64>,
}

impl ControlOutput {
    pub fn infeasible(&self) -> bool {
        self.diagnostics.iter().any(|d| d.branch == Branch::Infeasible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbfViolation {
    pub x: Vec<f64>,
    pub psi0: f64,
    pub psi1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbfReport {
    pub samples: usize,
    pub violations: Vec<KbfViolation>,
    pub min_psi0: f64,
    pub min_abs_psi1: f64,
}

impl KbfReport {
    pub fn nonempty_everywhere(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Controller-side view of a scenario. Holds nominal parameters and prior
/// bounds only; the true parameters are not reachable from here.
#[derive(Clone)]
pub struct Controller {
    pub system: System,
    pub barrier: Barrier,
    pub fu_lo: VecFn,
    pub fu_hi: VecFn,
    pub nominal: NominalSelection,
    pub gains: GainConfig,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("system", &self.system)
            .field("nominal", &self.nominal)
            .field("gains", &self.gains)
            .finish()
    }
}

impl Controller {
    pub fn new(
        system: System,
        barrier: Barrier,
        prior: &UncertaintyPrior,
        nominal: NominalSelection,
        gains: GainConfig,
    ) -> Result<Self, ControllerError> {
        system.validate()?;
        system.check_params(&nominal.theta0, &nominal.lambda0)?;
        prior.check_ordered()?;
        prior.check_contains(&nominal.theta0, &nominal.lambda0, "nominal")?;
        gains.validate(system.n(), system.mode())?;
        let k = match system.mode() {
            GMode::Diagonal => system.n(),
            GMode::Full => 1,
        };
        check_len("mu_bar", k, nominal.mu_bar.len())?;
        check_len("nu_bar", k, nominal.nu_bar.len())?;
        Ok(Self {
            system,
            barrier,
            fu_lo: prior.fu_lo.clone(),
            fu_hi: prior.fu_hi.clone(),
            nominal,
            gains,
        })
    }

    pub fn mode(&self) -> GMode {
        self.system.mode()
    }

    /// Number of adaptive estimate pairs: `n` (diagonal) or 1 (full).
    pub fn estimate_len(&self) -> usize {
        match self.mode() {
            GMode::Diagonal => self.system.n(),
            GMode::Full => 1,
        }
    }

    fn hx2(&self, hx: &[f64]) -> Vec<f64> {
        hx[self.system.m()..].to_vec()
    }

    fn m_term(&self, x: &[f64], hx: &[f64]) -> f64 {
        let f = (self.system.dynamics.f)(x);
        compute_m(hx, &f, &(self.fu_lo)(x), &(self.fu_hi)(x))
    }

    /// Diagonal-mode `(Psi0, Psi1)`.
    pub fn compute_psi(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (h, hx) = self.barrier.value_and_grad(x);
        let hx2 = self.hx2(&hx);
        let g = &self.nominal;
        let gains = &self.gains;
        let n = self.system.n();
        let ft0 = self.system.f_theta(x, &g.theta0);
        let gt0 = self.system.g_tilde(x, &g.lambda0);
        let mut penalty = 0.0;
        for i in 0..n {
            penalty += g.mu_bar[i].powi(2) / (2.0 * gains.gamma_theta[i])
                + g.nu_bar[i].powi(2) / (2.0 * gains.gamma_lambda[i]);
        }
        let psi0 = self.m_term(x, &hx) + dot(&hx2, &ft0) - n as f64 * (gains.eps1 + gains.eps2)
            + gains.gamma * (h - penalty);
        let psi1 = (0..n).map(|i| hx2[i] * hx2[i] * gt0[i * n + i]).collect();
        (psi0, psi1)
    }

    /// Full-mode `(Psi0, Psi1)`.
    pub fn compute_psi_general(&self, x: &[f64]) -> (f64, f64) {
        let (h, hx) = self.barrier.value_and_grad(x);
        compute_psi_general(
            &self.system,
            &self.nominal,
            &self.gains,
            h,
            &hx,
            self.m_term(x, &hx),
            x,
        )
    }

    /// Mode-independent `(Psi0, Psi1 entries)`.
    pub fn psi_terms(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.mode() {
            GMode::Diagonal => self.compute_psi(x),
            GMode::Full => {
                let (a, b) = self.compute_psi_general(x);
                (a, vec![b])
            }
        }
    }

    /// Applied input for nominal `ud` at `(x, state)`.
    pub fn control(&self, x: &[f64], state: &AdaptiveState, ud: &[f64]) -> ControlOutput {
        match self.mode() {
            GMode::Diagonal => self.control_diagonal(x, state, ud),
            GMode::Full => self.control_full(x, state, ud),
        }
    }

    fn control_diagonal(&self, x: &[f64], state: &AdaptiveState, ud: &[f64]) -> ControlOutput {
        let n = self.system.n();
        let hx = (self.barrier.grad)(x);
        let hx2 = self.hx2(&hx);
        let (psi0, psi1) = self.compute_psi(x);
        let split = split_phi(psi0, &psi1, &self.gains.rho);
        let phi = self.system.phi(x);
        let psi = self.system.psi(x);
        let mut u = Vec::with_capacity(n);
        let mut u0 = Vec::with_capacity(n);
        let mut diagnostics = Vec::with_capacity(n);
        for i in 0..n {
            let a = hx2[i].abs();
            let pn = norm(&phi[i]);
            let mh = state.mu_hat[i];
            let kappa1 = mh * mh * pn * pn / (mh * pn * a + self.gains.eps1);
            let kappa2 = state.nu_hat[i] * norm(&psi[i]) * a;
            let (ui, d) = closed_form_solve(&ChannelProblem {
                phi0: split[i].0,
                phi1: split[i].1,
                hx2: hx2[i],
                ud: ud[i],
                kappa1,
                kappa2,
                b: self.gains.b[i],
                eps2: self.gains.eps2,
            });
            u.push(ui);
            u0.push(d.u0);
            diagnostics.push(d);
        }
        ControlOutput {
            u,
            u0,
            diagnostics,
            psi0,
            psi1,
        }
    }

    fn control_full(&self, x: &[f64], state: &AdaptiveState, ud: &[f64]) -> ControlOutput {
        let hx = (self.barrier.grad)(x);
        let hx2 = self.hx2(&hx);
        let (psi0, psi1) = self.compute_psi_general(x);
        let op = norm(&self.system.phi(x).concat());
        let oq = norm(&self.system.psi(x).concat());
        let hn = norm(&hx2);
        let mh = state.mu_hat[0];
        let kappa1 = mh * mh * op * op / (mh * op * hn + self.gains.eps1);
        let kappa2 = state.nu_hat[0] * oq * hn;
        let (u, d) = solve_general(psi0, psi1, &hx2, ud, kappa1, kappa2, self.gains.b[0], self.gains.eps2);
        ControlOutput {
            u,
            u0: vec![d.u0],
            diagnostics: vec![d],
            psi0,
            psi1: vec![psi1],
        }
    }

    /// `(mu_hat_dot, nu_hat_dot)` for the current state and `u0`.
    pub fn adapt_rates(&self, x: &[f64], state: &AdaptiveState, u0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hx = (self.barrier.grad)(x);
        let hx2 = self.hx2(&hx);
        let phi = self.system.phi(x);
        let psi = self.system.psi(x);
        let g = &self.gains;
        match self.mode() {
            GMode::Diagonal => {
                let mut md = Vec::with_capacity(hx2.len());
                let mut nd = Vec::with_capacity(hx2.len());
                for i in 0..hx2.len() {
                    let (a, b) = adapt_rates_channel(
                        g.gamma,
                        state.mu_hat[i],
                        state.nu_hat[i],
                        g.gamma_theta[i],
                        g.gamma_lambda[i],
                        hx2[i],
                        norm(&phi[i]),
                        norm(&psi[i]),
                        u0[i],
                    );
                    md.push(a);
                    nd.push(b);
                }
                (md, nd)
            }
            GMode::Full => {
                let hn = norm(&hx2);
                let op = norm(&phi.concat());
                let oq = norm(&psi.concat());
                (
                    vec![-g.gamma * state.mu_hat[0] + g.gamma_theta[0] * hn * op],
                    vec![-g.gamma * state.nu_hat[0] + g.gamma_lambda[0] * hn * hn * u0[0].abs() * oq],
                )
            }
        }
    }

    pub fn check_condition_iv(&self, x0: &[f64], state0: &AdaptiveState) -> ConditionIv {
        check_condition_iv((self.barrier.h)(x0), state0, &self.nominal, &self.gains)
    }

    /// Audits non-emptiness of the admissible set on `grid`; points outside
    /// the safe set are skipped.
    pub fn check_kbf_sampled(&self, grid: &[Vec<f64>], exec: Execution) -> KbfReport {
        let evals = parallel::map(exec, grid, |x| {
            if (self.barrier.h)(x) < 0.0 {
                return None;
            }
            let (p0, p1) = self.psi_terms(x);
            Some((x.clone(), p0, p1))
        });
        let mut report = KbfReport {
            samples: 0,
            violations: Vec::new(),
            min_psi0: f64::INFINITY,
            min_abs_psi1: f64::INFINITY,
        };
        for (x, p0, p1) in evals.into_iter().flatten() {
            report.samples += 1;
            report.min_psi0 = report.min_psi0.min(p0);
            let any_nonzero = p1.iter().any(|v| v.abs() > TIE_TOL);
            report.min_abs_psi1 = report.min_abs_psi1.min(p1.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            if !(any_nonzero || p0 >= 0.0) {
                report.violations.push(KbfViolation { x, psi0: p0, psi1: p1 });
            }
        }
        report
    }
}
