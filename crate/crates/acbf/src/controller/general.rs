//! Full-matrix input maps: stacked parameters and the single-ray controller
//! `u = s_g(u0) h_x2'`.

use serde::Serialize;

use super::sfun::{SParams, TIE_TOL};
use super::solve::{solve_scalar, Branch, SolveDiagnostics, MARGIN_TOL};
use super::{bound_constant, ControllerError, GainConfig, NominalSelection};
use crate::model::{check_len, dot, norm, System, UncertaintyPrior};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackedBounds {
    pub theta_lo: Vec<f64>,
    pub theta_hi: Vec<f64>,
    pub theta0: Vec<f64>,
    pub lambda_lo: Vec<f64>,
    pub lambda_hi: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub mu_bar: f64,
    pub nu_bar: f64,
}

/// Stacks `theta_i` into `Theta` and `lambda_ij` (row-major) into `Lambda`,
/// and evaluates the bound constants over the stacked boxes.
pub fn stack_general(
    prior: &UncertaintyPrior,
    theta0: &[Vec<f64>],
    lambda0: &[Vec<f64>],
) -> Result<StackedBounds, ControllerError> {
    check_len("theta0 blocks", prior.theta_lo.len(), theta0.len())?;
    check_len("lambda0 blocks", prior.lambda_lo.len(), lambda0.len())?;
    for (i, t) in theta0.iter().enumerate() {
        check_len(&format!("theta0[{i}]"), prior.theta_lo[i].len(), t.len())?;
    }
    for (k, l) in lambda0.iter().enumerate() {
        check_len(&format!("lambda0[{k}]"), prior.lambda_lo[k].len(), l.len())?;
    }
    let theta_lo = prior.theta_lo.concat();
    let theta_hi = prior.theta_hi.concat();
    let theta0 = theta0.concat();
    let lambda_lo = prior.lambda_lo.concat();
    let lambda_hi = prior.lambda_hi.concat();
    let lambda0 = lambda0.concat();
    let mu_bar = bound_constant(&theta_lo, &theta_hi, &theta0)?;
    let nu_bar = bound_constant(&lambda_lo, &lambda_hi, &lambda0)?;
    Ok(StackedBounds {
        theta_lo,
        theta_hi,
        theta0,
        lambda_lo,
        lambda_hi,
        lambda0,
        mu_bar,
        nu_bar,
    })
}

/// `Psi0 = M + h_x2 f_theta0 - (eps1 + eps2) + gamma (h - mu_bar^2/2g_theta - nu_bar^2/2g_lambda)`
/// and `Psi1 = h_x2 (g + g_lambda0) h_x2'`.
pub fn compute_psi_general(
    system: &System,
    nominal: &NominalSelection,
    gains: &GainConfig,
    h: f64,
    hx: &[f64],
    m_term: f64,
    x: &[f64],
) -> (f64, f64) {
    let n = system.n();
    let hx2 = &hx[system.m()..];
    let ft0 = system.f_theta(x, &nominal.theta0);
    let gt0 = system.g_tilde(x, &nominal.lambda0);
    let penalty = nominal.mu_bar[0].powi(2) / (2.0 * gains.gamma_theta[0])
        + nominal.nu_bar[0].powi(2) / (2.0 * gains.gamma_lambda[0]);
    let psi0 = m_term + dot(hx2, &ft0) - (gains.eps1 + gains.eps2) + gains.gamma * (h - penalty);
    let mut psi1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            psi1 += hx2[i] * gt0[i * n + j] * hx2[j];
        }
    }
    (psi0, psi1)
}

/// Solves the full-mode program through the scalar case analysis, using
/// `ubar_d = (h_x2 u_d) / ||h_x2||^2` as the scalar target.
#[allow(clippy::too_many_arguments)]
pub fn solve_general(
    psi0: f64,
    psi1: f64,
    hx2: &[f64],
    ud: &[f64],
    kappa1: f64,
    kappa2: f64,
    b_star: f64,
    eps2: f64,
) -> (Vec<f64>, SolveDiagnostics) {
    let hn = norm(hx2);
    if hn < TIE_TOL {
        let branch = if psi0 < -MARGIN_TOL {
            Branch::Infeasible
        } else {
            Branch::GradZero
        };
        return (
            vec![0.0; hx2.len()],
            SolveDiagnostics {
                branch,
                u0: 0.0,
                certificate_margin: psi0,
            },
        );
    }
    let sp = SParams {
        kappa1,
        kappa2,
        b: b_star,
        hx2_abs: hn,
        eps2,
    };
    let ubar_d = dot(hx2, ud) / (hn * hn);
    let sol = solve_scalar(psi0, psi1, &sp, ubar_d);
    let u = match sol.branch {
        Branch::Infeasible => ud.to_vec(),
        _ => hx2.iter().map(|h| sol.target * h).collect(),
    };
    (
        u,
        SolveDiagnostics {
            branch: sol.branch,
            u0: sol.u0,
            certificate_margin: psi0 + psi1 * sol.u0,
        },
    )
}
