//! Closed-form solution of the per-channel safety program
//!
//! ```text
//! min_{u0} (s(u0) - ubar_d)^2   s.t.   Phi0 + Phi1 u0 >= 0
//! ```
//!
//! with applied input `u = h_x2 * s(u0*)` and `ubar_d = u_d / h_x2`.

use serde::{Deserialize, Serialize};

use super::sfun::{SBranch, SParams, TIE_TOL};

/// Constraint slack tolerated on the returned `u0`.
pub const MARGIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Monotone `s` with `Phi1 > 0`, or non-monotone `s` with `y*` infeasible.
    A1,
    /// Monotone `s` with `Phi1 < 0`.
    A2,
    /// Non-monotone `s` with `y*` feasible.
    A3,
    Psi1ZeroMonotone,
    GradZero,
    Infeasible,
}

impl Branch {
    pub fn code(self) -> &'static str {
        match self {
            Branch::A1 => "A1",
            Branch::A2 => "A2",
            Branch::A3 => "A3",
            Branch::Psi1ZeroMonotone => "Z",
            Branch::GradZero => "G",
            Branch::Infeasible => "X",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub branch: Branch,
    pub u0: f64,
    /// `Phi0 + Phi1 u0`.
    pub certificate_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelProblem {
    pub phi0: f64,
    pub phi1: f64,
    pub hx2: f64,
    pub ud: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub b: f64,
    pub eps2: f64,
}

/// Solution in the scaled coordinates: `target = s(u0*)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ScalarSolution {
    pub target: f64,
    pub u0: f64,
    pub branch: Branch,
}

/// Case analysis shared by the diagonal and full-matrix solvers. `sp.hx2_abs`
/// must be positive. The reported target is always `s(u0)`, so the applied
/// input and the constrained `u0` stay consistent.
pub(crate) fn solve_scalar(phi0: f64, phi1: f64, sp: &SParams, ubar_d: f64) -> ScalarSolution {
    let mut sol = case_analysis(phi0, phi1, sp, ubar_d);
    if sol.branch != Branch::Infeasible {
        sol.target = sp.eval(sol.u0);
    }
    sol
}

fn case_analysis(phi0: f64, phi1: f64, sp: &SParams, ubar_d: f64) -> ScalarSolution {
    let monotone = sp.is_monotone();
    if phi1.abs() <= TIE_TOL {
        if phi0 < -MARGIN_TOL {
            return ScalarSolution {
                target: ubar_d,
                u0: 0.0,
                branch: Branch::Infeasible,
            };
        }
        if monotone {
            // At the exact tie bbar == kappa2 the range of s is bounded below;
            // a target under it has no preimage and u0 heads for the infimum.
            let u0 = sp
                .inverse(ubar_d, SBranch::Rising)
                .unwrap_or_else(|| sp.near_infimum());
            return ScalarSolution {
                target: ubar_d,
                u0,
                branch: Branch::Psi1ZeroMonotone,
            };
        }
        // Constraint is vacuous, so y* is admissible.
        let ys = sp.minimizer().expect("non-monotone s has a minimizer");
        return toward_target(sp, ubar_d, ys, SBranch::Rising, None, Branch::A3);
    }

    let c = -phi0 / phi1;
    let side = if phi1 > 0.0 {
        SBranch::Rising
    } else {
        SBranch::Falling
    };
    if monotone {
        if phi1 > 0.0 {
            return toward_target(sp, ubar_d, c, SBranch::Rising, Some((c, phi1)), Branch::A1);
        }
        // Feasible set is u0 <= c, on which s ranges over (inf s, s(c)].
        let sc = sp.eval(c);
        if ubar_d >= sc {
            return ScalarSolution {
                target: sc,
                u0: c,
                branch: Branch::A2,
            };
        }
        return match sp.inverse(ubar_d, SBranch::Rising) {
            Some(y) => ScalarSolution {
                target: ubar_d,
                u0: y.min(c),
                branch: Branch::A2,
            },
            None => ScalarSolution {
                target: ubar_d,
                u0: sp.near_infimum().min(c),
                branch: Branch::A2,
            },
        };
    }

    let ys = sp.minimizer().expect("non-monotone s has a minimizer");
    if phi0 + phi1 * ys < 0.0 {
        toward_target(sp, ubar_d, c, side, Some((c, phi1)), Branch::A1)
    } else {
        toward_target(sp, ubar_d, ys, side, Some((c, phi1)), Branch::A3)
    }
}

/// `s(u0*) = max(s(anchor), ubar_d)` with the preimage taken on `side` and
/// pushed back into the feasible half-line when round-off overshoots.
fn toward_target(
    sp: &SParams,
    ubar_d: f64,
    anchor: f64,
    side: SBranch,
    constraint: Option<(f64, f64)>,
    branch: Branch,
) -> ScalarSolution {
    let floor = sp.eval(anchor);
    if ubar_d <= floor {
        return ScalarSolution {
            target: floor,
            u0: anchor,
            branch,
        };
    }
    let mut u0 = sp.inverse(ubar_d, side).unwrap_or(anchor);
    if let Some((c, phi1)) = constraint {
        u0 = if phi1 > 0.0 { u0.max(c) } else { u0.min(c) };
    }
    ScalarSolution {
        target: ubar_d,
        u0,
        branch,
    }
}

/// Returns the applied input `u` and diagnostics for one channel.
pub fn closed_form_solve(p: &ChannelProblem) -> (f64, SolveDiagnostics) {
    if p.hx2.abs() < TIE_TOL {
        let branch = if p.phi0 < -MARGIN_TOL {
            Branch::Infeasible
        } else {
            Branch::GradZero
        };
        return (
            0.0,
            SolveDiagnostics {
                branch,
                u0: 0.0,
                certificate_margin: p.phi0,
            },
        );
    }
    let sp = SParams {
        kappa1: p.kappa1,
        kappa2: p.kappa2,
        b: p.b,
        hx2_abs: p.hx2.abs(),
        eps2: p.eps2,
    };
    let sol = solve_scalar(p.phi0, p.phi1, &sp, p.ud / p.hx2);
    let u = match sol.branch {
        Branch::Infeasible => p.ud,
        _ => p.hx2 * sol.target,
    };
    (
        u,
        SolveDiagnostics {
            branch: sol.branch,
            u0: sol.u0,
            certificate_margin: p.phi0 + p.phi1 * sol.u0,
        },
    )
}
