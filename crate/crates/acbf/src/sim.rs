//! Fixed-step closed-loop simulation of plant plus adaptive estimates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{parameter_mismatch, AdaptiveState, Branch, Controller};
use crate::model::UncertaintyTruth;
use crate::tightening::{Dataset, Sample};

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum SimAbort {
    #[error("admissible set empty at t = {t}, x = {x:?} (channel {channel}, Psi0 = {psi0})")]
    Infeasible {
        t: f64,
        x: Vec<f64>,
        channel: usize,
        psi0: f64,
    },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("model evaluation failed at t = {t}: {msg}")]
    Model { t: f64, msg: String },
}

impl SimAbort {
    pub fn time(&self) -> f64 {
        match self {
            SimAbort::Infeasible { t, .. } | SimAbort::NonFinite { t } | SimAbort::Model { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "one")]
    pub log_stride: usize,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    /// `dt * gamma` at or above 2.5 risks an unresolved estimate transient.
    pub fn stiffness_warning(&self, gamma: f64) -> Option<String> {
        let r = self.dt * gamma;
        (r >= 2.5).then(|| format!("dt * gamma = {r:.3} >= 2.5; the adaptive laws may be under-resolved"))
    }
}

/// Classical four-stage Runge-Kutta step of `z' = f(t, z)`.
pub fn rk4_step<F>(mut f: F, t: f64, z: &[f64], dt: f64) -> Result<Vec<f64>, SimAbort>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SimAbort>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { z.iter().zip(k).map(|(zi, ki)| zi + a * ki).collect() };
    let k1 = finite(f(t, z)?, t)?;
    let k2 = finite(f(t + 0.5 * dt, &axpy(0.5 * dt, &k1))?, t)?;
    let k3 = finite(f(t + 0.5 * dt, &axpy(0.5 * dt, &k2))?, t)?;
    let k4 = finite(f(t + dt, &axpy(dt, &k3))?, t)?;
    Ok(z.iter()
        .enumerate()
        .map(|(i, zi)| zi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

pub fn euler_step<F>(mut f: F, t: f64, z: &[f64], dt: f64) -> Result<Vec<f64>, SimAbort>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SimAbort>,
{
    let k = finite(f(t, z)?, t)?;
    Ok(z.iter().zip(&k).map(|(zi, ki)| zi + dt * ki).collect())
}

fn finite(v: Vec<f64>, t: f64) -> Result<Vec<f64>, SimAbort> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(SimAbort::NonFinite { t })
    }
}

/// Nominal controller producing `u_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// Scalar system (`m = 0`, `n = 1`) tracking `x_d = amplitude sin t` by
    /// inverting the nominal model: `u_d = (x_d' - k e - f_nom) / g_nom`.
    FeedbackLin { k: f64, amplitude: f64 },
    /// Drives the last state toward `v_des`: `u_d = k_v (v_des - v) / g_nom`.
    VelocityRegulate { k_v: f64, v_des: f64 },
    /// Per-axis PD on positions `x[i]`, velocities `x[n + i]`, with targets
    /// `center_i + amplitude_i sin t`, scaled by `1 / g_nom,ii`.
    Pd {
        kp: f64,
        kd: f64,
        center: Vec<f64>,
        amplitude: Vec<f64>,
    },
}

impl Reference {
    /// Tracked `(state index, target)` pairs at time `t`.
    pub fn targets(&self, t: f64) -> Vec<(usize, f64)> {
        match self {
            Reference::FeedbackLin { amplitude, .. } => vec![(0, amplitude * t.sin())],
            Reference::VelocityRegulate { .. } => Vec::new(),
            Reference::Pd { center, amplitude, .. } => center
                .iter()
                .zip(amplitude)
                .enumerate()
                .map(|(i, (c, a))| (i, c + a * t.sin()))
                .collect(),
        }
    }

    /// Like [`Reference::targets`] but including regulated velocities,
    /// which need the state dimension.
    pub fn targets_for(&self, t: f64, dim: usize) -> Vec<(usize, f64)> {
        match self {
            Reference::VelocityRegulate { v_des, .. } => vec![(dim - 1, *v_des)],
            _ => self.targets(t),
        }
    }

    pub fn ud(&self, t: f64, x: &[f64], ctrl: &Controller) -> Vec<f64> {
        let sys = &ctrl.system;
        let n = sys.n();
        let g0 = sys.g_tilde(x, &ctrl.nominal.lambda0);
        match self {
            Reference::FeedbackLin { k, amplitude } => {
                let f = (sys.dynamics.f)(x);
                let lo = (ctrl.fu_lo)(x);
                let hi = (ctrl.fu_hi)(x);
                let ft0 = sys.f_theta(x, &ctrl.nominal.theta0);
                let f_nom = f[0] + 0.5 * (lo[0] + hi[0]) + ft0[0];
                let (xd, xd_dot) = (amplitude * t.sin(), amplitude * t.cos());
                vec![(xd_dot - k * (x[0] - xd) - f_nom) / g0[0]]
            }
            Reference::VelocityRegulate { k_v, v_des } => {
                let v = x[x.len() - 1];
                vec![k_v * (v_des - v) / g0[n * n - 1]]
            }
            Reference::Pd {
                kp,
                kd,
                center,
                amplitude,
            } => (0..n)
                .map(|i| {
                    let (pd, vd) = (center[i] + amplitude[i] * t.sin(), amplitude[i] * t.cos());
                    (kp * (pd - x[i]) + kd * (vd - x[n + i])) / g0[i * n + i]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub ud: Vec<f64>,
    /// Barrier used by the controller.
    pub h: f64,
    /// Position-level barrier (equal to `h` for direct barriers).
    pub h_raw: f64,
    pub h_bar: f64,
    pub mu_hat: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub branches: Vec<Branch>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRun {
    pub trace: Vec<TraceRecord>,
    pub abort: Option<SimAbort>,
    pub warnings: Vec<String>,
    /// `gamma`, for the certificate decay check.
    pub gamma: f64,
    /// Tracked state indices, aligned with `TraceRecord::reference`.
    pub tracked: Vec<usize>,
}

/// The plant side of a run: truth plus initial conditions.
pub struct Plant<'a> {
    pub truth: &'a UncertaintyTruth,
    pub x0: &'a [f64],
    pub estimates0: &'a AdaptiveState,
}

/// `h - sum (mu_tilde^2 / 2 g_theta + nu_tilde^2 / 2 g_lambda)` with the true
/// mismatches `mu`, `nu`.
pub fn certificate(h: f64, mu: &[f64], nu: &[f64], state: &AdaptiveState, ctrl: &Controller) -> f64 {
    let g = &ctrl.gains;
    let mut s = 0.0;
    for ((m, e), gt) in mu.iter().zip(&state.mu_hat).zip(&g.gamma_theta) {
        s += (m - e).powi(2) / (2.0 * gt);
    }
    for ((n, e), gl) in nu.iter().zip(&state.nu_hat).zip(&g.gamma_lambda) {
        s += (n - e).powi(2) / (2.0 * gl);
    }
    h - s
}

/// `(t, h_bar)` along a trace.
pub fn certificate_series(trace: &[TraceRecord], truth: &UncertaintyTruth, ctrl: &Controller) -> Vec<(f64, f64)> {
    let (mu, nu) = parameter_mismatch(
        &truth.theta,
        &truth.lambda,
        &ctrl.nominal.theta0,
        &ctrl.nominal.lambda0,
        ctrl.mode(),
    );
    trace
        .iter()
        .map(|r| {
            let st = AdaptiveState {
                mu_hat: r.mu_hat.clone(),
                nu_hat: r.nu_hat.clone(),
            };
            (r.t, certificate(r.h, &mu, &nu, &st, ctrl))
        })
        .collect()
}

fn split_aug(z: &[f64], d: usize, k: usize) -> (&[f64], AdaptiveState) {
    (
        &z[..d],
        AdaptiveState {
            mu_hat: z[d..d + k].to_vec(),
            nu_hat: z[d + k..d + 2 * k].to_vec(),
        },
    )
}

/// Integrates `[x; mu_hat; nu_hat]` with the controller re-evaluated at every
/// stage. Aborts (keeping the partial trace) on an empty admissible set or a
/// non-finite state.
pub fn run_closed_loop(ctrl: &Controller, plant: &Plant<'_>, reference: &Reference, cfg: &SimConfig) -> SimRun {
    let sys = &ctrl.system;
    let d = sys.dim();
    let k = ctrl.estimate_len();
    let (mu, nu) = parameter_mismatch(
        &plant.truth.theta,
        &plant.truth.lambda,
        &ctrl.nominal.theta0,
        &ctrl.nominal.lambda0,
        ctrl.mode(),
    );
    let mut warnings: Vec<String> = cfg.stiffness_warning(ctrl.gains.gamma).into_iter().collect();
    if k != plant.estimates0.mu_hat.len() || k != plant.estimates0.nu_hat.len() {
        warnings.push("initial estimate length mismatch".into());
    }
    let tracked: Vec<usize> = reference.targets_for(0.0, d).iter().map(|p| p.0).collect();

    let deriv = |t: f64, z: &[f64]| -> Result<Vec<f64>, SimAbort> {
        let (x, st) = split_aug(z, d, k);
        let ud = reference.ud(t, x, ctrl);
        let out = ctrl.control(x, &st, &ud);
        if let Some(ch) = out.diagnostics.iter().position(|dg| dg.branch == Branch::Infeasible) {
            return Err(SimAbort::Infeasible {
                t,
                x: x.to_vec(),
                channel: ch,
                psi0: out.psi0,
            });
        }
        let xdot = sys
            .plant_derivative(plant.truth, x, &out.u)
            .map_err(|e| SimAbort::Model { t, msg: e.to_string() })?;
        let (md, nd) = ctrl.adapt_rates(x, &st, &out.u0);
        Ok([xdot, md, nd].concat())
    };

    let record = |t: f64, z: &[f64]| -> Result<TraceRecord, SimAbort> {
        let (x, st) = split_aug(z, d, k);
        let ud = reference.ud(t, x, ctrl);
        let out = ctrl.control(x, &st, &ud);
        let h = (ctrl.barrier.h)(x);
        Ok(TraceRecord {
            t,
            x: x.to_vec(),
            u: out.u.clone(),
            ud,
            h,
            h_raw: ctrl.barrier.raw_value(x),
            h_bar: certificate(h, &mu, &nu, &st, ctrl),
            mu_hat: st.mu_hat.clone(),
            nu_hat: st.nu_hat.clone(),
            branches: out.diagnostics.iter().map(|dg| dg.branch).collect(),
            reference: reference.targets_for(t, d).iter().map(|p| p.1).collect(),
        })
    };

    let mut z: Vec<f64> = [
        plant.x0.to_vec(),
        plant.estimates0.mu_hat.clone(),
        plant.estimates0.nu_hat.clone(),
    ]
    .concat();
    let steps = cfg.steps();
    let stride = cfg.log_stride.max(1);
    let mut trace = Vec::with_capacity(steps / stride + 2);
    let mut abort = None;
    for step in 0..=steps {
        let t = step as f64 * cfg.dt;
        if step % stride == 0 || step == steps {
            match record(t, &z) {
                Ok(r) => trace.push(r),
                Err(e) => {
                    abort = Some(e);
                    break;
                }
            }
        }
        if step == steps {
            break;
        }
        let next = match cfg.integrator {
            Integrator::Rk4 => rk4_step(deriv, t, &z, cfg.dt),
            Integrator::Euler => euler_step(deriv, t, &z, cfg.dt),
        };
        match next.and_then(|v| finite(v, t + cfg.dt)) {
            Ok(v) => z = v,
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    SimRun {
        trace,
        abort,
        warnings,
        gamma: ctrl.gains.gamma,
        tracked,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub completed: bool,
    pub abort: Option<String>,
    pub t_final: f64,
    pub records: usize,
    pub min_h: f64,
    pub min_h_raw: f64,
    pub min_h_bar: f64,
    pub h_bar0: f64,
    /// `min_t [h_bar(t) - h_bar(0) exp(-gamma t)]`.
    pub min_decay_slack: f64,
    pub min_estimate: f64,
    /// Per tracked coordinate, over records whose reference point is safe.
    pub rmse_inside: Vec<f64>,
    pub rmse_inside_total: f64,
    pub inside_records: usize,
    pub max_abs_u: f64,
    pub infeasible_count: usize,
    pub warnings: Vec<String>,
}

/// Reduces a run to scalar metrics. `inside(t, x_ref)` decides whether the
/// reference point counts toward the RMSE.
pub fn summarize<F>(run: &SimRun, inside: F) -> Summary
where
    F: Fn(&TraceRecord, &[f64]) -> bool,
{
    let tr = &run.trace;
    let fold_min = |f: &dyn Fn(&TraceRecord) -> f64| tr.iter().map(f).fold(f64::INFINITY, f64::min);
    let h_bar0 = tr.first().map_or(f64::NAN, |r| r.h_bar);
    let min_decay_slack = fold_min(&|r| r.h_bar - h_bar0 * (-run.gamma * r.t).exp());
    let min_estimate = fold_min(&|r| {
        r.mu_hat
            .iter()
            .chain(&r.nu_hat)
            .copied()
            .fold(f64::INFINITY, f64::min)
    });
    let nt = run.tracked.len();
    let mut sq = vec![0.0; nt];
    let mut count = 0usize;
    for r in tr {
        let mut xref = r.x.clone();
        for (j, &idx) in run.tracked.iter().enumerate() {
            xref[idx] = r.reference[j];
        }
        if inside(r, &xref) {
            count += 1;
            for (j, &idx) in run.tracked.iter().enumerate() {
                sq[j] += (r.x[idx] - r.reference[j]).powi(2);
            }
        }
    }
    let rmse_inside: Vec<f64> = sq
        .iter()
        .map(|s| if count > 0 { (s / count as f64).sqrt() } else { f64::NAN })
        .collect();
    let rmse_inside_total = if count > 0 && nt > 0 {
        (sq.iter().sum::<f64>() / (count * nt) as f64).sqrt()
    } else {
        f64::NAN
    };
    Summary {
        completed: run.abort.is_none(),
        abort: run.abort.as_ref().map(|a| a.to_string()),
        t_final: tr.last().map_or(0.0, |r| r.t),
        records: tr.len(),
        min_h: fold_min(&|r| r.h),
        min_h_raw: fold_min(&|r| r.h_raw),
        min_h_bar: fold_min(&|r| r.h_bar),
        h_bar0,
        min_decay_slack,
        min_estimate,
        rmse_inside,
        rmse_inside_total,
        inside_records: count,
        max_abs_u: tr
            .iter()
            .flat_map(|r| r.u.iter().map(|v| v.abs()))
            .fold(0.0, f64::max),
        infeasible_count: usize::from(matches!(run.abort, Some(SimAbort::Infeasible { .. }))),
        warnings: run.warnings.clone(),
    }
}

/// Writes the trace as CSV. Output depends only on the trace contents.
pub fn write_trace_csv<W: Write>(run: &SimRun, w: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    let Some(first) = run.trace.first() else {
        wtr.write_record(["t"])?;
        wtr.flush()?;
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    let cols = |name: &'static str, len: usize| (0..len).map(move |i| format!("{name}_{i}"));
    header.extend(cols("x", first.x.len()));
    header.extend(cols("u", first.u.len()));
    header.extend(cols("u_d", first.ud.len()));
    header.extend(["h".into(), "h_raw".into(), "h_bar".into()]);
    header.extend(cols("mu_hat", first.mu_hat.len()));
    header.extend(cols("nu_hat", first.nu_hat.len()));
    header.extend(cols("branch", first.branches.len()));
    header.extend(run.tracked.iter().map(|i| format!("ref_x_{i}")));
    wtr.write_record(&header)?;
    for r in &run.trace {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        let mut push = |v: f64| row.push(format!("{v:e}"));
        push(r.t);
        r.x.iter().chain(&r.u).chain(&r.ud).for_each(|v| push(*v));
        [r.h, r.h_raw, r.h_bar].iter().for_each(|v| push(*v));
        r.mu_hat.iter().chain(&r.nu_hat).for_each(|v| push(*v));
        row.extend(r.branches.iter().map(|b| b.code().to_string()));
        row.extend(r.reference.iter().map(|v| format!("{v:e}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub samples: usize,
    /// Length of the exploratory run in seconds.
    pub horizon: f64,
    pub dt: f64,
    /// Probe inputs are uniform in `[-probe, probe]`; about half are zero.
    pub probe: f64,
}

/// Samples the true plant along an exploratory run under the nominal
/// controller alone, recording exact derivatives.
pub fn generate_dataset(
    ctrl: &Controller,
    truth: &UncertaintyTruth,
    x0: &[f64],
    reference: &Reference,
    cfg: &ExplorationConfig,
    seed: u64,
) -> Result<Dataset, SimAbort> {
    let sys = &ctrl.system;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (cfg.horizon / cfg.dt).round().max(1.0) as usize;
    let every = (steps / cfg.samples.max(1)).max(1);
    let mut x = x0.to_vec();
    let mut samples = Vec::with_capacity(cfg.samples);
    let f = |t: f64, z: &[f64]| -> Result<Vec<f64>, SimAbort> {
        let ud = reference.ud(t, z, ctrl);
        sys.plant_derivative(truth, z, &ud)
            .map_err(|e| SimAbort::Model { t, msg: e.to_string() })
    };
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        if step % every == 0 && samples.len() < cfg.samples {
            // Even samples see no input and pin the drift; odd ones push the
            // nominal input further out by at least half the probe size.
            let mut u = reference.ud(t, &x, ctrl);
            let excite = samples.len() % 2 == 1;
            for ui in u.iter_mut() {
                if excite {
                    let sign = if *ui == 0.0 {
                        if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        ui.signum()
                    };
                    *ui += sign * cfg.probe * rng.random_range(0.5..=1.0);
                } else {
                    *ui = 0.0;
                }
            }
            let xdot = sys
                .plant_derivative(truth, &x, &u)
                .map_err(|e| SimAbort::Model { t, msg: e.to_string() })?;
            samples.push(Sample {
                t,
                x: x.clone(),
                xdot,
                u,
            });
        }
        x = rk4_step(f, t, &x, cfg.dt)?;
    }
    Ok(Dataset { samples })
}
