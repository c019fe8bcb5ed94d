//! Set-membership tightening of parameter and `f_u` bounds from
//! `(x, x', u)` samples.
//!
//! Each controlled row is handled as a scalar channel
//!
//! ```text
//! y = x2_i' - f_{m+i}(x) - (g u)_i = f_u,i(x) + theta_i' phi_i(x) + lambda' (psi u)
//! ```
//!
//! and refined in dataset order: first the `f_u` enclosure and the `theta`
//! sweep for every sample, then the `lambda` sweep using the final `theta`
//! box. The recursion is order dependent; every ordering is sound.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerError, NominalSelection};
use crate::interval::{Interval, IntervalError, IntervalRowVector};
use crate::model::{norm, vec_fn, GMode, ModelError, System, UncertaintyPrior};

/// Absolute widening applied when an intersection of analytically
/// overlapping operands comes out empty through round-off.
pub const PAD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TighteningError {
    #[error("data inconsistent at sample {sample} (channel {channel}): {stage} intersection is empty")]
    DataInconsistent {
        channel: usize,
        sample: usize,
        stage: String,
    },
    #[error("tightened lambda[{channel}][{entry}] = {interval} contains zero; the input gain can no longer be bounded away from zero")]
    SignUndetermined {
        channel: usize,
        entry: usize,
        interval: Interval,
    },
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn check_dims(&self, dim: usize, n: usize) -> Result<(), TighteningError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != dim || s.xdot.len() != dim || s.u.len() != n {
                return Err(TighteningError::Dataset(format!(
                    "sample {} has dims (x {}, xdot {}, u {}); expected ({dim}, {dim}, {n})",
                    i + 1,
                    s.x.len(),
                    s.xdot.len(),
                    s.u.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes `t, x_*, xdot_*, u_*` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W, dim: usize, n: usize) -> Result<(), TighteningError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..dim).map(|k| format!("x_{k}")));
        header.extend((0..dim).map(|k| format!("xdot_{k}")));
        header.extend((0..n).map(|k| format!("u_{k}")));
        wtr.write_record(&header)?;
        for s in &self.samples {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.x.iter().copied())
                .chain(s.xdot.iter().copied())
                .chain(s.u.iter().copied())
                .map(|v| format!("{v:.17e}"))
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TighteningError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let idx = |prefix: &str| -> Vec<usize> {
            headers
                .iter()
                .enumerate()
                .filter(|(_, h)| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
                })
                .map(|(i, _)| i)
                .collect()
        };
        let (xi, di, ui) = (idx("x_"), idx("xdot_"), idx("u_"));
        let ti = headers.iter().position(|h| h == "t");
        if xi.is_empty() || xi.len() != di.len() || ui.is_empty() {
            return Err(TighteningError::Dataset(
                "header must name x_k, xdot_k (same count) and u_k columns".into(),
            ));
        }
        let mut samples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, TighteningError> {
                rec.get(i)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| TighteningError::Dataset(format!("row {}: column {i}: {e}", row + 1)))
            };
            samples.push(Sample {
                t: ti.map(num).transpose()?.unwrap_or(row as f64),
                x: xi.iter().map(|&i| num(i)).collect::<Result<_, _>>()?,
                xdot: di.iter().map(|&i| num(i)).collect::<Result<_, _>>()?,
                u: ui.iter().map(|&i| num(i)).collect::<Result<_, _>>()?,
            });
        }
        Ok(Self { samples })
    }

    pub fn load(path: &Path) -> Result<Self, TighteningError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// One sample reduced to a scalar channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub x: Vec<f64>,
    pub y: f64,
    pub phi: Vec<f64>,
    /// `psi u` entries, aligned with the channel's lambda vector.
    pub psi_u: Vec<f64>,
    /// Prior `[f_u_lo, f_u_hi]` for this row at `x`.
    pub fu: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FRecord {
    pub x: Vec<f64>,
    pub f: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedBounds {
    pub p: IntervalRowVector,
    pub q: IntervalRowVector,
    pub f_records: Vec<FRecord>,
    pub lipschitz: f64,
    /// `P^i` after each sample, starting with the prior.
    #[serde(skip)]
    pub p_history: Vec<IntervalRowVector>,
    #[serde(skip)]
    pub q_history: Vec<IntervalRowVector>,
}

fn meet(a: Interval, b: Interval, channel: usize, sample: usize, stage: &str) -> Result<Interval, TighteningError> {
    a.intersect(&b)
        .or_else(|| a.inflate(PAD).intersect(&b.inflate(PAD)))
        .ok_or_else(|| TighteningError::DataInconsistent {
            channel,
            sample,
            stage: stage.to_string(),
        })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Runs the recursion for one channel. `seed` is `(x0, F0)`; when absent the
/// first sample doubles as `x0` with its prior `f_u` bounds. `channel` is only
/// used in diagnostics.
pub fn refine(
    samples: &[ChannelSample],
    p0: &IntervalRowVector,
    q0: &IntervalRowVector,
    lipschitz: f64,
    seed: Option<(Vec<f64>, Interval)>,
    channel: usize,
) -> Result<TightenedBounds, TighteningError> {
    let (pn, qn) = (p0.len(), q0.len());
    for (k, s) in samples.iter().enumerate() {
        if s.phi.len() != pn || s.psi_u.len() != qn {
            return Err(TighteningError::Dataset(format!(
                "sample {} regressor lengths ({}, {}) do not match bounds ({pn}, {qn})",
                k + 1,
                s.phi.len(),
                s.psi_u.len()
            )));
        }
    }
    let mut f_records: Vec<FRecord> = Vec::with_capacity(samples.len() + 1);
    match seed {
        Some((x, f)) => f_records.push(FRecord { x, f }),
        None => {
            if let Some(s) = samples.first() {
                f_records.push(FRecord {
                    x: s.x.clone(),
                    f: s.fu,
                })
            }
        }
    }

    // f_u enclosures, which only use the priors.
    let mut f_at: Vec<Interval> = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let i = k + 1;
        let mut f = s.fu;
        for rec in &f_records {
            let widened = rec.f + Interval::symmetric(lipschitz * dist(&s.x, &rec.x));
            f = meet(f, widened, channel, i, "Lipschitz envelope (F)")?;
        }
        let data = s.y - p0.dot(&s.phi)? - q0.dot(&s.psi_u)?;
        f = meet(f, data, channel, i, "data residual (F)")?;
        f_at.push(f);
        f_records.push(FRecord { x: s.x.clone(), f });
    }

    // theta sweep
    let mut p = p0.clone();
    let mut p_history = vec![p.clone()];
    for (k, s) in samples.iter().enumerate() {
        let i = k + 1;
        let prev = p.clone();
        let mut v = meet(
            s.y - f_at[k] - q0.dot(&s.psi_u)?,
            prev.dot(&s.phi)?,
            channel,
            i,
            "v_0",
        )?;
        for r in 0..pn {
            let tail = prev.dot_range(&s.phi, r + 1..pn);
            let own = prev.entries[r] * s.phi[r];
            if s.phi[r] != 0.0 {
                let stage = format!("P_{}", r + 1);
                let hit = meet(v - tail, own, channel, i, &stage)?;
                p.entries[r] = hit.div_scalar(s.phi[r])?.clamp_into(&prev.entries[r]);
            }
            v = meet(v - own, tail, channel, i, &format!("v_{}", r + 1))?;
        }
        p_history.push(p.clone());
    }

    // lambda sweep with the final theta box
    let mut q = q0.clone();
    let mut q_history = vec![q.clone()];
    for (k, s) in samples.iter().enumerate() {
        let i = k + 1;
        let prev = q.clone();
        let mut w = meet(
            s.y - f_at[k] - p.dot(&s.phi)?,
            prev.dot(&s.psi_u)?,
            channel,
            i,
            "w_0",
        )?;
        for r in 0..qn {
            let tail = prev.dot_range(&s.psi_u, r + 1..qn);
            if s.psi_u[r] != 0.0 {
                let stage = format!("Q_{}", r + 1);
                let hit = meet(w - tail, prev.entries[r] * s.psi_u[r], channel, i, &stage)?;
                q.entries[r] = hit.div_scalar(s.psi_u[r])?.clamp_into(&prev.entries[r]);
            }
            w = meet(w - q.entries[r] * s.psi_u[r], tail, channel, i, &format!("w_{}", r + 1))?;
        }
        q_history.push(q.clone());
    }

    Ok(TightenedBounds {
        p,
        q,
        f_records,
        lipschitz,
        p_history,
        q_history,
    })
}

/// `f_u(x)` enclosure from the stored records, intersected with the prior.
pub fn f_u_envelope(bounds: &TightenedBounds, x: &[f64], prior: Interval) -> Result<Interval, TighteningError> {
    let mut f = prior;
    for (j, rec) in bounds.f_records.iter().enumerate() {
        let widened = rec.f + Interval::symmetric(bounds.lipschitz * dist(x, &rec.x));
        f = meet(f, widened, 0, j, "envelope")?;
    }
    Ok(f)
}

/// Reduces full samples to channel `i` of `system`.
pub fn channel_samples(
    system: &System,
    prior: &UncertaintyPrior,
    data: &Dataset,
    i: usize,
) -> Result<Vec<ChannelSample>, TighteningError> {
    let (m, n) = (system.m(), system.n());
    data.check_dims(m + n, n)?;
    data.samples
        .iter()
        .map(|s| {
            let f = (system.dynamics.f)(&s.x);
            let g = (system.dynamics.g)(&s.x);
            let psi = system.psi(&s.x);
            let (gu, psi_u) = match system.mode() {
                GMode::Diagonal => (g[i] * s.u[i], psi[i].iter().map(|v| v * s.u[i]).collect()),
                GMode::Full => {
                    let gu = (0..n).map(|j| g[i * n + j] * s.u[j]).sum();
                    let pu = (0..n)
                        .flat_map(|j| psi[i * n + j].iter().map(move |v| v * s.u[j]))
                        .collect();
                    (gu, pu)
                }
            };
            let lo = (prior.fu_lo)(&s.x)[m + i];
            let hi = (prior.fu_hi)(&s.x)[m + i];
            Ok(ChannelSample {
                x: s.x.clone(),
                y: s.xdot[m + i] - f[m + i] - gu,
                phi: system.regressors.phi[i](&s.x),
                psi_u,
                fu: Interval::new(lo, hi)?,
            })
        })
        .collect()
}

/// Prior boxes for channel `i` as row vectors; in full mode `Q` is the
/// concatenation of `lambda_i1, ..., lambda_in`.
pub fn channel_priors(
    system: &System,
    prior: &UncertaintyPrior,
    i: usize,
) -> Result<(IntervalRowVector, IntervalRowVector), TighteningError> {
    let n = system.n();
    let p = IntervalRowVector::from_bounds(&prior.theta_lo[i], &prior.theta_hi[i])?;
    let q = match system.mode() {
        GMode::Diagonal => IntervalRowVector::from_bounds(&prior.lambda_lo[i], &prior.lambda_hi[i])?,
        GMode::Full => IntervalRowVector::from_bounds(
            &prior.lambda_lo[i * n..(i + 1) * n].concat(),
            &prior.lambda_hi[i * n..(i + 1) * n].concat(),
        )?,
    };
    Ok((p, q))
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelReport {
    pub channel: usize,
    pub prior_theta: IntervalRowVector,
    pub prior_lambda: IntervalRowVector,
    pub theta: IntervalRowVector,
    pub lambda: IntervalRowVector,
    pub theta_width_ratio: Vec<f64>,
    pub lambda_width_ratio: Vec<f64>,
    pub lipschitz: f64,
    pub f_records: Vec<FRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TighteningReport {
    pub samples: usize,
    pub channels: Vec<ChannelReport>,
}

fn ratios(new: &IntervalRowVector, old: &IntervalRowVector) -> Vec<f64> {
    new.widths()
        .iter()
        .zip(old.widths())
        .map(|(a, b)| if b > 0.0 { a / b } else { 1.0 })
        .collect()
}

/// Refines every channel of `system` from `data`.
pub fn refine_system(
    system: &System,
    prior: &UncertaintyPrior,
    data: &Dataset,
) -> Result<(Vec<TightenedBounds>, TighteningReport), TighteningError> {
    let mut out = Vec::with_capacity(system.n());
    let mut channels = Vec::with_capacity(system.n());
    for i in 0..system.n() {
        let samples = channel_samples(system, prior, data, i)?;
        let (p0, q0) = channel_priors(system, prior, i)?;
        let tb = refine(&samples, &p0, &q0, prior.lipschitz, None, i)?;
        channels.push(ChannelReport {
            channel: i,
            theta_width_ratio: ratios(&tb.p, &p0),
            lambda_width_ratio: ratios(&tb.q, &q0),
            prior_theta: p0,
            prior_lambda: q0,
            theta: tb.p.clone(),
            lambda: tb.q.clone(),
            lipschitz: tb.lipschitz,
            f_records: tb.f_records.clone(),
        });
        out.push(tb);
    }
    Ok((
        out,
        TighteningReport {
            samples: data.len(),
            channels,
        },
    ))
}

/// Prior and nominal selection rebuilt from tightened bounds: boxes replaced,
/// nominals at interval midpoints, bound constants recomputed and the
/// controlled `f_u` rows replaced by the Lipschitz envelope.
pub fn rebuild_prior(
    system: &System,
    prior: &UncertaintyPrior,
    bounds: &[TightenedBounds],
) -> Result<(UncertaintyPrior, NominalSelection), TighteningError> {
    let (m, n) = (system.m(), system.n());
    if bounds.len() != n {
        return Err(TighteningError::Dataset(format!("expected {n} channel results, got {}", bounds.len())));
    }
    let mut theta_lo = prior.theta_lo.clone();
    let mut theta_hi = prior.theta_hi.clone();
    let mut lambda_lo = prior.lambda_lo.clone();
    let mut lambda_hi = prior.lambda_hi.clone();
    for (i, tb) in bounds.iter().enumerate() {
        theta_lo[i] = tb.p.lo();
        theta_hi[i] = tb.p.hi();
        match system.mode() {
            GMode::Diagonal => {
                if let Some((entry, iv)) = tb.q.entries.iter().enumerate().find(|(_, iv)| iv.contains_zero()) {
                    return Err(TighteningError::SignUndetermined {
                        channel: i,
                        entry,
                        interval: *iv,
                    });
                }
                lambda_lo[i] = tb.q.lo();
                lambda_hi[i] = tb.q.hi();
            }
            GMode::Full => {
                let mut off = 0;
                for j in 0..n {
                    let len = prior.lambda_lo[i * n + j].len();
                    lambda_lo[i * n + j] = tb.q.lo()[off..off + len].to_vec();
                    lambda_hi[i * n + j] = tb.q.hi()[off..off + len].to_vec();
                    off += len;
                }
            }
        }
    }
    let mid = |lo: &[Vec<f64>], hi: &[Vec<f64>]| -> Vec<Vec<f64>> {
        lo.iter()
            .zip(hi)
            .map(|(l, h)| l.iter().zip(h).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect()
    };
    let theta0 = mid(&theta_lo, &theta_hi);
    let lambda0 = mid(&lambda_lo, &lambda_hi);

    let env: Vec<TightenedBounds> = bounds.to_vec();
    let (old_lo, old_hi) = (prior.fu_lo.clone(), prior.fu_hi.clone());
    let envelope = move |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut lo = old_lo(x);
        let mut hi = old_hi(x);
        for (i, tb) in env.iter().enumerate() {
            let base = Interval::new(lo[m + i], hi[m + i]).unwrap_or(Interval::point(lo[m + i]));
            // An empty envelope can only come from round-off far from the data;
            // the prior row is kept in that case.
            if let Ok(iv) = f_u_envelope(tb, x, base) {
                lo[m + i] = iv.lo();
                hi[m + i] = iv.hi();
            }
        }
        (lo, hi)
    };
    let envelope = std::sync::Arc::new(envelope);
    let e_lo = envelope.clone();
    let new_prior = UncertaintyPrior {
        theta_lo,
        theta_hi,
        lambda_lo,
        lambda_hi,
        fu_lo: vec_fn(move |x| e_lo(x).0),
        fu_hi: vec_fn(move |x| envelope(x).1),
        lipschitz: prior.lipschitz,
    };
    let nominal = NominalSelection::new(&new_prior, theta0, lambda0, system.mode(), None, None)?;
    Ok((new_prior, nominal))
}

/// Width of the envelope at `x` summed over channels, for reporting.
pub fn envelope_width(prior: &UncertaintyPrior, x: &[f64]) -> f64 {
    let lo = (prior.fu_lo)(x);
    let hi = (prior.fu_hi)(x);
    norm(&lo.iter().zip(&hi).map(|(a, b)| b - a).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    fn wide() -> IntervalRowVector {
        IntervalRowVector::new(vec![iv(-10.0, 10.0)])
    }

    fn exact_recovery_samples() -> Vec<ChannelSample> {
        vec![
            ChannelSample {
                x: vec![0.0],
                y: 2.0,
                phi: vec![1.0],
                psi_u: vec![0.0],
                fu: iv(0.0, 0.0),
            },
            ChannelSample {
                x: vec![1.0],
                y: 3.0,
                phi: vec![0.0],
                psi_u: vec![1.0],
                fu: iv(0.0, 0.0),
            },
        ]
    }

    #[test]
    fn exact_recovery() {
        let tb = refine(&exact_recovery_samples(), &wide(), &wide(), 0.0, None, 0).unwrap();
        assert_eq!(tb.p.entries[0], iv(2.0, 2.0));
        assert_eq!(tb.q.entries[0], iv(3.0, 3.0));
        assert_eq!(tb.p.widths(), vec![0.0]);
        assert_eq!(tb.q.widths(), vec![0.0]);
    }

    #[test]
    fn empty_dataset_returns_priors() {
        let tb = refine(&[], &wide(), &wide(), 1.0, None, 0).unwrap();
        assert_eq!(tb.p, wide());
        assert_eq!(tb.q, wide());
        assert!(tb.f_records.is_empty());
        let tb = refine(&[], &wide(), &wide(), 1.0, Some((vec![0.5], iv(-1.0, 1.0))), 0).unwrap();
        assert_eq!(tb.f_records.len(), 1);
    }

    #[test]
    fn zero_regressor_keeps_previous_entry() {
        let s = vec![ChannelSample {
            x: vec![0.0],
            y: 1.0,
            phi: vec![0.0, 1.0],
            psi_u: vec![0.0],
            fu: iv(0.0, 0.0),
        }];
        let p0 = IntervalRowVector::new(vec![iv(-3.0, 3.0), iv(-10.0, 10.0)]);
        let tb = refine(&s, &p0, &wide(), 0.0, None, 0).unwrap();
        assert_eq!(tb.p.entries[0], iv(-3.0, 3.0));
        assert_eq!(tb.p.entries[1], iv(1.0, 1.0));
    }

    #[test]
    fn inconsistent_data_names_the_sample() {
        let mut s = exact_recovery_samples();
        // Needs lambda = 30, outside the prior.
        s[1].y = 30.0;
        let err = refine(&s, &wide(), &wide(), 0.0, None, 0).unwrap_err();
        match err {
            TighteningError::DataInconsistent { sample, .. } => assert_eq!(sample, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn envelope_with_zero_lipschitz_is_constant() {
        let tb = TightenedBounds {
            p: wide(),
            q: wide(),
            f_records: vec![
                FRecord {
                    x: vec![0.0],
                    f: iv(-1.0, 0.5),
                },
                FRecord {
                    x: vec![4.0],
                    f: iv(-0.5, 1.0),
                },
            ],
            lipschitz: 0.0,
            p_history: vec![],
            q_history: vec![],
        };
        for x in [-3.0, 0.0, 2.0, 9.0] {
            assert_eq!(f_u_envelope(&tb, &[x], iv(-2.0, 2.0)).unwrap(), iv(-0.5, 0.5));
        }
    }

    #[test]
    fn csv_roundtrip() {
        let d = Dataset {
            samples: vec![Sample {
                t: 0.5,
                x: vec![1.0, 2.0],
                xdot: vec![0.1, -0.25],
                u: vec![3.0],
            }],
        };
        let mut buf = Vec::new();
        d.write_csv(&mut buf, 2, 1).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }
}
