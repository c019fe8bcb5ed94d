//! Randomized oracles shared by the integration tests and the acceptance
//! target. Every routine returns a [`Tally`] instead of panicking so callers
//! can either assert or report.
#![allow(dead_code)]

use std::fmt;

use acbf::controller::{closed_form_solve, stationary_point, ChannelProblem};
use acbf::interval::{Interval, IntervalRowVector};
use acbf::model::{const_fn, GMode, KnownDynamics, Regressors, System};
use acbf::parallel::map_range;
use acbf::tightening::{f_u_envelope, refine, ChannelSample, TightenedBounds};
use acbf::Execution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Default)]
pub struct Tally {
    pub checked: usize,
    pub violations: usize,
    pub first: Option<String>,
}

impl Tally {
    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.checked += other.checked;
        self.violations += other.violations;
        if self.first.is_none() {
            self.first = other.first;
        }
        self
    }

    pub fn ok(&self) -> bool {
        self.violations == 0 && self.checked > 0
    }
}

impl fmt::Display for Tally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} checks, {} violations", self.checked, self.violations)?;
        if let Some(first) = &self.first {
            write!(f, " (first: {first})")?;
        }
        Ok(())
    }
}

fn merge_all(parts: Vec<Tally>) -> Tally {
    parts.into_iter().fold(Tally::default(), Tally::merge)
}

fn rng_for(seed: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64))
}

/// Written out longhand from the definition so that it does not share code
/// with the library.
pub fn s_ref(y: f64, k1: f64, k2: f64, b: f64, h: f64, e2: f64) -> f64 {
    let quad = if k2 == 0.0 { 0.0 } else { k2 * k2 * y * y / (b * (k2 * h * y.abs() + e2)) };
    y + k1 / b + quad
}

// ---------------------------------------------------------------- closed form

#[derive(Debug, Clone, Copy)]
pub struct OracleInstance {
    pub problem: ChannelProblem,
    pub ubar: f64,
}

fn draw_instance(rng: &mut ChaCha8Rng) -> OracleInstance {
    loop {
        let sign: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let hx2: f64 = sign * rng.random_range(0.1..2.0);
        let b = rng.random_range(0.2..2.0);
        let mut kappa2 = rng.random_range(0.0..3.0);
        if rng.random_bool(0.05) {
            kappa2 = b * hx2.abs();
        }
        let kappa1 = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..2.0) };
        let phi1 = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-3.0..3.0) };
        let phi0 = rng.random_range(-5.0..5.0);
        let ubar = rng.random_range(-10.0..10.0);
        let eps2 = rng.random_range(1e-3..0.5);
        // Feasible means some grid point satisfies the constraint.
        let feasible = if phi1 == 0.0 {
            phi0 >= 0.0
        } else {
            let c = -phi0 / phi1;
            (phi1 > 0.0 && c <= 50.0) || (phi1 < 0.0 && c >= -50.0)
        };
        if feasible {
            return OracleInstance {
                problem: ChannelProblem {
                    phi0,
                    phi1,
                    hx2,
                    ud: ubar * hx2,
                    kappa1,
                    kappa2,
                    b,
                    eps2,
                },
                ubar,
            };
        }
    }
}

/// Closed-form solution against a scan of `u0` over `[-50, 50]` with step
/// `1e-3`: objective within `1e-4` of the best grid value, constraint slack
/// at least `-1e-9`, and `u = h_x2 s(u0)`.
pub fn closed_form_oracle(instances: usize, seed: u64, exec: Execution) -> Tally {
    let parts = map_range(exec, instances, |k| {
        let mut rng = rng_for(seed, k);
        let inst = draw_instance(&mut rng);
        let p = inst.problem;
        let h = p.hx2.abs();
        let s = |y: f64| s_ref(y, p.kappa1, p.kappa2, p.b, h, p.eps2);
        let mut best = f64::INFINITY;
        for j in 0..=100_000 {
            let u0 = -50.0 + j as f64 * 1e-3;
            if p.phi0 + p.phi1 * u0 >= 0.0 {
                best = best.min((s(u0) - inst.ubar).powi(2));
            }
        }
        let (u, diag) = closed_form_solve(&p);
        let obj = (s(diag.u0) - inst.ubar).powi(2);
        let slack = p.phi0 + p.phi1 * diag.u0;
        let applied = p.hx2 * s(diag.u0);
        let mut t = Tally::default();
        t.record(obj <= best + 1e-4, || format!("{p:?}: objective {obj} vs grid {best}"));
        t.record(slack >= -1e-9, || format!("{p:?}: constraint slack {slack}"));
        t.record((u - applied).abs() <= 1e-9 * (1.0 + applied.abs()), || {
            format!("{p:?}: u = {u} but h_x2 s(u0) = {applied}")
        });
        t
    });
    merge_all(parts)
}

// ---------------------------------------------------------------- s-function

/// Strict increase of `s` on random ordered pairs whenever `bbar >= kappa2`.
pub fn s_monotone(pairs: usize, seed: u64, exec: Execution) -> Tally {
    let parts = map_range(exec, pairs, |k| {
        let mut rng = rng_for(seed, k);
        let h = rng.random_range(0.05..3.0);
        let b = rng.random_range(0.05..3.0);
        let k2 = rng.random_range(0.0..1.0) * b * h;
        let k1 = rng.random_range(0.0..5.0);
        let e2 = rng.random_range(1e-4..1.0);
        let y1 = rng.random_range(-100.0..100.0);
        let y2 = y1 + rng.random_range(1e-3..50.0);
        let (s1, s2) = (s_ref(y1, k1, k2, b, h, e2), s_ref(y2, k1, k2, b, h, e2));
        let mut t = Tally::default();
        t.record(s2 > s1, || format!("k2 = {k2}, bbar = {}: s({y1}) = {s1} >= s({y2}) = {s2}", b * h));
        t
    });
    merge_all(parts)
}

fn nonmonotone_params(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64, f64) {
    let h = rng.random_range(0.05..3.0);
    let b = rng.random_range(0.05..3.0);
    let k2 = b * h * rng.random_range(1.01..20.0);
    let k1 = rng.random_range(0.0..5.0);
    let e2 = rng.random_range(1e-3..2.0);
    (k1, k2, b, h, e2)
}

/// `s(y*) <= s(y)` on `[y* - 10, y* + 10]` with step `1e-3` when `bbar < kappa2`.
pub fn s_minimum(params: usize, seed: u64, exec: Execution) -> Tally {
    let parts = map_range(exec, params, |k| {
        let mut rng = rng_for(seed, k);
        let (k1, k2, b, h, e2) = nonmonotone_params(&mut rng);
        let mut t = Tally::default();
        let ys = match stationary_point(k2, b, h, e2) {
            Ok(v) => v,
            Err(e) => {
                t.record(false, || e.to_string());
                return t;
            }
        };
        let smin = s_ref(ys, k1, k2, b, h, e2);
        let tol = 1e-12 * (1.0 + smin.abs());
        let mut worst = f64::INFINITY;
        for j in 0..=20_000 {
            let y = ys - 10.0 + j as f64 * 1e-3;
            worst = worst.min(s_ref(y, k1, k2, b, h, e2) - smin);
        }
        t.record(ys < 0.0, || format!("y* = {ys} is not negative"));
        t.record(worst >= -tol, || format!("k2 = {k2}, bbar = {}: grid beats y* by {}", b * h, -worst));
        t
    });
    merge_all(parts)
}

/// Central difference of `s` at `y*` stays below `1e-5` in magnitude.
pub fn s_stationary(params: usize, seed: u64) -> Tally {
    let mut t = Tally::default();
    for k in 0..params {
        let mut rng = rng_for(seed, k);
        let (k1, k2, b, h, e2) = nonmonotone_params(&mut rng);
        let ys = stationary_point(k2, b, h, e2).expect("non-monotone parameters");
        let step = 1e-7 * (1.0 + ys.abs());
        let fd = (s_ref(ys + step, k1, k2, b, h, e2) - s_ref(ys - step, k1, k2, b, h, e2)) / (2.0 * step);
        t.record(fd.abs() < 1e-5, || format!("ds/dy at y* = {ys} is {fd}"));
    }
    t
}

// ---------------------------------------------------------------- mismatch bounds

fn randv(rng: &mut ChaCha8Rng, len: usize, r: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-r..r)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Random full-matrix systems:
/// `a'(f_theta - f_theta0) >= -mu |a| |Omega_phi|` and
/// `b'(g_lambda - g_lambda0) b c >= -nu |Omega_psi| |b|^2 |c|`.
pub fn mismatch_bounds(draws: usize, seed: u64, exec: Execution) -> Tally {
    let parts = map_range(exec, draws, |k| {
        let mut rng = rng_for(seed, k);
        let n = rng.random_range(1..=3usize);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3usize)).collect();
        let q: Vec<usize> = (0..n * n).map(|_| rng.random_range(1..=2usize)).collect();
        let phi: Vec<Vec<f64>> = p.iter().map(|&d| randv(&mut rng, d, 3.0)).collect();
        let psi: Vec<Vec<f64>> = q.iter().map(|&d| randv(&mut rng, d, 3.0)).collect();
        let theta: Vec<Vec<f64>> = p.iter().map(|&d| randv(&mut rng, d, 10.0)).collect();
        let theta0: Vec<Vec<f64>> = p.iter().map(|&d| randv(&mut rng, d, 10.0)).collect();
        let lambda: Vec<Vec<f64>> = q.iter().map(|&d| randv(&mut rng, d, 10.0)).collect();
        let lambda0: Vec<Vec<f64>> = q.iter().map(|&d| randv(&mut rng, d, 10.0)).collect();
        let system = System {
            dynamics: KnownDynamics {
                m: 0,
                n,
                f: const_fn(vec![0.0; n]),
                g: const_fn(randv(&mut rng, n * n, 2.0)),
                mode: GMode::Full,
            },
            regressors: Regressors {
                phi: phi.iter().cloned().map(const_fn).collect(),
                psi: psi.iter().cloned().map(const_fn).collect(),
                p: p.clone(),
                q: q.clone(),
            },
        };
        let x: Vec<f64> = randv(&mut rng, n, 1.0);
        let a = randv(&mut rng, n, 5.0);
        let bv = randv(&mut rng, n, 5.0);
        let c = rng.random_range(-5.0..5.0);

        let diff = |u: &[Vec<f64>], v: &[Vec<f64>]| norm(&u.concat().iter().zip(v.concat()).map(|(s, t)| s - t).collect::<Vec<_>>());
        let mu = diff(&theta, &theta0);
        let nu = diff(&lambda, &lambda0);
        let om_phi = norm(&phi.concat());
        let om_psi = norm(&psi.concat());

        let ft = system.f_theta(&x, &theta);
        let ft0 = system.f_theta(&x, &theta0);
        let lhs_a: f64 = (0..n).map(|i| a[i] * (ft[i] - ft0[i])).sum();
        let rhs_a = -mu * norm(&a) * om_phi;

        let gt = system.g_tilde(&x, &lambda);
        let gt0 = system.g_tilde(&x, &lambda0);
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += bv[i] * (gt[i * n + j] - gt0[i * n + j]) * bv[j];
            }
        }
        let lhs_b = quad * c;
        let rhs_b = -nu * om_psi * norm(&bv).powi(2) * c.abs();

        let mut t = Tally::default();
        let tol = |v: f64| 1e-12 * (1.0 + v.abs());
        t.record(lhs_a >= rhs_a - tol(rhs_a), || format!("drift bound: {lhs_a} < {rhs_a}"));
        t.record(lhs_b >= rhs_b - tol(rhs_b), || format!("input bound: {lhs_b} < {rhs_b}"));
        t
    });
    merge_all(parts)
}

// ---------------------------------------------------------------- tightening

pub struct SyntheticScalar {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub amp: f64,
    pub freq: f64,
    pub shift: f64,
    pub fu_bound: f64,
    pub p0: IntervalRowVector,
    pub q0: IntervalRowVector,
    pub samples: Vec<ChannelSample>,
}

impl SyntheticScalar {
    pub fn f_u(&self, x: f64) -> f64 {
        self.amp * (self.freq * x + self.shift).sin()
    }

    pub fn lipschitz(&self) -> f64 {
        self.amp.abs() * self.freq
    }

    pub fn prior_fu(&self) -> Interval {
        Interval::new(-self.fu_bound, self.fu_bound).unwrap()
    }

    pub fn refine(&self, samples: &[ChannelSample]) -> Result<TightenedBounds, String> {
        refine(samples, &self.p0, &self.q0, self.lipschitz(), None, 0).map_err(|e| e.to_string())
    }
}

fn regressors(x: f64) -> (Vec<f64>, Vec<f64>) {
    (vec![x, x.sin(), 1.0], vec![1.0, x * x])
}

fn random_box(rng: &mut ChaCha8Rng, truth: &[f64]) -> IntervalRowVector {
    IntervalRowVector::new(
        truth
            .iter()
            .map(|&t| Interval::new(t - rng.random_range(0.1..3.0), t + rng.random_range(0.1..3.0)).unwrap())
            .collect(),
    )
}

/// Scalar plant `y = f_u(x) + theta' phi(x) + lambda' psi(x) u` with a
/// sinusoidal `f_u` and random boxes around the truth.
pub fn synthetic_scalar(rng: &mut ChaCha8Rng, samples: usize) -> SyntheticScalar {
    let theta = randv(rng, 3, 3.0);
    let lambda = vec![rng.random_range(0.5..3.0), rng.random_range(-1.0..1.0)];
    let amp = rng.random_range(0.1..2.0);
    let freq = rng.random_range(0.2..2.0);
    let shift = rng.random_range(0.0..6.0);
    let fu_bound = amp + rng.random_range(0.0..1.0);
    let p0 = random_box(rng, &theta);
    let q0 = random_box(rng, &lambda);
    let mut sc = SyntheticScalar {
        theta,
        lambda,
        amp,
        freq,
        shift,
        fu_bound,
        p0,
        q0,
        samples: Vec::new(),
    };
    let fu = sc.prior_fu();
    sc.samples = (0..samples)
        .map(|_| {
            let x = rng.random_range(-2.0..2.0);
            let u = rng.random_range(-3.0..3.0);
            let (phi, psi) = regressors(x);
            let psi_u: Vec<f64> = psi.iter().map(|v| v * u).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let y = sc.f_u(x) + dot(&sc.theta, &phi) + dot(&sc.lambda, &psi_u);
            ChannelSample {
                x: vec![x],
                y,
                phi,
                psi_u,
                fu,
            }
        })
        .collect();
    sc
}

fn check_bounds(sc: &SyntheticScalar, b: &TightenedBounds, label: &str, t: &mut Tally) {
    for (r, v) in sc.theta.iter().enumerate() {
        let e = b.p.entries[r];
        t.record(e.contains(*v), || format!("{label}: theta[{r}] = {v} outside {e}"));
    }
    for (r, v) in sc.lambda.iter().enumerate() {
        let e = b.q.entries[r];
        t.record(e.contains(*v), || format!("{label}: lambda[{r}] = {v} outside {e}"));
    }
    for j in 0..50 {
        let x = -2.0 + 4.0 * j as f64 / 49.0;
        let truth = sc.f_u(x);
        match f_u_envelope(b, &[x], sc.prior_fu()) {
            Ok(f) => t.record(f.contains(truth), || format!("{label}: f_u({x}) = {truth} outside {f}")),
            Err(e) => t.record(false, || format!("{label}: envelope at {x}: {e}")),
        }
    }
    for (k, w) in b.p_history.windows(2).enumerate() {
        t.record(w[1].is_subset_of(&w[0]), || format!("{label}: P^{} not inside P^{k}", k + 1));
    }
    for (k, w) in b.q_history.windows(2).enumerate() {
        t.record(w[1].is_subset_of(&w[0]), || format!("{label}: Q^{} not inside Q^{k}", k + 1));
    }
}

/// Each scenario is refined under `orderings` shuffles of its data.
pub fn soundness(scenarios: usize, orderings: usize, seed: u64, exec: Execution) -> Tally {
    let parts = map_range(exec, scenarios, |k| {
        let mut rng = rng_for(seed, k);
        let sc = synthetic_scalar(&mut rng, 20);
        let mut t = Tally::default();
        let mut data = sc.samples.clone();
        for o in 0..orderings {
            if o > 0 {
                data.shuffle(&mut rng);
            }
            let label = format!("scenario {k}, ordering {o}");
            match sc.refine(&data) {
                Ok(b) => check_bounds(&sc, &b, &label, &mut t),
                Err(e) => t.record(false, || format!("{label}: {e}")),
            }
        }
        t
    });
    merge_all(parts)
}

/// Noise-free data with a known `f_u` pins every parameter exactly.
pub fn exact_recovery() -> Result<TightenedBounds, String> {
    let p0 = IntervalRowVector::from_bounds(&[0.0, -4.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
    let q0 = IntervalRowVector::from_bounds(&[0.0], &[2.0]).map_err(|e| e.to_string())?;
    let (theta, lambda) = ([1.5, -2.25], 0.75);
    let zero = Interval::point(0.0);
    let sample = |x: f64, phi: Vec<f64>, u: f64| ChannelSample {
        x: vec![x],
        y: theta[0] * phi[0] + theta[1] * phi[1] + lambda * u,
        phi,
        psi_u: vec![u],
        fu: zero,
    };
    let samples = vec![
        sample(0.0, vec![2.0, 0.0], 0.0),
        sample(1.0, vec![0.0, 4.0], 0.0),
        sample(2.0, vec![0.0, 0.0], 2.0),
    ];
    refine(&samples, &p0, &q0, 0.0, None, 0).map_err(|e| e.to_string())
}
