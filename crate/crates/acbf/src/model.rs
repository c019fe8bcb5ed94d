//! Partitioned uncertain dynamics, barrier functions and parameter records.
//!
//! The state is `x = (x1; x2)` with `x1` of length `m` and `x2` of length `n`.
//! Unknown parameters enter the `x2` rows only:
//!
//! ```text
//! x' = f(x) + f_u(x) + (0; f_theta(x)) + (0; (g + g_lambda)(x) u)
//! ```
//!
//! Truth values live in [`UncertaintyTruth`], which only the plant side reads.
//! Controllers receive a [`System`] and a prior, never the truth record.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

pub fn vec_fn<F>(f: F) -> VecFn
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
{
    Arc::new(f)
}

pub fn scalar_fn<F>(f: F) -> ScalarFn
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Constant vector evaluator.
pub fn const_fn(v: Vec<f64>) -> VecFn {
    Arc::new(move |_| v.clone())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("true {param}[{index}] = {value} lies outside its prior [{lo}, {hi}]")]
    TruthOutsidePrior {
        param: String,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("prior for {param}[{index}] is inverted: [{lo}, {hi}]")]
    InvertedPrior {
        param: String,
        index: usize,
        lo: f64,
        hi: f64,
    },
    #[error("f_u bounds inverted in row {row} at x = {x:?}")]
    FuBoundsInverted { row: usize, x: Vec<f64> },
    #[error("invalid barrier: {0}")]
    Barrier(String),
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what: what.to_string(),
            expected,
            got,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Borrowed view of a state split into its two partitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionedState<'a> {
    pub x1: &'a [f64],
    pub x2: &'a [f64],
}

impl<'a> PartitionedState<'a> {
    pub fn split(x: &'a [f64], m: usize) -> Self {
        let (x1, x2) = x.split_at(m);
        Self { x1, x2 }
    }

    pub fn concat(&self) -> Vec<f64> {
        [self.x1, self.x2].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GMode {
    /// `g = diag(g_1, ..., g_n)` and `(g_lambda)_ii = lambda_i' psi_i`.
    Diagonal,
    /// `(g)_ij = g_ij` and `(g_lambda)_ij = lambda_ij' psi_ij`.
    Full,
}

impl GMode {
    /// Number of lambda blocks for an `n`-input system.
    pub fn blocks(self, n: usize) -> usize {
        match self {
            GMode::Diagonal => n,
            GMode::Full => n * n,
        }
    }
}

#[derive(Clone)]
pub struct KnownDynamics {
    pub m: usize,
    pub n: usize,
    pub f: VecFn,
    /// `n` entries in diagonal mode, `n*n` row-major entries in full mode.
    pub g: VecFn,
    pub mode: GMode,
}

#[derive(Clone)]
pub struct Regressors {
    pub phi: Vec<VecFn>,
    /// One evaluator per lambda block, laid out like [`GMode::blocks`].
    pub psi: Vec<VecFn>,
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

#[derive(Clone)]
pub struct UncertaintyTruth {
    pub theta: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub f_u: VecFn,
}

#[derive(Clone)]
pub struct UncertaintyPrior {
    pub theta_lo: Vec<Vec<f64>>,
    pub theta_hi: Vec<Vec<f64>>,
    pub lambda_lo: Vec<Vec<f64>>,
    pub lambda_hi: Vec<Vec<f64>>,
    pub fu_lo: VecFn,
    pub fu_hi: VecFn,
    pub lipschitz: f64,
}

impl UncertaintyPrior {
    /// Asserts that `theta`, `lambda` sit inside the prior boxes.
    pub fn check_contains(
        &self,
        theta: &[Vec<f64>],
        lambda: &[Vec<f64>],
        what: &str,
    ) -> Result<(), ModelError> {
        check_blocks(&format!("{what} theta"), theta, &self.theta_lo, &self.theta_hi)?;
        check_blocks(&format!("{what} lambda"), lambda, &self.lambda_lo, &self.lambda_hi)
    }

    pub fn check_ordered(&self) -> Result<(), ModelError> {
        for (name, lo, hi) in [
            ("theta", &self.theta_lo, &self.theta_hi),
            ("lambda", &self.lambda_lo, &self.lambda_hi),
        ] {
            check_len(&format!("{name} prior blocks"), lo.len(), hi.len())?;
            let mut flat = 0;
            for (l, h) in lo.iter().zip(hi.iter()) {
                check_len(&format!("{name} prior block"), l.len(), h.len())?;
                for (a, b) in l.iter().zip(h) {
                    if !(a <= b) {
                        return Err(ModelError::InvertedPrior {
                            param: name.to_string(),
                            index: flat,
                            lo: *a,
                            hi: *b,
                        });
                    }
                    flat += 1;
                }
            }
        }
        if self.lipschitz < 0.0 || !self.lipschitz.is_finite() {
            return Err(ModelError::InvertedPrior {
                param: "lipschitz".into(),
                index: 0,
                lo: 0.0,
                hi: self.lipschitz,
            });
        }
        Ok(())
    }

    /// Checks `fu_lo <= fu_hi` at each sample state.
    pub fn check_fu_bounds<'a>(
        &self,
        states: impl IntoIterator<Item = &'a Vec<f64>>,
    ) -> Result<(), ModelError> {
        for x in states {
            let (lo, hi) = ((self.fu_lo)(x), (self.fu_hi)(x));
            if let Some(row) = lo.iter().zip(&hi).position(|(a, b)| !(a <= b)) {
                return Err(ModelError::FuBoundsInverted { row, x: x.clone() });
            }
        }
        Ok(())
    }
}

fn check_blocks(
    what: &str,
    v: &[Vec<f64>],
    lo: &[Vec<f64>],
    hi: &[Vec<f64>],
) -> Result<(), ModelError> {
    check_len(what, lo.len(), v.len())?;
    let mut flat = 0;
    for ((b, l), h) in v.iter().zip(lo).zip(hi) {
        check_len(what, l.len(), b.len())?;
        for ((&value, &lo), &hi) in b.iter().zip(l).zip(h) {
            if !(lo <= value && value <= hi) {
                return Err(ModelError::TruthOutsidePrior {
                    param: what.to_string(),
                    index: flat,
                    value,
                    lo,
                    hi,
                });
            }
            flat += 1;
        }
    }
    Ok(())
}

/// Known dynamics plus regressors. Parameter vectors are always passed in,
/// so the same evaluators serve the plant (truth) and controller (nominal).
#[derive(Clone)]
pub struct System {
    pub dynamics: KnownDynamics,
    pub regressors: Regressors,
}

impl fmt::Debug for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("System")
            .field("m", &self.dynamics.m)
            .field("n", &self.dynamics.n)
            .field("mode", &self.dynamics.mode)
            .field("p", &self.regressors.p)
            .field("q", &self.regressors.q)
            .finish()
    }
}

impl System {
    pub fn m(&self) -> usize {
        self.dynamics.m
    }

    pub fn n(&self) -> usize {
        self.dynamics.n
    }

    pub fn dim(&self) -> usize {
        self.dynamics.m + self.dynamics.n
    }

    pub fn mode(&self) -> GMode {
        self.dynamics.mode
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n();
        let blocks = self.mode().blocks(n);
        check_len("phi evaluators", n, self.regressors.phi.len())?;
        check_len("p dimensions", n, self.regressors.p.len())?;
        check_len("psi evaluators", blocks, self.regressors.psi.len())?;
        check_len("q dimensions", blocks, self.regressors.q.len())
    }

    /// Checks that parameter blocks have the regressor dimensions.
    pub fn check_params(&self, theta: &[Vec<f64>], lambda: &[Vec<f64>]) -> Result<(), ModelError> {
        check_len("theta blocks", self.n(), theta.len())?;
        for (i, t) in theta.iter().enumerate() {
            check_len(&format!("theta[{i}]"), self.regressors.p[i], t.len())?;
        }
        check_len("lambda blocks", self.regressors.q.len(), lambda.len())?;
        for (k, l) in lambda.iter().enumerate() {
            check_len(&format!("lambda[{k}]"), self.regressors.q[k], l.len())?;
        }
        Ok(())
    }

    pub fn phi(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.regressors.phi.iter().map(|f| f(x)).collect()
    }

    pub fn psi(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.regressors.psi.iter().map(|f| f(x)).collect()
    }

    /// `f_theta(x)`, one entry per `x2` row.
    pub fn f_theta(&self, x: &[f64], theta: &[Vec<f64>]) -> Vec<f64> {
        self.phi(x).iter().zip(theta).map(|(p, t)| dot(p, t)).collect()
    }

    /// `g + g_lambda` as an `n x n` row-major matrix.
    pub fn g_tilde(&self, x: &[f64], lambda: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n();
        let g = (self.dynamics.g)(x);
        let psi = self.psi(x);
        let mut out = vec![0.0; n * n];
        match self.mode() {
            GMode::Diagonal => {
                for i in 0..n {
                    out[i * n + i] = g[i] + dot(&lambda[i], &psi[i]);
                }
            }
            GMode::Full => {
                for k in 0..n * n {
                    out[k] = g[k] + dot(&lambda[k], &psi[k]);
                }
            }
        }
        out
    }

    /// Right-hand side with the given parameters and `f_u` evaluator.
    pub fn derivative_with(
        &self,
        theta: &[Vec<f64>],
        lambda: &[Vec<f64>],
        f_u: &VecFn,
        x: &[f64],
        u: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let (m, n) = (self.m(), self.n());
        check_len("state", m + n, x.len())?;
        check_len("input", n, u.len())?;
        let f = (self.dynamics.f)(x);
        check_len("f(x)", m + n, f.len())?;
        let fu = f_u(x);
        check_len("f_u(x)", m + n, fu.len())?;
        let ft = self.f_theta(x, theta);
        let gt = self.g_tilde(x, lambda);
        let mut out: Vec<f64> = f.iter().zip(&fu).map(|(a, b)| a + b).collect();
        for i in 0..n {
            let gu: f64 = (0..n).map(|j| gt[i * n + j] * u[j]).sum();
            out[m + i] += ft[i] + gu;
        }
        Ok(out)
    }

    /// True plant right-hand side.
    pub fn plant_derivative(
        &self,
        truth: &UncertaintyTruth,
        x: &[f64],
        u: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        self.derivative_with(&truth.theta, &truth.lambda, &truth.f_u, x, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BarrierKind {
    Direct,
    /// `h_e = d/dt h_raw + alpha * h_raw`.
    Extended { alpha: f64 },
}

#[derive(Clone)]
pub struct Barrier {
    pub h: ScalarFn,
    pub grad: VecFn,
    pub kind: BarrierKind,
    /// The position-level barrier for extended constructions; `h` otherwise.
    pub raw: ScalarFn,
}

impl fmt::Debug for Barrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Barrier").field("kind", &self.kind).finish()
    }
}

impl Barrier {
    /// `h(x) = c'x + offset`.
    pub fn affine(c: Vec<f64>, offset: f64) -> Self {
        let cc = c.clone();
        let h = scalar_fn(move |x| dot(&cc, x) + offset);
        Self {
            raw: h.clone(),
            h,
            grad: const_fn(c),
            kind: BarrierKind::Direct,
        }
    }

    /// Extended barrier for a second-order system with state `(pos; vel)`,
    /// `vel = d/dt pos` and raw barrier `h = c'pos + offset`:
    /// `h_e = c'vel + alpha (c'pos + offset)`.
    pub fn extended_linear(c: Vec<f64>, offset: f64, alpha: f64) -> Result<Self, ModelError> {
        if !(alpha > 0.0) {
            return Err(ModelError::Barrier(format!("alpha must be positive, got {alpha}")));
        }
        let k = c.len();
        let c_raw = c.clone();
        let raw = scalar_fn(move |x| dot(&c_raw, &x[..k]) + offset);
        let c_h = c.clone();
        let h = scalar_fn(move |x| dot(&c_h, &x[k..2 * k]) + alpha * (dot(&c_h, &x[..k]) + offset));
        let grad: Vec<f64> = c.iter().map(|v| alpha * v).chain(c.iter().copied()).collect();
        Ok(Self {
            h,
            grad: const_fn(grad),
            kind: BarrierKind::Extended { alpha },
            raw,
        })
    }

    /// `(h(x), h_x(x))`; the last `n` gradient entries are `h_x2`.
    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        ((self.h)(x), (self.grad)(x))
    }

    pub fn raw_value(&self, x: &[f64]) -> f64 {
        (self.raw)(x)
    }
}
