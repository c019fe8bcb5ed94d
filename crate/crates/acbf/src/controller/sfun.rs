//! The robustifying map `s(y)` and its inverse.
//!
//! ```text
//! s(y) = y + k1/b + k2^2 y^2 / (b (k2 H |y| + eps2))
//! ```
//!
//! with `H = |h_x2|` (or `||h_x2||` in the full-matrix variant). With
//! `bbar = b H`, `s` is increasing when `bbar >= k2`; otherwise it has a
//! single global minimum at `y* < 0` and is decreasing to its left.

use super::ControllerError;

/// Ties at the monotone boundary and at `Phi1 = 0` use this absolute threshold.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub b: f64,
    pub hx2_abs: f64,
    pub eps2: f64,
}

/// Which side of `y*` a preimage is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SBranch {
    Rising,
    Falling,
}

pub fn s_scalar(y: f64, kappa1: f64, kappa2: f64, b: f64, hx2_abs: f64, eps2: f64) -> f64 {
    SParams {
        kappa1,
        kappa2,
        b,
        hx2_abs,
        eps2,
    }
    .eval(y)
}

pub fn stationary_point(kappa2: f64, b: f64, hx2_abs: f64, eps2: f64) -> Result<f64, ControllerError> {
    let bbar = b * hx2_abs;
    let d = kappa2 - bbar;
    if !(d > 0.0) {
        return Err(ControllerError::Contract(format!(
            "stationary point requires bbar < kappa2, got bbar = {bbar}, kappa2 = {kappa2}"
        )));
    }
    let eps2_bar = eps2 / hx2_abs;
    Ok(eps2_bar * (d - (kappa2 * d).sqrt()) / (kappa2 * d))
}

impl SParams {
    pub fn eval(&self, y: f64) -> f64 {
        let k2 = self.kappa2;
        let extra = if k2 == 0.0 {
            0.0
        } else {
            k2 * k2 * y * y / (self.b * (k2 * self.hx2_abs * y.abs() + self.eps2))
        };
        y + self.kappa1 / self.b + extra
    }

    /// Analytic derivative `ds/dy`.
    pub fn deriv(&self, y: f64) -> f64 {
        let k2 = self.kappa2;
        if k2 == 0.0 {
            return 1.0;
        }
        let h = self.hx2_abs;
        let den = k2 * h * y.abs() + self.eps2;
        // d/dy [k2^2 y^2 / (b den)] = k2^2 (2 y den - y^2 k2 h sign(y)) / (b den^2)
        let num = 2.0 * y * den - y * y * k2 * h * y.signum();
        1.0 + k2 * k2 * num / (self.b * den * den)
    }

    pub fn bbar(&self) -> f64 {
        self.b * self.hx2_abs
    }

    pub fn is_monotone(&self) -> bool {
        self.bbar() - self.kappa2 >= -TIE_TOL
    }

    /// `y*` when non-monotone.
    pub fn minimizer(&self) -> Option<f64> {
        if self.is_monotone() {
            None
        } else {
            stationary_point(self.kappa2, self.b, self.hx2_abs, self.eps2).ok()
        }
    }

    /// A point whose image lies within `1e-9` (relative) of the infimum of a
    /// monotone `s` that is bounded below, which happens only at the tie
    /// `bbar == kappa2`. The infimum itself is approached as `y -> -inf`.
    pub fn near_infimum(&self) -> f64 {
        let inf = self.tie_infimum();
        let goal = inf + 1e-9 * (1.0 + inf.abs());
        self.inverse(goal, SBranch::Rising).unwrap_or(-1e12)
    }

    fn tie_infimum(&self) -> f64 {
        self.kappa1 / self.b - self.eps2 / (self.hx2_abs * self.kappa2)
    }

    fn at_tie(&self) -> bool {
        self.kappa2 > 0.0 && (self.bbar() - self.kappa2).abs() <= TIE_TOL
    }

    /// Solves `s(y) = target` on the requested branch. Returns `None` when the
    /// target is below the attainable range of that branch.
    pub fn inverse(&self, target: f64, branch: SBranch) -> Option<f64> {
        let ystar = self.minimizer();
        if let Some(ys) = ystar {
            if target < self.eval(ys) {
                return None;
            }
        } else if self.at_tie() && target <= self.tie_infimum() {
            // The near-degenerate quadratic would otherwise yield a huge
            // spurious root that passes the scaled residual check.
            return None;
        }
        let (lo, hi) = match (ystar, branch) {
            (Some(ys), SBranch::Rising) => (ys, f64::INFINITY),
            (Some(ys), SBranch::Falling) => (f64::NEG_INFINITY, ys),
            (None, _) => (f64::NEG_INFINITY, f64::INFINITY),
        };
        let falling = ystar.is_some() && branch == SBranch::Falling;
        let candidate = self
            .quadratic_roots(target)
            .into_iter()
            .filter(|y| *y >= lo && *y <= hi)
            .map(|y| self.polish(y, target, lo, hi))
            .filter(|y| self.residual_ok(*y, target))
            .fold(None, |best: Option<f64>, y| match best {
                None => Some(y),
                // Prefer the root on the requested side when both qualify.
                Some(b) if falling => Some(b.min(y)),
                Some(b) => Some(b.max(y)),
            });
        candidate.or_else(|| self.bisect(target, lo, hi, falling))
    }

    fn residual_ok(&self, y: f64, target: f64) -> bool {
        let scale = 1.0 + target.abs() + y.abs();
        y.is_finite() && (self.eval(y) - target).abs() <= 1e-9 * scale
    }

    /// Real roots of the two piecewise quadratics, filtered by sign region.
    fn quadratic_roots(&self, t: f64) -> Vec<f64> {
        let (k1, k2, b, h, e) = (self.kappa1, self.kappa2, self.b, self.hx2_abs, self.eps2);
        let mut out = Vec::with_capacity(4);
        // y >= 0
        push_roots(
            &mut out,
            b * k2 * h + k2 * k2,
            b * e + k1 * k2 * h - t * b * k2 * h,
            k1 * e - t * b * e,
            |y| y >= 0.0,
        );
        // y < 0
        push_roots(
            &mut out,
            k2 * k2 - b * k2 * h,
            b * e - k1 * k2 * h + t * b * k2 * h,
            k1 * e - t * b * e,
            |y| y < 0.0,
        );
        out
    }

    fn polish(&self, mut y: f64, target: f64, lo: f64, hi: f64) -> f64 {
        for _ in 0..3 {
            let d = self.deriv(y);
            if d.abs() < 1e-300 {
                break;
            }
            let next = y - (self.eval(y) - target) / d;
            if !next.is_finite() || next < lo || next > hi {
                break;
            }
            y = next;
        }
        y
    }

    fn bisect(&self, target: f64, lo: f64, hi: f64, falling: bool) -> Option<f64> {
        let r = |y: f64| self.eval(y) - target;
        let bounded = if falling { hi.is_finite() } else { lo.is_finite() };
        let anchor = match (falling, bounded) {
            (true, true) => hi,
            (false, true) => lo,
            _ => 0.0,
        };
        let dir = if falling { -1.0 } else { 1.0 };
        // Walk away from the anchor until s reaches the target.
        let mut step = 1.0_f64.max(target.abs());
        let mut far = anchor + dir * step;
        while r(far) < 0.0 {
            step *= 2.0;
            far = anchor + dir * step;
            if step > 1e300 {
                return None;
            }
        }
        let mut near = anchor;
        if r(near) > 0.0 {
            if bounded {
                return Some(anchor);
            }
            let mut step = 1.0_f64.max(target.abs());
            loop {
                near = anchor - dir * step;
                if r(near) <= 0.0 {
                    break;
                }
                step *= 2.0;
                if step > 1e300 {
                    return None;
                }
            }
        }
        // r(near) <= 0 <= r(far)
        for _ in 0..400 {
            let mid = 0.5 * (near + far);
            if mid == near || mid == far {
                break;
            }
            if r(mid) <= 0.0 {
                near = mid;
            } else {
                far = mid;
            }
        }
        let y = 0.5 * (near + far);
        self.residual_ok(y, target).then_some(y)
    }
}

fn push_roots(out: &mut Vec<f64>, a: f64, b: f64, c: f64, keep: impl Fn(f64) -> bool) {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return;
    }
    if a.abs() <= 1e-14 * scale {
        if b != 0.0 {
            let y = -c / b;
            if keep(y) {
                out.push(y);
            }
        }
        return;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return;
    }
    // Cancellation-free form of the quadratic formula.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = [q / a, if q != 0.0 { c / q } else { 0.0 }];
    if q == 0.0 {
        roots[1] = roots[0];
    }
    for y in roots {
        if y.is_finite() && keep(y) {
            out.push(y);
        }
    }
}
