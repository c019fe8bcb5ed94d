//! Closed real intervals and interval row vectors.
//!
//! Plain floating-point endpoints, no outward rounding. Any slack needed to
//! absorb round-off lives in the tightening layer.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("interval lower bound {lo} exceeds upper bound {hi}")]
    Inverted { lo: f64, hi: f64 },
    #[error("interval endpoint is not a number")]
    Nan,
    #[error("division of an interval by zero")]
    ZeroDivisor,
    #[error("row vector has {got} entries but the column vector has {expected}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = IntervalError;
    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, IntervalError> {
        if lo.is_nan() || hi.is_nan() {
            return Err(IntervalError::Nan);
        }
        if lo > hi {
            return Err(IntervalError::Inverted { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    /// `[-r, r]` for `r >= 0`.
    pub fn symmetric(r: f64) -> Self {
        let r = r.abs();
        Self { lo: -r, hi: r }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Largest interval contained in both operands, or `None` when disjoint.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Widens both endpoints by `pad >= 0`.
    pub fn inflate(&self, pad: f64) -> Interval {
        Interval {
            lo: self.lo - pad,
            hi: self.hi + pad,
        }
    }

    /// Restricts `self` to `outer`, collapsing to the nearest endpoint if they
    /// do not overlap.
    pub fn clamp_into(&self, outer: &Interval) -> Interval {
        match self.intersect(outer) {
            Some(i) => i,
            None if self.hi < outer.lo => Interval::point(outer.lo),
            None => Interval::point(outer.hi),
        }
    }

    pub fn scale(&self, c: f64) -> Interval {
        let (a, b) = (self.lo * c, self.hi * c);
        Interval {
            lo: a.min(b),
            hi: a.max(b),
        }
    }

    pub fn div_scalar(&self, c: f64) -> Result<Interval, IntervalError> {
        if c == 0.0 {
            return Err(IntervalError::ZeroDivisor);
        }
        let (a, b) = (self.lo / c, self.hi / c);
        Ok(Interval {
            lo: a.min(b),
            hi: a.max(b),
        })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval {
            lo: self.lo + rhs.lo,
            hi: self.hi + rhs.hi,
        }
    }
}

impl Add<f64> for Interval {
    type Output = Interval;
    fn add(self, rhs: f64) -> Interval {
        Interval {
            lo: self.lo + rhs,
            hi: self.hi + rhs,
        }
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval {
            lo: self.lo - rhs.hi,
            hi: self.hi - rhs.lo,
        }
    }
}

impl Sub<Interval> for f64 {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval {
            lo: self - rhs.hi,
            hi: self - rhs.lo,
        }
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        Interval {
            lo: p.iter().copied().fold(f64::INFINITY, f64::min),
            hi: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl Mul<f64> for Interval {
    type Output = Interval;
    fn mul(self, rhs: f64) -> Interval {
        self.scale(rhs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRowVector {
    pub entries: Vec<Interval>,
}

impl IntervalRowVector {
    pub fn new(entries: Vec<Interval>) -> Self {
        Self { entries }
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self, IntervalError> {
        if lo.len() != hi.len() {
            return Err(IntervalError::Length {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        lo.iter()
            .zip(hi)
            .map(|(&l, &h)| Interval::new(l, h))
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row-times-column product, the interval sum of `entries[k] * v[k]`.
    pub fn dot(&self, v: &[f64]) -> Result<Interval, IntervalError> {
        if v.len() != self.entries.len() {
            return Err(IntervalError::Length {
                expected: v.len(),
                got: self.entries.len(),
            });
        }
        Ok(self.dot_range(v, 0..v.len()))
    }

    /// Partial product over `range`; an empty range gives `[0, 0]`.
    pub fn dot_range(&self, v: &[f64], range: std::ops::Range<usize>) -> Interval {
        range.fold(Interval::point(0.0), |acc, k| acc + self.entries[k] * v[k])
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.entries.len() && self.entries.iter().zip(v).all(|(i, &x)| i.contains(x))
    }

    pub fn is_subset_of(&self, other: &IntervalRowVector) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.is_subset_of(b))
    }

    pub fn lo(&self) -> Vec<f64> {
        self.entries.iter().map(Interval::lo).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.entries.iter().map(Interval::hi).collect()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.entries.iter().map(Interval::mid).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.entries.iter().map(Interval::width).collect()
    }
}
