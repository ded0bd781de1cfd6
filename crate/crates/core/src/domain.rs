//! Axis-aligned boxes used as compact surrogates for the whole state space.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box bounds have different lengths ({lo} vs {hi})")]
    LengthMismatch { lo: usize, hi: usize },
    #[error("box axis {axis} is empty or non-finite: [{lo}, {hi}]")]
    BadAxis { axis: usize, lo: f64, hi: f64 },
}

/// Closed box `[lo_1, hi_1] x ... x [lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoxRegion {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<BoxRepr> for BoxRegion {
    type Error = BoxError;
    fn try_from(r: BoxRepr) -> Result<Self, BoxError> {
        BoxRegion::new(r.lo, r.hi)
    }
}

impl From<BoxRegion> for BoxRepr {
    fn from(b: BoxRegion) -> Self {
        BoxRepr { lo: b.lo, hi: b.hi }
    }
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, BoxError> {
        if lo.len() != hi.len() {
            return Err(BoxError::LengthMismatch { lo: lo.len(), hi: hi.len() });
        }
        for (axis, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(BoxError::BadAxis { axis, lo: l, hi: h });
            }
        }
        Ok(BoxRegion { lo, hi })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, BoxError> {
        BoxRegion::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&x, (&l, &h))| l <= x && x <= h)
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (x, (&l, &h)) in p.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *x = x.clamp(l, h);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..=h) })
            .collect()
    }

    /// Cartesian product `self x other`.
    pub fn product(&self, other: &BoxRegion) -> BoxRegion {
        BoxRegion {
            lo: self.lo.iter().chain(&other.lo).copied().collect(),
            hi: self.hi.iter().chain(&other.hi).copied().collect(),
        }
    }

    pub fn min_width(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| h - l)
            .fold(f64::INFINITY, f64::min)
    }

    /// All `2^dim` corners, in binary counting order over axes.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                    .collect()
            })
            .collect()
    }
}
