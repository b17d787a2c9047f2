//! Rotary position embedding.
//!
//! Frequencies use the 0-based convention `theta[i] = base^(-2i/d)`, so the
//! first pair always rotates at one radian per position. Pairs are adjacent
//! elements `(2i, 2i+1)`, not split halves.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::graph::rotate_pairs;
use crate::real::Real;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RopeError {
    #[error("head dimension must be even and at least 2, got {0}")]
    BadHeadDim(usize),
    #[error("rope base must be greater than 1, got {0}")]
    BadBase(f64),
    #[error("frequency {index} is not positive: {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("vector length {got} does not match head dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Rotation frequencies of one attention head, radians per position unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBasis {
    theta: Vec<f64>,
    head_dim: usize,
    base: f64,
}

impl FrequencyBasis {
    /// Standard RoPE frequencies `base^(-2i/d)` for `i = 0..d/2`.
    pub fn default_basis(head_dim: usize, base: f64) -> Result<Self, RopeError> {
        check_head_dim(head_dim)?;
        if !(base > 1.0) {
            return Err(RopeError::BadBase(base));
        }
        let d = head_dim as f64;
        let theta = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / d))
            .collect();
        Ok(Self {
            theta,
            head_dim,
            base,
        })
    }

    /// Wraps an arbitrary positive frequency vector. `base` is kept only as
    /// provenance for the unscaled basis it came from.
    pub fn from_theta(theta: Vec<f64>, base: f64) -> Result<Self, RopeError> {
        let head_dim = theta.len() * 2;
        check_head_dim(head_dim)?;
        if let Some((index, &value)) = theta.iter().enumerate().find(|(_, &v)| !(v > 0.0) || !v.is_finite()) {
            return Err(RopeError::NonPositive { index, value });
        }
        Ok(Self {
            theta,
            head_dim,
            base,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn half(&self) -> usize {
        self.theta.len()
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn to_log(&self) -> LogBasis {
        LogBasis {
            z: self.theta.iter().map(|t| t.ln()).collect(),
        }
    }

    pub fn theta_as<T: Real>(&self) -> Vec<T> {
        self.theta.iter().map(|&v| T::of(v)).collect()
    }
}

/// Natural log of a frequency basis; the state the scaling dynamics evolve.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBasis {
    z: Vec<f64>,
}

impl LogBasis {
    pub fn new(z: Vec<f64>) -> Self {
        Self { z }
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `exp(z)` as a frequency basis.
    pub fn to_basis(&self, base: f64) -> Result<FrequencyBasis, RopeError> {
        FrequencyBasis::from_theta(self.z.iter().map(|v| v.exp()).collect(), base)
    }
}

fn check_head_dim(d: usize) -> Result<(), RopeError> {
    if d < 2 || !d.is_multiple_of(2) {
        Err(RopeError::BadHeadDim(d))
    } else {
        Ok(())
    }
}

/// Rotates `x` (length `d`) to position `m` under `theta` (length `d/2`).
pub fn rotate<T: Real>(x: &[T], m: T, theta: &[T]) -> Result<Vec<T>, RopeError> {
    if x.len() != 2 * theta.len() {
        return Err(RopeError::LengthMismatch {
            expected: 2 * theta.len(),
            got: x.len(),
        });
    }
    let (sin, cos): (Vec<T>, Vec<T>) = theta.iter().map(|&th| (m * th).sin_cos()).unzip();
    let mut out = alloc::vec![T::zero(); x.len()];
    rotate_pairs(x, &mut out, &cos, &sin);
    Ok(out)
}

/// [`rotate`] against a [`FrequencyBasis`] in 64-bit precision.
pub fn apply_rotary(x: &[f64], m: f64, basis: &FrequencyBasis) -> Result<Vec<f64>, RopeError> {
    rotate(x, m, basis.theta())
}

/// Attention logit between `q` at position `m` and `k` at position `n`.
pub fn pair_score(q: &[f64], k: &[f64], m: f64, n: f64, basis: &FrequencyBasis) -> Result<f64, RopeError> {
    if q.len() != k.len() {
        return Err(RopeError::LengthMismatch {
            expected: q.len(),
            got: k.len(),
        });
    }
    let qr = apply_rotary(q, m, basis)?;
    let kr = apply_rotary(k, n, basis)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}
