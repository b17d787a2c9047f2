//! Discrete position-embedding scaling under a single per-frequency
//! multiplier `alpha(t)`.
//!
//! Scaling position indices by a constant is the same as scaling every
//! frequency by that constant, so PI, Yarn and CodeLLaMA all reduce to
//! `theta_t = alpha(t) * theta`. In log space this telescopes into a chain:
//! `z(t) = z(1) + log alpha(t)`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::rope::{FrequencyBasis, LogBasis, RopeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScalingError {
    #[error("scale factor must be >= 1, got {0}")]
    FactorBelowOne(f64),
    #[error("yarn profile needs head dimension >= 4, got {0}")]
    YarnDimTooSmall(usize),
    #[error("head dimension must be even and positive, got {0}")]
    BadHeadDim(usize),
    #[error("alpha entry {index} is not positive: {value}")]
    NonPositiveAlpha { index: usize, value: f64 },
    #[error("alpha has length {got}, basis has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Ratio `L'/L` of an extended context length to the native one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub const ONE: ScaleFactor = ScaleFactor(1.0);

    pub fn new(t: f64) -> Result<Self, ScalingError> {
        if t >= 1.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(ScalingError::FactorBelowOne(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// The scaling methods expressible as a frequency multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    Identity,
    Pi,
    Yarn,
    CodeLlama,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Identity => "identity",
            Profile::Pi => "pi",
            Profile::Yarn => "yarn",
            Profile::CodeLlama => "codellama",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "rope" => Ok(Profile::Identity),
            "pi" => Ok(Profile::Pi),
            "yarn" => Ok(Profile::Yarn),
            "codellama" | "cl" => Ok(Profile::CodeLlama),
            other => Err(alloc::format!("unknown scaling profile `{other}`")),
        }
    }
}

/// A method tag bound to a head dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaProfile {
    pub method: Profile,
    pub head_dim: usize,
}

impl AlphaProfile {
    pub fn new(method: Profile, head_dim: usize) -> Self {
        Self { method, head_dim }
    }

    pub fn eval(&self, t: ScaleFactor) -> Result<Vec<f64>, ScalingError> {
        match self.method {
            Profile::Identity => {
                check_dim(self.head_dim)?;
                Ok(vec![1.0; self.head_dim / 2])
            }
            Profile::Pi => alpha_pi(t, self.head_dim),
            Profile::Yarn => alpha_yarn(t, self.head_dim),
            Profile::CodeLlama => alpha_codellama(self.head_dim),
        }
    }
}

fn check_dim(d: usize) -> Result<(), ScalingError> {
    if d == 0 || !d.is_multiple_of(2) {
        Err(ScalingError::BadHeadDim(d))
    } else {
        Ok(())
    }
}

/// Position interpolation: every frequency divided by `t`.
pub fn alpha_pi(t: ScaleFactor, head_dim: usize) -> Result<Vec<f64>, ScalingError> {
    check_dim(head_dim)?;
    Ok(vec![1.0 / t.get(); head_dim / 2])
}

/// Yarn basis scaling: entry `i` is `t^(-2i/(d-2))`, spanning `[1, 1/t]`.
pub fn alpha_yarn(t: ScaleFactor, head_dim: usize) -> Result<Vec<f64>, ScalingError> {
    check_dim(head_dim)?;
    if head_dim < 4 {
        return Err(ScalingError::YarnDimTooSmall(head_dim));
    }
    let denom = (head_dim - 2) as f64;
    Ok((0..head_dim / 2)
        .map(|i| t.get().powf(-2.0 * i as f64 / denom))
        .collect())
}

/// CodeLLaMA's fixed multiplier `100^(-2i/d)`: a base of 10^4 becomes 10^6.
pub fn alpha_codellama(head_dim: usize) -> Result<Vec<f64>, ScalingError> {
    check_dim(head_dim)?;
    let d = head_dim as f64;
    Ok((0..head_dim / 2).map(|i| 100f64.powf(-2.0 * i as f64 / d)).collect())
}

fn check_alpha(alpha: &[f64]) -> Result<(), ScalingError> {
    match alpha.iter().enumerate().find(|(_, &a)| !(a > 0.0)) {
        Some((index, &value)) => Err(ScalingError::NonPositiveAlpha { index, value }),
        None => Ok(()),
    }
}

/// `alpha ⊙ theta`.
pub fn scale_basis(basis: &FrequencyBasis, alpha: &[f64]) -> Result<FrequencyBasis, ScalingError> {
    if alpha.len() != basis.half() {
        return Err(ScalingError::LengthMismatch {
            expected: basis.half(),
            got: alpha.len(),
        });
    }
    check_alpha(alpha)?;
    let theta = basis.theta().iter().zip(alpha).map(|(t, a)| t * a).collect();
    Ok(FrequencyBasis::from_theta(theta, basis.base())?)
}

/// Position interpolation on the index side: `m / t`.
pub fn scale_positions(positions: &[f64], t: ScaleFactor) -> Vec<f64> {
    positions.iter().map(|p| p / t.get()).collect()
}

/// One link of the log-basis chain: `z + log(alpha_next / alpha_prev)`.
pub fn chain_step(z_prev: &LogBasis, alpha_prev: &[f64], alpha_next: &[f64]) -> Result<LogBasis, ScalingError> {
    if alpha_prev.len() != z_prev.len() || alpha_next.len() != z_prev.len() {
        return Err(ScalingError::LengthMismatch {
            expected: z_prev.len(),
            got: alpha_prev.len().min(alpha_next.len()),
        });
    }
    check_alpha(alpha_prev)?;
    check_alpha(alpha_next)?;
    Ok(LogBasis::new(
        z_prev
            .z()
            .iter()
            .zip(alpha_prev.iter().zip(alpha_next))
            .map(|(z, (p, n))| z + (n / p).ln())
            .collect(),
    ))
}

/// Scale factor to evaluate a fixed-factor method at `eval_len`: the trained
/// factor, enlarged proportionally once `eval_len` passes `t_fixed * base_len`.
pub fn self_extend_factor(t_fixed: f64, eval_len: usize, base_len: usize) -> f64 {
    t_fixed.max(eval_len as f64 / base_len as f64)
}
