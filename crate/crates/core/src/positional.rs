//! Maps each positional method to the inputs the transformer sees: position
//! indices, a frequency basis and an attention-logit multiplier.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::model::{log_scale_mult, Method, ModelConfig, ModelError};
use crate::ode::{position_plan, sample_train_factor, solve_on, CacheSession, OdeVars, PositionMode};
use crate::real::Real;
use crate::rope::FrequencyBasis;
use crate::scaling::{alpha_codellama, alpha_pi, alpha_yarn, scale_basis, self_extend_factor, ScaleFactor, ScalingError};
use crate::tensor::Tensor;

/// Where the frequency basis for a forward pass comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaSource {
    Fixed(FrequencyBasis),
    /// Solve the learned dynamics from the unscaled basis up to this factor.
    Solved(f64),
}

/// Positional inputs of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEncoding {
    pub positions: Vec<f64>,
    pub theta: ThetaSource,
    /// Sampled factor for CLEX, the fixed factor otherwise.
    pub t: f64,
}

/// Positional inputs used to evaluate at one length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEncoding {
    pub positions: Vec<f64>,
    pub basis: FrequencyBasis,
    pub eval_t: f64,
    pub attn_scale_mult: f64,
}

pub fn unscaled_basis(cfg: &ModelConfig) -> Result<FrequencyBasis, ModelError> {
    FrequencyBasis::default_basis(cfg.head_dim(), cfg.rope_base).map_err(|e| ModelError::Config(e.to_string()))
}

fn scaled(cfg: &ModelConfig, method: Method, t: f64) -> Result<FrequencyBasis, ModelError> {
    let base = unscaled_basis(cfg)?;
    let d = cfg.head_dim();
    let conv = |e: ScalingError| ModelError::Config(e.to_string());
    let t = ScaleFactor::new(t).map_err(conv)?;
    let alpha = match method {
        Method::Yarn => alpha_yarn(t, d),
        Method::CodeLlama => alpha_codellama(d),
        _ => alpha_pi(ScaleFactor::ONE, d),
    }
    .map_err(conv)?;
    scale_basis(&base, &alpha).map_err(conv)
}

pub fn natural_positions(len: usize) -> Vec<f64> {
    (1..=len).map(|i| i as f64).collect()
}

/// Draws the positional inputs for one training step. Only CLEX and random
/// positions consume randomness.
pub fn train_encoding<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<TrainEncoding, ModelError> {
    let len = cfg.train_len;
    Ok(match cfg.method {
        Method::Rope => TrainEncoding {
            positions: natural_positions(len),
            theta: ThetaSource::Fixed(unscaled_basis(cfg)?),
            t: 1.0,
        },
        Method::Pi => TrainEncoding {
            positions: natural_positions(len).into_iter().map(|p| p / cfg.t_fixed).collect(),
            theta: ThetaSource::Fixed(unscaled_basis(cfg)?),
            t: cfg.t_fixed,
        },
        Method::Yarn => TrainEncoding {
            positions: natural_positions(len),
            theta: ThetaSource::Fixed(scaled(cfg, Method::Yarn, cfg.t_fixed)?),
            t: cfg.t_fixed,
        },
        Method::CodeLlama => TrainEncoding {
            positions: natural_positions(len),
            theta: ThetaSource::Fixed(scaled(cfg, Method::CodeLlama, 1.0)?),
            t: 1.0,
        },
        Method::RandomPos => {
            let plan = position_plan(len, cfg.t_train, len, PositionMode::RandomSampled, rng)?;
            TrainEncoding {
                positions: plan.positions,
                theta: ThetaSource::Fixed(unscaled_basis(cfg)?),
                t: 1.0,
            }
        }
        Method::Clex => {
            let t_prime = sample_train_factor(cfg.t_train, rng);
            let mode = if t_prime == 1.0 {
                PositionMode::Natural
            } else {
                cfg.position_mode
            };
            let plan = position_plan(len, t_prime, len, mode, rng)?;
            TrainEncoding {
                positions: plan.positions,
                theta: ThetaSource::Solved(t_prime),
                t: t_prime,
            }
        }
    })
}

/// Positional inputs for evaluating at `eval_len`. CLEX needs a cache
/// session; the discrete methods apply the self-extension rule with the
/// native length taken as the training length.
pub fn eval_encoding<T: Real>(
    cfg: &ModelConfig,
    eval_len: usize,
    session: Option<&mut CacheSession<'_, T>>,
) -> Result<EvalEncoding, ModelError> {
    let mult = log_scale_mult(cfg.train_len, eval_len);
    let natural = natural_positions(eval_len);
    let (positions, basis, eval_t) = match cfg.method {
        Method::Rope | Method::RandomPos => (natural, unscaled_basis(cfg)?, 1.0),
        Method::CodeLlama => (natural, scaled(cfg, Method::CodeLlama, 1.0)?, 1.0),
        Method::Pi => {
            let t = self_extend_factor(cfg.t_fixed, eval_len, cfg.train_len);
            (natural.into_iter().map(|p| p / t).collect(), unscaled_basis(cfg)?, t)
        }
        Method::Yarn => {
            let t = self_extend_factor(cfg.t_fixed, eval_len, cfg.train_len);
            (natural, scaled(cfg, Method::Yarn, t)?, t)
        }
        Method::Clex => {
            let session = session.ok_or_else(|| ModelError::Config("clex evaluation needs a basis cache".into()))?;
            let (t, basis) = session.lookup(eval_len)?;
            (natural, basis, t)
        }
    };
    Ok(EvalEncoding {
        positions,
        basis,
        eval_t,
        attn_scale_mult: mult,
    })
}

/// Puts the frequency basis for a training step on the tape.
pub fn theta_on<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    source: &ThetaSource,
    ode: Option<OdeVars>,
) -> Result<Var, ModelError> {
    match source {
        ThetaSource::Fixed(b) => Ok(g.constant(Tensor::vector(b.theta_as()))),
        ThetaSource::Solved(t) => {
            let ode = ode.ok_or_else(|| ModelError::Config("solved basis without an ODE network".into()))?;
            let z1 = unscaled_basis(cfg)?.to_log();
            let half = z1.len();
            let z1 = g.constant(Tensor::from_f64(&[half, 1], z1.z())?);
            let z = solve_on(g, z1, *t, ode, cfg.xi_form, cfg.steps_per_unit)?;
            Ok(g.exp(z)?)
        }
    }
}
