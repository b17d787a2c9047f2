//! Byte-level decoder-only transformer with a pluggable rotary basis.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention and a
//! 4× SiLU MLP; the output head is tied to the token embedding. The only
//! positional inputs are the per-position indices, the frequency basis (a
//! tape node, so it may come out of an ODE solve) and a multiplier on the
//! attention logits. Every positional method shares this code path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::ode::{OdeError, OdeNet, OdeVars, PositionMode, XiForm, DEFAULT_STEPS_PER_UNIT};
use crate::real::Real;
use crate::rope::DEFAULT_BASE;
use crate::tensor::{Tensor, TensorError};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{tokens} tokens do not split into batch {batch} × {positions} positions")]
    SequenceMismatch {
        tokens: usize,
        batch: usize,
        positions: usize,
    },
    #[error("positions must be strictly increasing")]
    PositionsNotIncreasing,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Positional strategy injected at the query/key rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain RoPE, no scaling.
    Rope,
    /// Position interpolation with a fixed factor.
    Pi,
    /// Yarn basis scaling with a fixed factor.
    Yarn,
    /// CodeLLaMA's retuned base.
    CodeLlama,
    /// Plain RoPE trained on randomly sampled positions.
    RandomPos,
    /// Learned continuous basis dynamics.
    Clex,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Rope,
        Method::Pi,
        Method::Yarn,
        Method::CodeLlama,
        Method::RandomPos,
        Method::Clex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rope => "rope",
            Method::Pi => "pi",
            Method::Yarn => "yarn",
            Method::CodeLlama => "codellama",
            Method::RandomPos => "randompos",
            Method::Clex => "clex",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub train_len: usize,
    pub method: Method,
    /// Largest factor sampled during CLEX training; position range factor
    /// for random-position training.
    pub t_train: f64,
    /// Trained factor of PI / Yarn.
    pub t_fixed: f64,
    pub rope_base: f64,
    pub ode_lambda: usize,
    pub xi_form: XiForm,
    pub steps_per_unit: usize,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            train_len: 128,
            method: Method::Rope,
            t_train: 8.0,
            t_fixed: 4.0,
            rope_base: DEFAULT_BASE,
            ode_lambda: 1,
            xi_form: XiForm::LogDerivative,
            steps_per_unit: DEFAULT_STEPS_PER_UNIT,
            position_mode: PositionMode::RandomSampled,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab == 0 || self.n_layers == 0 || self.n_heads == 0 || self.train_len == 0 {
            return bad("vocab, n_layers, n_heads and train_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        let dh = self.head_dim();
        if dh == 0 || !dh.is_multiple_of(2) {
            return bad(format!("head dimension {dh} must be even"));
        }
        if matches!(self.method, Method::Yarn | Method::Clex) && dh < 4 {
            return bad(format!("{} needs head dimension >= 4", self.method));
        }
        if !(self.t_train >= 1.0) || !(self.t_fixed >= 1.0) {
            return bad("t_train and t_fixed must be >= 1".into());
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1".into());
        }
        if self.steps_per_unit == 0 || self.ode_lambda == 0 {
            return bad("steps_per_unit and ode_lambda must be >= 1".into());
        }
        Ok(())
    }

    /// Fields that fix parameter shapes; used for compatibility checks.
    pub fn shape_signature(&self) -> String {
        format!(
            "vocab={} n_layers={} n_heads={} d_model={} lambda={} method={}",
            self.vocab, self.n_layers, self.n_heads, self.d_model, self.ode_lambda, self.method
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    /// `[vocab, d_model]`; doubles as the output head.
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let bound = std * 3f64.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl<T: Real> TransformerParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let hidden = 4 * d;
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * cfg.n_layers as f64).sqrt();
        let embed = uniform(&[cfg.vocab, d], 0.02, rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: uniform(&[d, d], proj, rng),
                wk: uniform(&[d, d], proj, rng),
                wv: uniform(&[d, d], proj, rng),
                wo: uniform(&[d, d], resid, rng),
                mlp_norm: Tensor::full(&[d], T::one()),
                w_in: uniform(&[d, hidden], proj, rng),
                w_out: uniform(&[hidden, d], 1.0 / (hidden as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt(), rng),
            })
            .collect();
        Self {
            embed,
            layers,
            final_norm: Tensor::full(&[d], T::one()),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_in, &l.w_out]);
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn names(n_layers: usize) -> Vec<String> {
        let mut out = vec![String::from("embed")];
        for i in 0..n_layers {
            for part in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out"] {
                out.push(format!("layers.{i}.{part}"));
            }
        }
        out.push("final_norm".into());
        out
    }

    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> ParamVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        ParamVars::from_flat(&vars, self.layers.len())
    }
}

/// Transformer parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub layers: Vec<[Var; 8]>,
    pub final_norm: Var,
}

impl ParamVars {
    fn from_flat(vars: &[Var], n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let s = &vars[1 + 8 * i..9 + 8 * i];
                [s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]
            })
            .collect();
        Self {
            embed: vars[0],
            layers,
            final_norm: vars[vars.len() - 1],
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        out
    }
}

/// Logits `[batch·seq, vocab]` for `tokens` laid out batch-major.
///
/// `theta` must hold `head_dim/2` frequencies. Pre-softmax attention scores
/// are `attn_scale_mult / sqrt(head_dim) · q·kᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    positions: &[T],
    theta: Var,
    attn_scale_mult: T,
) -> Result<Var, ModelError> {
    let seq = positions.len();
    if batch == 0 || seq == 0 || tokens.len() != batch * seq {
        return Err(ModelError::SequenceMismatch {
            tokens: tokens.len(),
            batch,
            positions: seq,
        });
    }
    if !positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::PositionsNotIncreasing);
    }
    let x = g.embedding(p.embed, tokens)?;
    forward_embedded(g, p, cfg, x, batch, positions, theta, attn_scale_mult)
}

/// [`forward`] starting from already embedded inputs `x` (`[batch·seq, d_model]`).
#[allow(clippy::too_many_arguments)]
pub fn forward_embedded<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    batch: usize,
    positions: &[T],
    theta: Var,
    attn_scale_mult: T,
) -> Result<Var, ModelError> {
    let seq = positions.len();
    let rows = g.value(x).as_matrix_dims().0;
    if batch == 0 || seq == 0 || rows != batch * seq {
        return Err(ModelError::SequenceMismatch {
            tokens: rows,
            batch,
            positions: seq,
        });
    }
    if !positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::PositionsNotIncreasing);
    }
    let dh = cfg.head_dim();
    let eps = T::of(NORM_EPS);
    let scale = attn_scale_mult / T::of(dh as f64).sqrt();
    let mut x = x;
    for &[attn_norm, wq, wk, wv, wo, mlp_norm, w_in, w_out] in &p.layers {
        let h = g.rms_norm(x, attn_norm, eps)?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let q = g.rotary(q, theta, positions, dh)?;
        let k = g.rotary(k, theta, positions, dh)?;
        let a = g.causal_attention(q, k, v, batch, cfg.n_heads, scale)?;
        let a = g.matmul(a, wo)?;
        x = g.add(x, a)?;
        let h = g.rms_norm(x, mlp_norm, eps)?;
        let u = g.matmul(h, w_in)?;
        let u = g.silu(u)?;
        let m = g.matmul(u, w_out)?;
        x = g.add(x, m)?;
    }
    let x = g.rms_norm(x, p.final_norm, eps)?;
    Ok(g.matmul_nt(x, p.embed)?)
}

/// Attention-logit multiplier for evaluating beyond the training length:
/// `max(1, ln(L_test) / ln(L_train))`.
pub fn log_scale_mult(train_len: usize, test_len: usize) -> f64 {
    if train_len < 2 || test_len < 2 {
        return 1.0;
    }
    ((test_len as f64).ln() / (train_len as f64).ln()).max(1.0)
}

/// Transformer weights plus, for CLEX, the dynamics network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: TransformerParams<T>,
    pub ode: Option<OdeNet<T>>,
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let params = TransformerParams::init(&config, rng);
        let ode = if config.method == Method::Clex {
            Some(OdeNet::init(config.head_dim(), config.ode_lambda, rng)?)
        } else {
            None
        };
        Ok(Self { config, params, ode })
    }

    /// All trainable tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = TransformerParams::<T>::names(self.config.n_layers)
            .into_iter()
            .zip(self.params.tensors())
            .collect();
        if let Some(ode) = &self.ode {
            out.push(("ode.w_up".into(), &ode.w_up));
            out.push(("ode.w_down".into(), &ode.w_down));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.params.tensors_mut();
        if let Some(ode) = &mut self.ode {
            out.push(&mut ode.w_up);
            out.push(&mut ode.w_down);
        }
        out
    }

    /// Rebuilds a model from named tensors, checking every shape against a
    /// freshly initialized model of the same config.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::init(config, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if let Some((name, _)) = named.iter().find(|(n, _)| !expected.iter().any(|(e, _)| e == n)) {
            return Err(ModelError::UnexpectedParam(name.clone()));
        }
        let mut slots = model.tensors_mut();
        for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            **slot = t.clone();
        }
        Ok(model)
    }

    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> (ParamVars, Option<OdeVars>) {
        let p = self.params.register(g, requires_grad);
        let o = self.ode.as_ref().map(|n| n.register(g, requires_grad));
        (p, o)
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::FrequencyBasis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            vocab: 32,
            ..ModelConfig::default()
        }
    }

    fn logits(model: &Model<f64>, tokens: &[usize], batch: usize) -> Vec<f64> {
        let seq = tokens.len() / batch;
        let mut g = Graph::new();
        let (p, _) = model.register(&mut g, false);
        let basis = FrequencyBasis::default_basis(model.config.head_dim(), DEFAULT_BASE).unwrap();
        let theta = g.constant(Tensor::vector(basis.theta_as()));
        let pos: Vec<f64> = (1..=seq).map(|i| i as f64).collect();
        let out = forward(&mut g, &p, &model.config, tokens, batch, &pos, theta, 1.0).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("alibi".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { d_model: 66, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { d_model: 12, n_heads: 4, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { t_train: 0.5, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn causal_prefix_invariance() {
        let model = Model::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = logits(&model, &[3, 1, 4, 1, 5, 9], 1);
        let b = logits(&model, &[3, 1, 4, 2, 6, 5], 1);
        let v = model.config.vocab;
        assert_eq!(&a[..3 * v], &b[..3 * v]);
        assert_ne!(&a[3 * v..4 * v], &b[3 * v..4 * v]);
        let single = logits(&model, &[3], 1);
        assert_eq!(&single[..], &a[..v]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let model = Model::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let both = logits(&model, &[1, 2, 3, 7, 8, 9], 2);
        let first = logits(&model, &[1, 2, 3], 1);
        let second = logits(&model, &[7, 8, 9], 1);
        let v = model.config.vocab;
        for (x, y) in both[..3 * v].iter().zip(&first) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[3 * v..].iter().zip(&second) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_positions() {
        let model = Model::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let (p, _) = model.register(&mut g, false);
        let theta = g.constant(Tensor::vector(vec![1.0; 4]));
        let err = forward(&mut g, &p, &model.config, &[1, 2, 3], 1, &[1.0, 3.0, 2.0], theta, 1.0);
        assert_eq!(err.unwrap_err(), ModelError::PositionsNotIncreasing);
        let err = forward(&mut g, &p, &model.config, &[1, 2, 3], 1, &[1.0, 2.0], theta, 1.0);
        assert!(matches!(err, Err(ModelError::SequenceMismatch { .. })));
    }

    #[test]
    fn log_scale_examples() {
        assert_eq!(log_scale_mult(128, 64), 1.0);
        assert_eq!(log_scale_mult(128, 128), 1.0);
        assert!((log_scale_mult(128, 512) - 9.0 / 7.0).abs() < 1e-12);
        assert!((log_scale_mult(4096, 65536) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn named_roundtrip_and_shape_check() {
        let cfg = ModelConfig { method: Method::Clex, ..tiny() };
        let model = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let named: Vec<(String, Tensor<f32>)> = model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert!(named.iter().any(|(n, _)| n == "ode.w_down"));
        assert_eq!(Model::from_named(cfg.clone(), named.clone()).unwrap(), model);

        let mut broken = named.clone();
        broken[1].1 = Tensor::zeros(&[3]);
        assert!(matches!(Model::from_named(cfg.clone(), broken), Err(ModelError::ParamShape { .. })));
        let mut missing = named;
        missing.pop();
        assert_eq!(Model::from_named(cfg, missing), Err(ModelError::MissingParam("ode.w_down".into())));
    }
}
