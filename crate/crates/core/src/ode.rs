//! Continuous frequency-basis scaling.
//!
//! The log basis `z(t) = log theta_t` evolves over the length scaling factor
//! `t` under learned dynamics
//!
//! ```text
//! dz/dt = W_down · silu(W_up · z) + xi(t)
//! ```
//!
//! where `xi` is the fixed drift of Yarn scaling. With `W_down = 0` the
//! solution is exactly Yarn's basis, which is how a fresh [`OdeNet`] starts.
//! Integration is fixed-step RK4 recorded on the autodiff tape, so gradients
//! of the discretized solution flow back into both projections.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rope::{FrequencyBasis, LogBasis, RopeError};
use crate::tensor::{Tensor, TensorError};

/// Default RK4 resolution per unit of `t`.
pub const DEFAULT_STEPS_PER_UNIT: usize = 8;
/// Lower bound on RK4 steps for any non-empty interval.
pub const MIN_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("scale factor must be >= 1, got {0}")]
    FactorBelowOne(f64),
    #[error("steps per unit must be >= 1")]
    ZeroSteps,
    #[error("head dimension {0} is too small for the drift term (need >= 4)")]
    HeadDimTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cache keys must be strictly increasing and start at >= 1")]
    UnsortedKeys,
    #[error("cannot draw {wanted} distinct positions from a range of {range}")]
    RangeTooSmall { wanted: usize, range: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Which closed form to use for the Yarn drift term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum XiForm {
    /// `d/dt log alpha_yarn(t)`; entry `i` is `-2i / ((d-2) t)`.
    #[default]
    LogDerivative,
    /// `-2i / ((d-2) t^(2i/(d-2) + 1))`, the derivative of `alpha_yarn`
    /// itself rather than of its log.
    Derivative,
}

impl XiForm {
    pub fn name(self) -> &'static str {
        match self {
            XiForm::LogDerivative => "log_derivative",
            XiForm::Derivative => "derivative",
        }
    }
}

impl fmt::Display for XiForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for XiForm {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log_derivative" => Ok(XiForm::LogDerivative),
            "derivative" => Ok(XiForm::Derivative),
            other => Err(alloc::format!("unknown xi form `{other}`")),
        }
    }
}

/// Drift term at scale factor `t` for head dimension `d`.
pub fn xi(t: f64, head_dim: usize, form: XiForm) -> Result<Vec<f64>, OdeError> {
    if !(t >= 1.0) {
        return Err(OdeError::FactorBelowOne(t));
    }
    if head_dim < 4 || !head_dim.is_multiple_of(2) {
        return Err(OdeError::HeadDimTooSmall(head_dim));
    }
    let denom = (head_dim - 2) as f64;
    Ok((0..head_dim / 2)
        .map(|i| {
            let e = 2.0 * i as f64 / denom;
            match form {
                XiForm::LogDerivative => -e / t,
                XiForm::Derivative => -e / t.powf(e + 1.0),
            }
        })
        .collect())
}

/// Up-and-down projection defining the learned part of the dynamics.
/// `w_up` maps `d/2 -> lambda·d`, `w_down` maps back.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeNet<T> {
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    lambda: usize,
    head_dim: usize,
}

/// [`OdeNet`] parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct OdeVars {
    pub w_up: Var,
    pub w_down: Var,
    pub head_dim: usize,
}

impl<T: Real> OdeNet<T> {
    /// `w_up ~ U(-1/sqrt(d/2), 1/sqrt(d/2))`, `w_down = 0`.
    pub fn init<R: Rng + ?Sized>(head_dim: usize, lambda: usize, rng: &mut R) -> Result<Self, OdeError> {
        if head_dim < 4 || !head_dim.is_multiple_of(2) {
            return Err(OdeError::HeadDimTooSmall(head_dim));
        }
        let half = head_dim / 2;
        let wide = lambda.max(1) * head_dim;
        let bound = 1.0 / (half as f64).sqrt();
        let up: Vec<T> = (0..wide * half)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Ok(Self {
            w_up: Tensor::new(vec![wide, half], up)?,
            w_down: Tensor::zeros(&[half, wide]),
            lambda: lambda.max(1),
            head_dim,
        })
    }

    pub fn from_parts(w_up: Tensor<T>, w_down: Tensor<T>, head_dim: usize) -> Result<Self, OdeError> {
        let half = head_dim / 2;
        let wide = w_up.shape().first().copied().unwrap_or(0);
        if w_up.shape() != [wide, half] || w_down.shape() != [half, wide] || wide == 0 || wide % head_dim != 0 {
            return Err(OdeError::DimMismatch {
                expected: half,
                got: w_up.shape().get(1).copied().unwrap_or(0),
            });
        }
        Ok(Self {
            w_up,
            w_down,
            lambda: wide / head_dim,
            head_dim,
        })
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> OdeVars {
        OdeVars {
            w_up: g.leaf(self.w_up.clone(), requires_grad),
            w_down: g.leaf(self.w_down.clone(), requires_grad),
            head_dim: self.head_dim,
        }
    }
}

/// Evaluates the dynamics on the tape. `z` has `d/2` elements.
pub fn dynamics_on<T: Real>(g: &mut Graph<T>, z: Var, t: f64, net: OdeVars, form: XiForm) -> Result<Var, OdeError> {
    let half = net.head_dim / 2;
    if g.value(z).numel() != half {
        return Err(OdeError::DimMismatch {
            expected: half,
            got: g.value(z).numel(),
        });
    }
    let z = if g.value(z).shape() == [half, 1] {
        z
    } else {
        g.reshape(z, &[half, 1])?
    };
    let up = g.matmul(net.w_up, z)?;
    let act = g.silu(up)?;
    let down = g.matmul(net.w_down, act)?;
    let drift = xi(t, net.head_dim, form)?;
    let drift = g.constant(Tensor::from_f64(&[half, 1], &drift)?);
    Ok(g.add(down, drift)?)
}

/// Plain evaluation of the dynamics at `(z, t)`.
pub fn dynamics<T: Real>(z: &LogBasis, t: f64, net: &OdeNet<T>, form: XiForm) -> Result<Vec<f64>, OdeError> {
    let mut g = Graph::new();
    let vars = net.register(&mut g, false);
    let zv = g.constant(Tensor::from_f64(&[z.len(), 1], z.z())?);
    let out = dynamics_on(&mut g, zv, t, vars, form)?;
    Ok(g.value(out).to_f64_vec())
}

/// RK4 step count for integrating from 1 to `t_target`.
pub fn step_count(t_target: f64, steps_per_unit: usize) -> usize {
    let span = (t_target - 1.0).max(0.0);
    MIN_STEPS.max((steps_per_unit as f64 * span).ceil() as usize)
}

/// Integrates `z` from `t = 1` to `t_target` on the tape with fixed-step RK4.
/// Returns `z1` itself when `t_target == 1`.
pub fn solve_on<T: Real>(
    g: &mut Graph<T>,
    z1: Var,
    t_target: f64,
    net: OdeVars,
    form: XiForm,
    steps_per_unit: usize,
) -> Result<Var, OdeError> {
    if !(t_target >= 1.0) {
        return Err(OdeError::FactorBelowOne(t_target));
    }
    if steps_per_unit == 0 {
        return Err(OdeError::ZeroSteps);
    }
    if t_target == 1.0 {
        return Ok(z1);
    }
    let n = step_count(t_target, steps_per_unit);
    let h = (t_target - 1.0) / n as f64;
    let half_h = T::of(h / 2.0);
    let mut z = z1;
    for step in 0..n {
        let t0 = 1.0 + step as f64 * h;
        let k1 = dynamics_on(g, z, t0, net, form)?;
        let z2 = axpy(g, z, k1, half_h)?;
        let k2 = dynamics_on(g, z2, t0 + h / 2.0, net, form)?;
        let z3 = axpy(g, z, k2, half_h)?;
        let k3 = dynamics_on(g, z3, t0 + h / 2.0, net, form)?;
        let z4 = axpy(g, z, k3, T::of(h))?;
        let k4 = dynamics_on(g, z4, t0 + h, net, form)?;
        let k23 = g.add(k2, k3)?;
        let k23 = g.scale(k23, T::of(2.0))?;
        let k14 = g.add(k1, k4)?;
        let ksum = g.add(k14, k23)?;
        z = axpy(g, z, ksum, T::of(h / 6.0))?;
    }
    Ok(z)
}

fn axpy<T: Real>(g: &mut Graph<T>, z: Var, k: Var, c: T) -> Result<Var, TensorError> {
    let z = if g.value(z).shape() == g.value(k).shape() {
        z
    } else {
        let shape = g.value(k).shape().to_vec();
        g.reshape(z, &shape)?
    };
    let step = g.scale(k, c)?;
    g.add(z, step)
}

/// Solves the log basis at `t_target` outside of any training graph.
pub fn solve<T: Real>(
    z1: &LogBasis,
    t_target: f64,
    net: &OdeNet<T>,
    form: XiForm,
    steps_per_unit: usize,
) -> Result<LogBasis, OdeError> {
    if z1.len() != net.head_dim() / 2 {
        return Err(OdeError::DimMismatch {
            expected: net.head_dim() / 2,
            got: z1.len(),
        });
    }
    let mut g = Graph::new();
    let vars = net.register(&mut g, false);
    let z = g.constant(Tensor::from_f64(&[z1.len(), 1], z1.z())?);
    let out = solve_on(&mut g, z, t_target, vars, form, steps_per_unit)?;
    if out == z {
        return Ok(z1.clone());
    }
    Ok(LogBasis::new(g.value(out).to_f64_vec()))
}

/// [`solve`] followed by `exp`.
pub fn solve_basis<T: Real>(
    base: &FrequencyBasis,
    t_target: f64,
    net: &OdeNet<T>,
    form: XiForm,
    steps_per_unit: usize,
) -> Result<FrequencyBasis, OdeError> {
    let z1 = base.to_log();
    let z = solve(&z1, t_target, net, form, steps_per_unit)?;
    if t_target == 1.0 {
        return Ok(base.clone());
    }
    Ok(z.to_basis(base.base())?)
}

/// Draws the per-step training factor `t'` uniformly from `[1, t_train]`.
pub fn sample_train_factor<R: Rng + ?Sized>(t_train: f64, rng: &mut R) -> f64 {
    if t_train <= 1.0 {
        1.0
    } else {
        rng.random_range(1.0..=t_train)
    }
}

/// How training positions are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PositionMode {
    /// `1..=L_train`.
    Natural,
    /// `j · s` for `j = 1..=L_train` with `s = t'·L / L_train`.
    UniformScaled,
    /// `L_train` distinct integers from `[1, floor(t'·L)]`, sorted.
    #[default]
    RandomSampled,
}

impl PositionMode {
    pub fn name(self) -> &'static str {
        match self {
            PositionMode::Natural => "natural",
            PositionMode::UniformScaled => "uniform",
            PositionMode::RandomSampled => "random",
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionMode {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "natural" => Ok(PositionMode::Natural),
            "uniform" | "uniform_scaled" => Ok(PositionMode::UniformScaled),
            "random" | "random_sampled" => Ok(PositionMode::RandomSampled),
            other => Err(alloc::format!("unknown position mode `{other}`")),
        }
    }
}

/// Position indices assigned to one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionPlan {
    pub positions: Vec<f64>,
    pub mode: PositionMode,
    pub t_prime: f64,
}

pub fn position_plan<R: Rng + ?Sized>(
    train_len: usize,
    t_prime: f64,
    native_len: usize,
    mode: PositionMode,
    rng: &mut R,
) -> Result<PositionPlan, OdeError> {
    if !(t_prime >= 1.0) {
        return Err(OdeError::FactorBelowOne(t_prime));
    }
    let span = t_prime * native_len as f64;
    let range = span.floor() as usize;
    if train_len == 0 || train_len > range {
        return Err(OdeError::RangeTooSmall {
            wanted: train_len,
            range,
        });
    }
    let positions = match mode {
        PositionMode::Natural => (1..=train_len).map(|j| j as f64).collect(),
        PositionMode::UniformScaled => {
            let s = span / train_len as f64;
            (1..=train_len).map(|j| j as f64 * s).collect()
        }
        PositionMode::RandomSampled => {
            let mut picked: Vec<usize> = rand::seq::index::sample(rng, range, train_len).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|p| (p + 1) as f64).collect()
        }
    };
    Ok(PositionPlan {
        positions,
        mode,
        t_prime,
    })
}

/// Solved bases at a fixed set of scale factors, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisCache {
    entries: Vec<(f64, FrequencyBasis)>,
    native_len: usize,
}

impl BasisCache {
    pub fn from_entries(entries: Vec<(f64, FrequencyBasis)>, native_len: usize) -> Result<Self, OdeError> {
        let sorted = entries.windows(2).all(|w| w[0].0 < w[1].0);
        if entries.is_empty() || !sorted || !(entries[0].0 >= 1.0) {
            return Err(OdeError::UnsortedKeys);
        }
        Ok(Self { entries, native_len })
    }

    pub fn entries(&self) -> &[(f64, FrequencyBasis)] {
        &self.entries
    }

    pub fn native_len(&self) -> usize {
        self.native_len
    }

    /// Smallest cached `t_k` whose supported length `t_k · L` covers `seq_len`.
    pub fn lookup(&self, seq_len: usize) -> Option<(f64, &FrequencyBasis)> {
        self.entries
            .iter()
            .find(|(t, _)| t * self.native_len as f64 >= seq_len as f64)
            .map(|(t, b)| (*t, b))
    }
}

pub fn build_cache<T: Real>(
    net: &OdeNet<T>,
    form: XiForm,
    t_ks: &[f64],
    base: &FrequencyBasis,
    native_len: usize,
    steps_per_unit: usize,
) -> Result<BasisCache, OdeError> {
    if t_ks.is_empty() || !t_ks.windows(2).all(|w| w[0] < w[1]) || !(t_ks[0] >= 1.0) {
        return Err(OdeError::UnsortedKeys);
    }
    let entries = t_ks
        .iter()
        .map(|&t| Ok((t, solve_basis(base, t, net, form, steps_per_unit)?)))
        .collect::<Result<Vec<_>, OdeError>>()?;
    BasisCache::from_entries(entries, native_len)
}

/// Read-only view of a [`BasisCache`] plus a private overlay of bases solved
/// on demand for lengths the cache does not cover.
#[derive(Debug)]
pub struct CacheSession<'a, T> {
    cache: &'a BasisCache,
    net: &'a OdeNet<T>,
    base: &'a FrequencyBasis,
    form: XiForm,
    steps_per_unit: usize,
    overlay: BTreeMap<usize, (f64, FrequencyBasis)>,
}

impl<'a, T: Real> CacheSession<'a, T> {
    pub fn new(
        cache: &'a BasisCache,
        net: &'a OdeNet<T>,
        base: &'a FrequencyBasis,
        form: XiForm,
        steps_per_unit: usize,
    ) -> Self {
        Self {
            cache,
            net,
            base,
            form,
            steps_per_unit,
            overlay: BTreeMap::new(),
        }
    }

    /// Returns `(t, basis)` for `seq_len`, solving at `seq_len / L` when no
    /// cached factor is large enough.
    pub fn lookup(&mut self, seq_len: usize) -> Result<(f64, FrequencyBasis), OdeError> {
        if let Some((t, b)) = self.cache.lookup(seq_len) {
            return Ok((t, b.clone()));
        }
        if let Some(hit) = self.overlay.get(&seq_len) {
            return Ok(hit.clone());
        }
        let t = seq_len as f64 / self.cache.native_len() as f64;
        let basis = solve_basis(self.base, t, self.net, self.form, self.steps_per_unit)?;
        self.overlay.insert(seq_len, (t, basis.clone()));
        Ok((t, basis))
    }

    pub fn extensions(&self) -> impl Iterator<Item = &(f64, FrequencyBasis)> {
        self.overlay.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::DEFAULT_BASE;
    use crate::scaling::{alpha_yarn, scale_basis, ScaleFactor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn zero_net(d: usize) -> OdeNet<f64> {
        OdeNet::init(d, 1, &mut rng()).unwrap()
    }

    fn random_net(d: usize, seed: u64) -> OdeNet<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut net = OdeNet::init(d, 1, &mut r).unwrap();
        for w in net.w_down.data_mut() {
            *w = r.random_range(-0.3..0.3);
        }
        net
    }

    #[test]
    fn xi_examples() {
        for form in [XiForm::LogDerivative, XiForm::Derivative] {
            assert_eq!(xi(3.0, 16, form).unwrap()[0], 0.0);
        }
        assert_eq!(xi(2.0, 4, XiForm::LogDerivative).unwrap(), vec![0.0, -0.5]);
        assert_eq!(xi(2.0, 4, XiForm::Derivative).unwrap(), vec![0.0, -0.25]);
        assert_eq!(xi(0.5, 4, XiForm::LogDerivative), Err(OdeError::FactorBelowOne(0.5)));
    }

    #[test]
    fn xi_matches_log_alpha_derivative() {
        // central difference of log alpha_yarn
        let (d, t, h) = (16, 3.0, 1e-5);
        let lp = alpha_yarn(ScaleFactor::new(t + h).unwrap(), d).unwrap();
        let lm = alpha_yarn(ScaleFactor::new(t - h).unwrap(), d).unwrap();
        let x = xi(t, d, XiForm::LogDerivative).unwrap();
        for i in 0..d / 2 {
            let fd = (lp[i].ln() - lm[i].ln()) / (2.0 * h);
            assert!((fd - x[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn dynamics_zero_network_is_drift() {
        let net = zero_net(8);
        let z = FrequencyBasis::default_basis(8, DEFAULT_BASE).unwrap().to_log();
        let out = dynamics(&z, 2.5, &net, XiForm::LogDerivative).unwrap();
        assert_eq!(out, xi(2.5, 8, XiForm::LogDerivative).unwrap());

        let net = random_net(8, 3);
        let out = dynamics(&LogBasis::new(vec![0.0; 4]), 2.5, &net, XiForm::Derivative).unwrap();
        assert_eq!(out, xi(2.5, 8, XiForm::Derivative).unwrap());
    }

    #[test]
    fn dynamics_matches_direct_formula() {
        let net = random_net(8, 11);
        let z = LogBasis::new(vec![0.3, -1.2, -2.5, -4.0]);
        let t = 3.7;
        let got = dynamics(&z, t, &net, XiForm::LogDerivative).unwrap();
        let (wide, half) = (8, 4);
        let up = net.w_up.data();
        let down = net.w_down.data();
        let drift = xi(t, 8, XiForm::LogDerivative).unwrap();
        for i in 0..half {
            let mut acc = 0.0;
            for j in 0..wide {
                let pre: f64 = (0..half).map(|k| up[j * half + k] * z.z()[k]).sum();
                acc += down[i * wide + j] * pre / (1.0 + (-pre).exp());
            }
            assert!((got[i] - (acc + drift[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_identity_at_one() {
        let net = random_net(8, 5);
        let z = FrequencyBasis::default_basis(8, DEFAULT_BASE).unwrap().to_log();
        assert_eq!(solve(&z, 1.0, &net, XiForm::LogDerivative, 8).unwrap(), z);
        assert!(solve(&z, 0.9, &net, XiForm::LogDerivative, 8).is_err());
        assert_eq!(solve(&z, 2.0, &net, XiForm::LogDerivative, 0), Err(OdeError::ZeroSteps));
    }

    #[test]
    fn zero_net_reduces_to_yarn() {
        let base = FrequencyBasis::default_basis(4, DEFAULT_BASE).unwrap();
        let net = zero_net(4);
        let z1 = base.to_log();
        let z4 = solve(&z1, 4.0, &net, XiForm::LogDerivative, 8).unwrap();
        assert!((z4.z()[0] - z1.z()[0]).abs() < 1e-15);
        assert!((z4.z()[1] - z1.z()[1] - 0.25f64.ln()).abs() < 1e-6);
        let solved = solve_basis(&base, 4.0, &net, XiForm::LogDerivative, 8).unwrap();
        let yarn = scale_basis(&base, &alpha_yarn(ScaleFactor::new(4.0).unwrap(), 4).unwrap()).unwrap();
        for (a, b) in solved.theta().iter().zip(yarn.theta()) {
            assert!((a - b).abs() <= 1e-6 * b);
        }
    }

    #[test]
    fn step_count_rule() {
        assert_eq!(step_count(1.0, 8), 8);
        assert_eq!(step_count(2.0, 8), 8);
        assert_eq!(step_count(4.0, 8), 24);
        assert_eq!(step_count(2.01, 8), 9);
    }

    #[test]
    fn train_factor_sampling() {
        let mut r = rng();
        assert!((0..100).all(|_| sample_train_factor(1.0, &mut r) == 1.0));
        let a: Vec<f64> = (0..5).map(|_| sample_train_factor(16.0, &mut rng())).collect();
        let b: Vec<f64> = (0..5).map(|_| sample_train_factor(16.0, &mut rng())).collect();
        assert_eq!(a, b);
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_train_factor(16.0, &mut r)).sum::<f64>() / n as f64;
        assert!((mean - 8.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn position_plan_examples() {
        let mut r = rng();
        let nat = position_plan(8, 1.0, 8, PositionMode::Natural, &mut r).unwrap();
        let uni = position_plan(8, 1.0, 8, PositionMode::UniformScaled, &mut r).unwrap();
        let want: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(nat.positions, want);
        assert_eq!(uni.positions, want);
        let uni = position_plan(4, 2.0, 4, PositionMode::UniformScaled, &mut r).unwrap();
        assert_eq!(uni.positions, vec![2.0, 4.0, 6.0, 8.0]);
        let rs = position_plan(16, 3.5, 16, PositionMode::RandomSampled, &mut r).unwrap();
        assert!(rs.positions.windows(2).all(|w| w[0] < w[1]));
        assert!(rs.positions[0] >= 1.0 && *rs.positions.last().unwrap() <= 56.0);
        assert!(matches!(
            position_plan(10, 1.0, 8, PositionMode::RandomSampled, &mut r),
            Err(OdeError::RangeTooSmall { wanted: 10, range: 8 })
        ));
    }

    #[test]
    fn cache_build_and_lookup() {
        let base = FrequencyBasis::default_basis(16, DEFAULT_BASE).unwrap();
        let net = random_net(16, 21);
        let single = build_cache(&net, XiForm::LogDerivative, &[1.0], &base, 128, 8).unwrap();
        assert_eq!(single.entries()[0].1, base);

        let cache = build_cache(&net, XiForm::LogDerivative, &[1.0, 2.0, 4.0, 8.0], &base, 128, 8).unwrap();
        for (t, b) in cache.entries() {
            assert_eq!(*b, solve_basis(&base, *t, &net, XiForm::LogDerivative, 8).unwrap());
        }
        assert_eq!(cache.lookup(128).unwrap().0, 1.0);
        assert_eq!(cache.lookup(300).unwrap().0, 4.0);
        assert_eq!(cache.lookup(1).unwrap().0, 1.0);
        assert!(cache.lookup(2000).is_none());

        let mut session = CacheSession::new(&cache, &net, &base, XiForm::LogDerivative, 8);
        let (t, b) = session.lookup(2000).unwrap();
        assert_eq!(t, 15.625);
        assert_eq!(b, solve_basis(&base, 15.625, &net, XiForm::LogDerivative, 8).unwrap());
        assert_eq!(session.extensions().count(), 1);
        assert_eq!(cache.entries().len(), 4);

        assert_eq!(
            build_cache(&net, XiForm::LogDerivative, &[2.0, 1.0], &base, 128, 8),
            Err(OdeError::UnsortedKeys)
        );
        assert_eq!(
            build_cache(&net, XiForm::LogDerivative, &[0.5, 1.0], &base, 128, 8),
            Err(OdeError::UnsortedKeys)
        );
    }
}
