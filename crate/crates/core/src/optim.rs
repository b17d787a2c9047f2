//! Adam with bias correction, plus global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::real::Real;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { m, v, step: 0 }
    }
}

/// One Adam update of every parameter from its gradient.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Invalid(alloc::format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::of(max_norm / total);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamConfig {
        AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st, &cfg()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = Tensor::<f64>::vector(vec![1.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&[0.5]], &mut st, &cfg()).unwrap();
        let (m, v) = (st.m[0][0], st.v[0][0]);
        adam_step(&mut [&mut p], &[&[0.0]], &mut st, &cfg()).unwrap();
        assert!((st.m[0][0] - 0.9 * m).abs() < 1e-15);
        assert!((st.v[0][0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives mhat = g, vhat = g^2,
        // so the step is lr * g / (|g| + eps).
        let mut p = Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let g = [3.0, -0.02, 1e-9];
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg()).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            let want = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-12, "{x} vs {want}");
        }
    }

    #[test]
    fn deterministic_trace() {
        let run = || {
            let mut p = Tensor::<f32>::vector(vec![0.3, -0.7, 1.1]);
            let mut st = AdamState::new([&p]);
            let mut trace = Vec::new();
            for step in 0..2 {
                let g: Vec<f32> = p.data().iter().map(|x| x * 2.0 + step as f32).collect();
                adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
                trace.extend(p.data().iter().map(|x| x.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut st, &cfg()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
