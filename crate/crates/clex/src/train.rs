//! Training loop: one factor draw, position plan and Adam step per batch.

use clex_core::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use clex_core::positional::{theta_on, train_encoding};
use clex_core::{forward, Graph, Model, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::make_batches;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    /// Scale factor the step trained at (1 for methods that do not sample one).
    pub t: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Loss and parameter gradients for one batch, in `Model::tensors_mut` order.
pub fn loss_and_grads<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    rng: &mut R,
) -> Result<(f64, f64, Vec<Vec<T>>)> {
    let cfg = &model.config;
    let enc = train_encoding(cfg, rng)?;
    let mut g = Graph::new();
    g.set_check_finite(false);
    let (p, ode) = model.register(&mut g, true);
    let theta = theta_on(&mut g, cfg, &enc.theta, ode)?;
    let positions: Vec<T> = enc.positions.iter().map(|&v| T::of(v)).collect();
    let logits = forward(&mut g, &p, cfg, inputs, batch, &positions, theta, T::one())?;
    let mask = vec![true; targets.len()];
    let loss = g.softmax_cross_entropy(logits, targets, &mask)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok((value, enc.t, Vec::new()));
    }
    g.backward(loss)?;
    let mut vars: Vec<Var> = p.flat();
    if let Some(o) = ode {
        vars.push(o.w_up);
        vars.push(o.w_down);
    }
    let grads = vars
        .iter()
        .map(|&v| match g.grad_data(v) {
            Some(d) => d.to_vec(),
            None => vec![T::zero(); g.value(v).numel()],
        })
        .collect();
    Ok((value, enc.t, grads))
}

/// Trains `model` in place on `tokens`. `on_step` sees every record as it is
/// produced. Aborts on a non-finite loss or gradient.
pub fn train<T: Real>(
    model: &mut Model<T>,
    tokens: &[u8],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let seq = model.config.train_len;
    let data_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pos_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut batches = make_batches(tokens, seq, opts.batch_size, data_rng)?;
    if let Some(&bad) = tokens.iter().find(|&&b| b as usize >= model.config.vocab) {
        return Err(HarnessError::Config(format!("token {bad} outside vocab {}", model.config.vocab)));
    }
    let mut state = AdamState::new(model.named_tensors().into_iter().map(|(_, t)| t));
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let batch = batches.next().expect("endless batches");
        let (loss, t, mut grads) = loss_and_grads(model, &batch.inputs, &batch.targets, batch.batch, &mut pos_rng)?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFinite { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, opts.grad_clip);
        if !grad_norm.is_finite() {
            return Err(HarnessError::NonFinite { step, loss: grad_norm });
        }
        let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut model.tensors_mut(), &refs, &mut state, &opts.adam)?;
        let rec = LossRecord {
            step,
            t,
            loss,
            grad_norm,
        };
        on_step(&rec);
        trace.push(rec);
    }
    Ok(trace)
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,t,loss,grad_norm\n");
    for r in trace {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.step, r.t, r.loss, r.grad_norm));
    }
    out
}
