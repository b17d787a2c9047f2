//! Length-grouped perplexity and next-token accuracy.

use clex_core::ode::{BasisCache, CacheSession};
use clex_core::positional::{eval_encoding, unscaled_basis, EvalEncoding};
use clex_core::{forward, Graph, Model, Real, Tensor};

use crate::corpus::EvalWindows;
use crate::error::{HarnessError, Result};
use crate::report::{EvalReport, EvalRow, SkippedLength};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub eval_lens: Vec<usize>,
    /// Cap on predicted tokens per length (0 = all windows).
    pub max_tokens: usize,
    /// Windows per forward pass are limited to this many tokens.
    pub batch_tokens: usize,
    pub memory_budget_bytes: usize,
}

/// NLL sum, correct-argmax count and token count over one window group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindowStats {
    pub nll: f64,
    pub correct: usize,
    pub tokens: usize,
}

/// Rough peak bytes of one forward pass over `rows` tokens of length `seq`.
pub fn forward_bytes(model_d: usize, n_layers: usize, n_heads: usize, vocab: usize, rows: usize, seq: usize, width: usize) -> usize {
    let probs = n_layers * n_heads * rows * seq;
    let acts = rows * (n_layers * 16 * model_d + 2 * vocab);
    (probs + acts) * width
}

/// Scores a group of equally long windows with one forward pass.
pub fn score_windows<T: Real>(model: &Model<T>, enc: &EvalEncoding, windows: &[(&[u8], &[u8])]) -> Result<Vec<WindowStats>> {
    let cfg = &model.config;
    let seq = enc.positions.len();
    let inputs: Vec<usize> = windows.iter().flat_map(|(x, _)| x.iter().map(|&b| b as usize)).collect();
    let mut g = Graph::new();
    g.set_check_finite(false);
    let (p, _) = model.register(&mut g, false);
    let theta = g.constant(Tensor::vector(enc.basis.theta_as()));
    let positions: Vec<T> = enc.positions.iter().map(|&v| T::of(v)).collect();
    let logits = forward(&mut g, &p, cfg, &inputs, windows.len(), &positions, theta, T::of(enc.attn_scale_mult))?;
    let data = g.value(logits).data();
    let v = cfg.vocab;
    let mut out = Vec::with_capacity(windows.len());
    for (w, (_, targets)) in windows.iter().enumerate() {
        let mut stats = WindowStats::default();
        for (r, &target) in targets.iter().enumerate() {
            let row = &data[(w * seq + r) * v..(w * seq + r + 1) * v];
            let (mut best, mut best_i) = (row[0].as_f64(), 0);
            for (i, x) in row.iter().enumerate().skip(1) {
                if x.as_f64() > best {
                    best = x.as_f64();
                    best_i = i;
                }
            }
            let lse = best + row.iter().map(|x| (x.as_f64() - best).exp()).sum::<f64>().ln();
            stats.nll += lse - row[target as usize].as_f64();
            stats.correct += usize::from(best_i == target as usize);
            stats.tokens += 1;
        }
        out.push(stats);
    }
    Ok(out)
}

/// Evaluates `model` on `tokens` at every requested length. CLEX models
/// need `cache`; lengths past its largest key are solved on demand.
pub fn evaluate<T: Real>(model: &Model<T>, tokens: &[u8], opts: &EvalOptions, cache: Option<&BasisCache>) -> Result<EvalReport> {
    let cfg = &model.config;
    if tokens.len() < 2 {
        return Err(HarnessError::EmptyValidation);
    }
    if let Some(&bad) = tokens.iter().find(|&&b| b as usize >= cfg.vocab) {
        return Err(HarnessError::Config(format!("token {bad} outside vocab {}", cfg.vocab)));
    }
    let base = unscaled_basis(cfg)?;
    let mut session = match (cache, &model.ode) {
        (Some(c), Some(net)) => Some(CacheSession::new(c, net, &base, cfg.xi_form, cfg.steps_per_unit)),
        _ => None,
    };
    let width = T::PRECISION.byte_width();
    let mut report = EvalReport::default();
    for &len in &opts.eval_lens {
        let windows = match EvalWindows::new(tokens, len) {
            Ok(w) => w,
            Err(HarnessError::CorpusTooShort { need, have }) => {
                report.skipped.push(SkippedLength {
                    method: cfg.method.name().into(),
                    eval_len: len,
                    reason: format!("validation split has {have} tokens, need {need}"),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let per_group = (opts.batch_tokens / len).max(1);
        let need = forward_bytes(cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.vocab, per_group * len, len, width);
        if need > opts.memory_budget_bytes {
            report.skipped.push(SkippedLength {
                method: cfg.method.name().into(),
                eval_len: len,
                reason: format!("needs about {} MiB, budget {} MiB", need >> 20, opts.memory_budget_bytes >> 20),
            });
            continue;
        }
        let mut count = windows.count();
        if opts.max_tokens > 0 {
            count = count.min((opts.max_tokens / len).max(1));
        }
        let enc = eval_encoding(cfg, len, session.as_mut())?;
        let all: Vec<(&[u8], &[u8])> = (0..count).map(|i| windows.window(i)).collect();
        let mut total = WindowStats::default();
        for group in all.chunks(per_group) {
            for s in score_windows(model, &enc, group)? {
                total.nll += s.nll;
                total.correct += s.correct;
                total.tokens += s.tokens;
            }
        }
        report.rows.push(EvalRow {
            method: cfg.method.name().into(),
            train_len: cfg.train_len,
            eval_len: len,
            eval_t: enc.eval_t,
            attn_scale_mult: enc.attn_scale_mult,
            ppl: (total.nll / total.tokens as f64).exp(),
            acc: total.correct as f64 / total.tokens as f64,
            nll_sum: total.nll,
            tokens: total.tokens,
            windows: count,
        });
    }
    Ok(report)
}
