//! End-to-end runs behind the CLI: each writes its resolved config and all
//! artifacts into one run directory.

use std::path::{Path, PathBuf};

use clex_core::ode::{build_cache, solve_basis, BasisCache, OdeNet};
use clex_core::positional::unscaled_basis;
use clex_core::scaling::{alpha_codellama, alpha_pi, alpha_yarn, scale_basis, ScalingError};
use clex_core::{FrequencyBasis, Method, Model, Precision, Real, ScaleFactor, XiForm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelSpec, RunConfig};
use crate::corpus::{load_corpus, Corpus};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::files::{self, load_cache, load_checkpoint, save_cache, save_checkpoint, write};
use crate::report::{EvalReport, ReportMeta};
use crate::train::{loss_csv, train, TrainOptions};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Commit the binary was built from, overridable through `CLEX_COMMIT`.
pub fn commit() -> String {
    std::env::var("CLEX_COMMIT").unwrap_or_else(|_| env!("CLEX_GIT_COMMIT").to_string())
}

pub fn report_meta(cfg: &RunConfig) -> ReportMeta {
    ReportMeta {
        seed: cfg.seed,
        commit: commit(),
        config_hash: cfg.hash(),
        xi_form: cfg.xi_form.name().into(),
        precision: cfg.precision.as_str().into(),
    }
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        eval_lens: cfg.eval_lens.clone(),
        max_tokens: cfg.eval_max_tokens,
        batch_tokens: cfg.eval_batch_tokens,
        memory_budget_bytes: cfg.memory_budget_mb << 20,
    }
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        adam: cfg.adam(),
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub num_params: usize,
}

fn build_model_cache<T: Real>(model: &Model<T>, cfg: &RunConfig) -> Result<Option<BasisCache>> {
    let Some(net) = &model.ode else { return Ok(None) };
    let mc = &model.config;
    let base = unscaled_basis(mc)?;
    Ok(Some(build_cache(net, mc.xi_form, &cfg.cache_t_ks, &base, mc.train_len, mc.steps_per_unit)?))
}

fn train_typed<T: Real>(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<T>::init(cfg.model_config(), &mut rng)?;
    log::info!(
        "training {} ({} params, {}) for {} steps",
        cfg.method,
        model.num_params(),
        T::PRECISION,
        cfg.steps
    );
    let every = cfg.log_every;
    let started = std::time::Instant::now();
    let mut window = 0.0;
    let trace = train(&mut model, corpus.train(), &train_options(cfg), |r| {
        window += r.loss;
        if r.step % every == 0 {
            log::info!(
                "{} step {:>6}  loss {:.4}  ({:.1}s)",
                cfg.method,
                r.step,
                window / every as f64,
                started.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;
    write(&dir.join(LOSS_FILE), loss_csv(&trace))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &model)?;
    if let Some(cache) = build_model_cache(&model, cfg)? {
        save_cache(&ckpt.join(files::CACHE_FILE), &cache, model.config.xi_form, model.config.steps_per_unit)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_loss: trace.last().map_or(f64::NAN, |r| r.loss),
        num_params: model.num_params(),
    })
}

/// Trains one model; writes the resolved config, loss trace, checkpoint and
/// (for CLEX) the basis cache under `dir`.
pub fn run_train(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    let corpus = load_corpus(&cfg.corpus, cfg.split)?;
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_json())?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &corpus, dir),
        Precision::F64 => train_typed::<f64>(cfg, &corpus, dir),
    }
}

/// Refuses checkpoints whose model config disagrees with `cfg` on anything
/// that affects evaluation.
pub fn check_compatible(cfg: &RunConfig, checkpoint: &Path) -> Result<ModelSpec> {
    let stored = files::load_spec(checkpoint)?;
    let wanted = ModelSpec::from(&cfg.model_config());
    let diff = stored.eval_mismatches(&wanted);
    if diff.is_empty() {
        Ok(stored)
    } else {
        Err(HarnessError::Incompatible(diff.join("; ")))
    }
}

/// The stored cache when it was built with the requested keys, else a fresh one.
fn cache_for<T: Real>(model: &Model<T>, cfg: &RunConfig, checkpoint: &Path) -> Result<Option<BasisCache>> {
    if model.ode.is_none() {
        return Ok(None);
    }
    let path = checkpoint.join(files::CACHE_FILE);
    if path.exists() {
        let (cache, doc) = load_cache(&path)?;
        let keys: Vec<f64> = cache.entries().iter().map(|(t, _)| *t).collect();
        if keys == cfg.cache_t_ks && doc.xi_form == model.config.xi_form.name() && doc.steps_per_unit == model.config.steps_per_unit {
            return Ok(Some(cache));
        }
    }
    build_model_cache(model, cfg)
}

fn eval_typed<T: Real>(cfg: &RunConfig, valid: &[u8], checkpoint: &Path) -> Result<EvalReport> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let cache = cache_for(&model, cfg, checkpoint)?;
    log::info!("evaluating {} at {:?}", model.config.method, cfg.eval_lens);
    evaluate(&model, valid, &eval_options(cfg), cache.as_ref())
}

pub fn eval_checkpoint(cfg: &RunConfig, corpus: &Corpus, checkpoint: &Path) -> Result<EvalReport> {
    check_compatible(cfg, checkpoint)?;
    if corpus.valid().len() < 2 {
        return Err(HarnessError::EmptyValidation);
    }
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, corpus.valid(), checkpoint),
        Precision::F64 => eval_typed::<f64>(cfg, corpus.valid(), checkpoint),
    }
}

pub fn write_report(cfg: &RunConfig, report: &EvalReport, dir: &Path) -> Result<()> {
    write(&dir.join(REPORT_CSV), report.to_csv())?;
    write(&dir.join(REPORT_JSON), report.to_json(&report_meta(cfg)))
}

/// Evaluates an existing checkpoint and writes the report under `dir`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<EvalReport> {
    let corpus = load_corpus(&cfg.corpus, cfg.split)?;
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_json())?;
    let report = eval_checkpoint(cfg, &corpus, checkpoint)?;
    write_report(cfg, &report, dir)?;
    Ok(report)
}

/// Trains (or reuses, when an earlier run with the identical resolved config
/// left a checkpoint) one model per method, then evaluates all of them on
/// the shared grid.
pub fn run_compare(cfg: &RunConfig, dir: &Path) -> Result<EvalReport> {
    let corpus = load_corpus(&cfg.corpus, cfg.split)?;
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_json())?;
    let mut report = EvalReport::default();
    for &method in &cfg.methods {
        let mcfg = cfg.with_method(method);
        let sub = dir.join(method.name());
        let ckpt = sub.join(CHECKPOINT_DIR);
        let reusable = files::read_json::<RunConfig>(&sub.join(RESOLVED_CONFIG_FILE))
            .map(|prev| prev.hash() == mcfg.hash())
            .unwrap_or(false)
            && ckpt.join(files::CHECKPOINT_FILE).exists();
        if reusable {
            log::info!("reusing {}", ckpt.display());
        } else {
            run_train(&mcfg, &sub)?;
        }
        let part = eval_checkpoint(&mcfg, &corpus, &ckpt)?;
        write_report(&mcfg, &part, &sub)?;
        report.merge(part);
    }
    write_report(cfg, &report, dir)?;
    write(&dir.join(SUMMARY_FILE), report.summary_table())?;
    Ok(report)
}

/// Evaluates several already trained models on one corpus. All must share a
/// vocabulary.
pub fn compare_models<T: Real>(
    models: &[(&Model<T>, Option<&BasisCache>)],
    valid: &[u8],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(((first, _), rest)) = models.split_first() {
        if let Some((m, _)) = rest.iter().find(|(m, _)| m.config.vocab != first.config.vocab) {
            return Err(HarnessError::Incompatible(format!(
                "vocab {} of {} conflicts with vocab {} of {}",
                m.config.vocab, m.config.method, first.config.vocab, first.config.method
            )));
        }
    }
    let mut report = EvalReport::default();
    for (model, cache) in models {
        report.merge(evaluate(model, valid, opts, *cache)?);
    }
    Ok(report)
}

/// `theta` rows (`method,t,i,theta_i`) for each method and factor. CLEX
/// solves with `clex` when given, else with freshly initialized dynamics
/// (whose zero down-projection makes it coincide with Yarn).
pub fn basis_csv(
    head_dim: usize,
    rope_base: f64,
    methods: &[Method],
    ts: &[f64],
    clex: Option<&OdeNet<f64>>,
    xi_form: XiForm,
    steps_per_unit: usize,
) -> Result<String> {
    let conv = |e: ScalingError| HarnessError::Config(e.to_string());
    let base = FrequencyBasis::default_basis(head_dim, rope_base).map_err(|e| HarnessError::Config(e.to_string()))?;
    let fresh;
    let net = match clex {
        Some(net) if net.head_dim() != head_dim => {
            return Err(HarnessError::Incompatible(format!(
                "checkpoint head dim {} vs requested {head_dim}",
                net.head_dim()
            )))
        }
        Some(net) => net,
        None => {
            fresh = OdeNet::<f64>::init(head_dim, 1, &mut ChaCha8Rng::seed_from_u64(0))?;
            &fresh
        }
    };
    let mut out = String::from("method,t,i,theta_i\n");
    for &method in methods {
        for &t in ts {
            let sf = ScaleFactor::new(t).map_err(conv)?;
            let theta = match method {
                Method::Rope | Method::RandomPos => base.clone(),
                Method::Pi => scale_basis(&base, &alpha_pi(sf, head_dim).map_err(conv)?).map_err(conv)?,
                Method::Yarn => scale_basis(&base, &alpha_yarn(sf, head_dim).map_err(conv)?).map_err(conv)?,
                Method::CodeLlama => scale_basis(&base, &alpha_codellama(head_dim).map_err(conv)?).map_err(conv)?,
                Method::Clex => solve_basis(&base, t, net, xi_form, steps_per_unit)?,
            };
            for (i, th) in theta.theta().iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", method.name(), t, i, th));
            }
        }
    }
    Ok(out)
}
