//! Command-line interface: `train`, `eval`, `basis` and `compare`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clex_core::ode::DEFAULT_STEPS_PER_UNIT;
use clex_core::rope::DEFAULT_BASE;
use clex_core::{Method, XiForm};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::files::{load_checkpoint, write};
use crate::runs::{basis_csv, run_compare, run_eval, run_train};

/// Environment variable naming the root under which run directories are created.
pub const OUT_ROOT_ENV: &str = "CLEX_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "clex", version, about = "Context-extension experiments with rotary frequency scaling on byte-level toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (`key=value`, value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory (default: a timestamped directory under $CLEX_OUT_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint and loss trace.
    Train(ConfigArgs),
    /// Evaluate a checkpoint over the configured lengths.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump the frequency basis per method and scale factor as CSV.
    Basis {
        #[arg(long)]
        head_dim: usize,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "rope,pi,yarn,codellama,clex")]
        methods: Vec<Method>,
        /// Comma-separated scale factors.
        #[arg(long = "t", value_delimiter = ',', default_value = "1,2,4,8")]
        ts: Vec<f64>,
        /// CLEX dynamics from this checkpoint instead of zero-initialized ones.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BASE)]
        rope_base: f64,
        #[arg(long, default_value_t = XiForm::default())]
        xi_form: XiForm,
        #[arg(long, default_value_t = DEFAULT_STEPS_PER_UNIT)]
        steps_per_unit: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or reuse one model per method, evaluate all and print a summary.
    Compare(ConfigArgs),
}

fn run_dir(explicit: Option<&Path>, cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(p) = explicit.or(cfg.out_dir.as_deref()) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let first = root.join(format!("{stamp}-{command}"));
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|n| root.join(format!("{stamp}-{command}-{n}")))
        .find(|p| !p.exists())
        .expect("unbounded suffixes")
}

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

/// Runs one parsed command; returns what it prints to stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let dir = run_dir(args.out.as_deref(), &cfg, "train");
            let outcome = run_train(&cfg, &dir)?;
            Ok(format!(
                "run dir: {}\ncheckpoint: {}\nfinal loss: {:.6}\n",
                dir.display(),
                outcome.checkpoint.display(),
                outcome.final_loss
            ))
        }
        Command::Eval { args, checkpoint } => {
            let cfg = load(&args)?;
            let dir = run_dir(args.out.as_deref(), &cfg, "eval");
            let report = run_eval(&cfg, &checkpoint, &dir)?;
            Ok(format!("run dir: {}\n{}", dir.display(), report.to_csv()))
        }
        Command::Basis {
            head_dim,
            methods,
            ts,
            checkpoint,
            rope_base,
            xi_form,
            steps_per_unit,
            out,
        } => {
            let model = checkpoint.as_deref().map(load_checkpoint::<f64>).transpose()?;
            let csv = match &model {
                Some(m) => {
                    let net = m.ode.as_ref().ok_or_else(|| {
                        HarnessError::Incompatible(format!("checkpoint method {} has no learned dynamics", m.config.method))
                    })?;
                    basis_csv(head_dim, m.config.rope_base, &methods, &ts, Some(net), m.config.xi_form, m.config.steps_per_unit)?
                }
                None => basis_csv(head_dim, rope_base, &methods, &ts, None, xi_form, steps_per_unit)?,
            };
            match out {
                Some(path) => {
                    write(&path, &csv)?;
                    Ok(String::new())
                }
                None => Ok(csv),
            }
        }
        Command::Compare(args) => {
            let cfg = load(&args)?;
            let dir = run_dir(args.out.as_deref(), &cfg, "compare");
            let report = run_compare(&cfg, &dir)?;
            Ok(format!("run dir: {}\n\n{}", dir.display(), report.summary_table()))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
