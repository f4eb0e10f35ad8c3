//! `dkl`: verification, training, evaluation and benchmarking of the KL,
//! DKL and IKL losses.
//!
//! Exit status: 0 on success, 1 when a check runs and fails (or training
//! diverges), 2 for usage, configuration and input-file errors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use dkl_core::alloc_probe::CountingAlloc;

use commands::{CheckFailed, TrainMode};
use config::{BenchConfig, EvalConfig, RunConfig, VerifyConfig};
use manifest::{timestamp, Manifest};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Any `--section.key value` (or `--section.key=value`) flag overrides that
/// key of the command's configuration document.
#[derive(Parser)]
#[command(name = "dkl", version, about, after_help = "Any configuration key can be set with --section.key value.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory [default: $DKL_OUT_DIR/<command> or runs/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients against KL, finite differences and the dense wMSE.
    Verify {
        /// Configuration file (keys of the verification options).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Class counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model: baseline (cross-entropy), distill or adversarial.
    Train {
        #[arg(value_enum)]
        mode: TrainMode,
        /// Configuration file with [data], [train] and [distill] sections.
        #[arg(long)]
        config: PathBuf,
        /// Shorthand for --train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for --distill.teacher_logits.
        #[arg(long)]
        teacher_logits: Option<PathBuf>,
        /// Shorthand for --distill.teacher_params.
        #[arg(long)]
        teacher_params: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Clean and PGD-robust accuracy of a parameter file, optionally with class margins.
    Eval {
        /// Training run directory: takes data, attack and seed from its
        /// manifest and params.bin from the directory.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Evaluation configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Class statistics table to take margins from.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Print the per-class boundary margin table.
        #[arg(long)]
        margins: bool,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Clean accuracy only.
        #[arg(long)]
        no_attack: bool,
        #[arg(long, value_parser = ["train", "test"])]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare dense and memory-efficient wMSE: values, gradients, time and peak memory.
    BenchWmse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Class counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a command from its manifest (file or run directory).
    Replay {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn toml_string(path: &std::path::Path) -> String {
    toml::Value::String(path.display().to_string()).to_string()
}

fn list(values: &[usize]) -> String {
    let items: Vec<String> = values.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(", "))
}

/// Dedicated flags become overrides applied before the generic ones.
fn with_flags(flags: Vec<(&str, Option<String>)>, generic: Vec<(String, String)>) -> Vec<(String, String)> {
    flags
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .chain(generic)
        .collect()
}

fn load<T>(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default,
{
    match path {
        Some(p) => config::read_config(p, overrides),
        None => config::resolve(None, overrides),
    }
}

fn eval_base(run: Option<&PathBuf>, config_path: Option<&PathBuf>) -> Result<Option<String>> {
    match (run, config_path) {
        (Some(_), Some(_)) => bail!("--run and --config are mutually exclusive"),
        (Some(dir), None) => {
            let m = Manifest::read(&dir.join(manifest::FILE_NAME))?;
            if m.command.first().map(String::as_str) != Some("train") {
                bail!("{} is not a training run", dir.display());
            }
            let run: RunConfig = m.config()?;
            let cfg = EvalConfig {
                params: dir.join("params.bin").display().to_string(),
                seed: run.train.seed,
                data: run.data,
                attack: run.train.attack,
                ..EvalConfig::default()
            };
            Ok(Some(toml::to_string(&cfg)?))
        }
        (None, Some(p)) => Ok(Some(std::fs::read_to_string(p)?)),
        (None, None) => Ok(None),
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Verify { config, classes, trials, seed, tolerance, common } => {
            let ov = with_flags(
                vec![
                    ("class_counts", classes.as_deref().map(list)),
                    ("trials", trials.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                    ("tolerance", tolerance.map(|v| format!("{v:e}"))),
                ],
                overrides,
            );
            let cfg: VerifyConfig = load(config.as_ref(), &ov)?;
            commands::verify(&cfg, &config::output_dir(common.out, "verify"), timestamp()?)
        }
        Command::Train { mode, config, seed, teacher_logits, teacher_params, common } => {
            let ov = with_flags(
                vec![
                    ("train.seed", seed.map(|v| v.to_string())),
                    ("distill.teacher_logits", teacher_logits.as_deref().map(toml_string)),
                    ("distill.teacher_params", teacher_params.as_deref().map(toml_string)),
                ],
                overrides,
            );
            let cfg: RunConfig = config::read_config(&config, &ov)?;
            let out = config::output_dir(common.out, &format!("train-{}", mode.name()));
            commands::train(mode, &cfg, &out, timestamp()?)
        }
        Command::Eval { run, config, params, stats, margins, epsilon, no_attack, split, seed, common } => {
            let base = eval_base(run.as_ref(), config.as_ref())?;
            let ov = with_flags(
                vec![
                    ("params", params.as_deref().map(toml_string)),
                    ("stats", stats.as_deref().map(toml_string)),
                    ("margins", margins.then(|| "true".to_string())),
                    ("attack.epsilon", epsilon.map(|v| format!("{v:?}"))),
                    ("attack_enabled", no_attack.then(|| "false".to_string())),
                    ("split", split.map(|s| format!("{s:?}"))),
                    ("seed", seed.map(|v| v.to_string())),
                ],
                overrides,
            );
            let origin = run.or(config).unwrap_or_default();
            let cfg: EvalConfig = config::resolve(base.as_deref().map(|t| (t, origin.as_path())), &ov)?;
            commands::eval(&cfg, &config::output_dir(common.out, "eval"), timestamp()?)
        }
        Command::BenchWmse { config, classes, batch, repeats, seed, common } => {
            let ov = with_flags(
                vec![
                    ("classes", classes.as_deref().map(list)),
                    ("batch", batch.map(|v| v.to_string())),
                    ("repeats", repeats.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                ],
                overrides,
            );
            let cfg: BenchConfig = load(config.as_ref(), &ov)?;
            commands::bench_wmse(&cfg, &config::output_dir(common.out, "bench-wmse"), timestamp()?)
        }
        Command::Replay { manifest, common } => {
            if !overrides.is_empty() {
                bail!("replay takes no configuration overrides; edit the manifest instead");
            }
            let path = commands::manifest_path(&manifest);
            commands::replay(&path, &config::output_dir(common.out, "replay"))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<dkl_core::Error>() {
        Some(dkl_core::Error::Diverged { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (rest, overrides) = match config::extract_overrides(args) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("dkl".to_string()).chain(rest)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
