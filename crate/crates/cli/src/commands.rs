use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use dkl_core::alloc_probe::{self, AllocStats};
use dkl_core::class_stats::ClassStatsTable;
use dkl_core::data::{export_logits, import_logits, Dataset};
use dkl_core::gradcheck::run_verification;
use dkl_core::losses::{wmse_dense_from_scores, wmse_efficient, GradFlow, WmseOutput};
use dkl_core::model::MlpParams;
use dkl_core::numerics::softmax_rows;
use dkl_core::rng::{stream, SeededRng};
use dkl_core::trainers::{
    class_margins, evaluate, train_adversarial, train_baseline, train_distill, EpochMetrics,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, EvalConfig, RunConfig, SplitChoice, VerifyConfig};
use crate::manifest::{self, Manifest};

/// A check ran to completion and failed (exit status 1).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Baseline,
    Distill,
    Adversarial,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Distill => "distill",
            TrainMode::Adversarial => "adversarial",
        }
    }

    fn parse(name: &str) -> Result<Self> {
        Self::from_str(name, false).map_err(|e| anyhow::anyhow!("unknown train mode `{name}`: {e}"))
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing report")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn verify(cfg: &VerifyConfig, out: &Path, created: String) -> Result<()> {
    prepare_dir(out)?;
    Manifest::new(&["verify"], cfg.seed, created, cfg)?.write(out)?;
    let report = run_verification(cfg)?;
    let text = report.to_text();
    fs::write(out.join("report.toml"), &text)?;
    print!("{text}");
    if !report.passed() {
        bail!(CheckFailed(format!(
            "verification failed in: {}",
            report.failing().join(", ")
        )));
    }
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    let mut line = format!(
        "epoch {:>3}  lr {:.5}  loss {:.5}  ce {:.5}  train {:.4}  test {:.4}",
        m.epoch, m.lr, m.loss, m.ce, m.train_acc, m.test_acc
    );
    if let Some(r) = m.robust_acc {
        line.push_str(&format!("  robust {r:.4}"));
    }
    if let Some(a) = m.agreement {
        line.push_str(&format!("  agree {a:.4}"));
    }
    line.push_str(&format!("  margin {:.5}", m.mean_margin));
    println!("{line}");
}

fn warn_if_robust_exceeds_clean(epoch: Option<usize>, clean: f64, robust: Option<f64>) {
    if let Some(r) = robust {
        if r > clean {
            let at = epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default();
            eprintln!("warning: robust accuracy {r} exceeds clean accuracy {clean}{at}; the attack harness is suspect");
        }
    }
}

fn teacher_logits(cfg: &RunConfig, train: &Dataset) -> Result<Array2<f64>> {
    let d = &cfg.distill;
    if !d.teacher_logits.is_empty() {
        return Ok(import_logits(Path::new(&d.teacher_logits))?);
    }
    if !d.teacher_params.is_empty() {
        let teacher = MlpParams::load(Path::new(&d.teacher_params))?;
        return Ok(teacher.logits(train.features())?);
    }
    bail!("distillation needs distill.teacher_logits or distill.teacher_params")
}

pub fn train(mode: TrainMode, cfg: &RunConfig, out: &Path, created: String) -> Result<()> {
    cfg.train.validate()?;
    let (train_ds, test_ds) = cfg.data.load()?;
    let teacher = match mode {
        TrainMode::Distill => {
            let t = teacher_logits(cfg, &train_ds)?;
            let expected = (train_ds.len(), train_ds.num_classes());
            if t.dim() != expected {
                return Err(dkl_core::Error::ShapeMismatch {
                    what: "teacher logits (train rows x classes)",
                    expected,
                    found: t.dim(),
                }
                .into());
            }
            Some(t)
        }
        _ => None,
    };
    prepare_dir(out)?;
    Manifest::new(&["train", mode.name()], cfg.train.seed, created, cfg)?.write(out)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut sink = BufWriter::new(File::create(&metrics_path)?);
    let mut observer = |m: &EpochMetrics| -> dkl_core::Result<()> {
        let line = serde_json::to_string(m).map_err(std::io::Error::other)?;
        writeln!(sink, "{line}")?;
        sink.flush()?;
        print_epoch(m);
        warn_if_robust_exceeds_clean(Some(m.epoch), m.test_acc, m.robust_acc);
        Ok(())
    };
    let outcome = match (mode, &teacher) {
        (TrainMode::Baseline, _) => train_baseline(&cfg.train, &train_ds, &test_ds, &mut observer),
        (TrainMode::Distill, Some(t)) => train_distill(&cfg.train, &train_ds, &test_ds, t.view(), &mut observer),
        (TrainMode::Distill, None) => unreachable!("teacher loaded above"),
        (TrainMode::Adversarial, _) => train_adversarial(&cfg.train, &train_ds, &test_ds, &mut observer),
    }
    .with_context(|| format!("training aborted; partial metrics in {}", metrics_path.display()))?;

    outcome.params.save(&out.join("params.bin"))?;
    outcome.stats.save(&out.join("stats.txt"))?;
    let logits = outcome.params.logits(train_ds.features())?;
    export_logits(&out.join("train_logits.bin"), logits.view())?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    clean_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    robust_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    margins: Option<Vec<f64>>,
}

pub fn eval(cfg: &EvalConfig, out: &Path, created: String) -> Result<()> {
    if cfg.params.is_empty() {
        bail!("eval needs a parameter file (--params or --run)");
    }
    cfg.attack.validate()?;
    let params = MlpParams::load(Path::new(&cfg.params))?;
    let (train_ds, test_ds) = cfg.data.load()?;
    let ds = match cfg.split {
        SplitChoice::Train => &train_ds,
        SplitChoice::Test => &test_ds,
    };
    let atk = cfg.attack_enabled.then_some(&cfg.attack);
    let m = evaluate(&params, ds, atk, cfg.seed)?;
    let margins = if !cfg.margins {
        None
    } else if cfg.stats.is_empty() {
        Some(class_margins(&params, ds)?)
    } else {
        Some(ClassStatsTable::load(Path::new(&cfg.stats))?.margins())
    };
    let report = EvalReport {
        clean_acc: m.clean_acc,
        robust_acc: m.robust_acc,
        mean_margin: margins.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
        margins,
    };
    prepare_dir(out)?;
    Manifest::new(&["eval"], cfg.seed, created, cfg)?.write(out)?;
    write_toml(&out.join("eval.toml"), &report)?;

    println!("clean_acc = {}", report.clean_acc);
    if let Some(r) = report.robust_acc {
        println!("robust_acc = {r}");
    }
    if let Some(margins) = &report.margins {
        println!("class  margin");
        for (y, v) in margins.iter().enumerate() {
            println!("{y:>5}  {v:.6}");
        }
        println!(" mean  {:.6}", report.mean_margin.unwrap_or_default());
    }
    warn_if_robust_exceeds_clean(None, report.clean_acc, report.robust_acc);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchRow {
    classes: usize,
    batch: usize,
    value_diff: f64,
    grad_diff: f64,
    efficient_peak_bytes: usize,
    efficient_bound_bytes: usize,
    dense_peak_bytes: usize,
    passed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchReport {
    passed: bool,
    rows: Vec<BenchRow>,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, AllocStats, f64) {
    let (first, stats) = alloc_probe::measure(&mut f);
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f());
        best = best.min(start.elapsed().as_secs_f64());
    }
    (first, stats, best)
}

pub fn bench_wmse(cfg: &BenchConfig, out: &Path, created: String) -> Result<()> {
    if cfg.batch == 0 || cfg.classes.iter().any(|&c| c < 2) {
        bail!("bench needs batch >= 1 and every class count >= 2");
    }
    if !alloc_probe::is_installed() {
        bail!("allocation accounting is unavailable in this binary");
    }
    prepare_dir(out)?;
    Manifest::new(&["bench-wmse"], cfg.seed, created, cfg)?.write(out)?;
    let mut rows = Vec::new();
    println!("{:>6} {:>5} {:>10} {:>10} {:>14} {:>14} {:>12} {:>12}", "C", "B", "value", "grad", "eff peak B", "dense peak B", "eff s", "dense s");
    for &c in &cfg.classes {
        let mut rng = SeededRng::new(cfg.seed.wrapping_add(c as u64), stream::GRADCHECK);
        let o_m = Array2::from_shape_fn((cfg.batch, c), |_| 2.0 * rng.normal());
        let o_n = Array2::from_shape_fn((cfg.batch, c), |_| 2.0 * rng.normal());
        let scores = softmax_rows(o_m.view(), 1.0)?;
        let run_eff = || wmse_efficient(o_m.view(), o_n.view(), scores.view(), GradFlow::BOTH);
        let run_dense = || wmse_dense_from_scores(o_m.view(), o_n.view(), scores.view(), GradFlow::BOTH);
        let (eff, eff_alloc, eff_time) = timed(cfg.repeats, run_eff);
        let (dense, dense_alloc, dense_time) = timed(cfg.repeats, run_dense);
        let (eff, dense): (WmseOutput, WmseOutput) = (eff?, dense?);
        let value_diff = (eff.value - dense.value).abs();
        let grad_diff = max_abs_diff(&eff.grad_m, &dense.grad_m).max(max_abs_diff(&eff.grad_n, &dense.grad_n));
        let bound = 2 * cfg.batch * c * std::mem::size_of::<f64>();
        let passed = value_diff <= cfg.tolerance && grad_diff <= cfg.tolerance && eff_alloc.peak_bytes <= bound;
        println!(
            "{c:>6} {:>5} {value_diff:>10.2e} {grad_diff:>10.2e} {:>14} {:>14} {eff_time:>12.6} {dense_time:>12.6}",
            cfg.batch, eff_alloc.peak_bytes, dense_alloc.peak_bytes
        );
        rows.push(BenchRow {
            classes: c,
            batch: cfg.batch,
            value_diff,
            grad_diff,
            efficient_peak_bytes: eff_alloc.peak_bytes,
            efficient_bound_bytes: bound,
            dense_peak_bytes: dense_alloc.peak_bytes,
            passed,
        });
    }
    let report = BenchReport {
        passed: rows.iter().all(|r| r.passed),
        rows,
    };
    write_toml(&out.join("bench.toml"), &report)?;
    if !report.passed {
        let failing: Vec<String> = report
            .rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.classes.to_string())
            .collect();
        bail!(CheckFailed(format!("wMSE bench failed for C = {}", failing.join(", "))));
    }
    Ok(())
}

/// Re-runs the command recorded in `path` into `out`, keeping the original
/// creation time so every output file can be compared byte for byte.
pub fn replay(path: &Path, out: &Path) -> Result<()> {
    let m = Manifest::read(path)?;
    if m.tool != env!("CARGO_PKG_NAME") {
        bail!("{} was written by `{}`, not this tool", path.display(), m.tool);
    }
    let created = m.created.clone();
    let command: Vec<&str> = m.command.iter().map(String::as_str).collect();
    match command.as_slice() {
        ["verify"] => verify(&m.config()?, out, created),
        ["train", mode] => train(TrainMode::parse(mode)?, &m.config()?, out, created),
        ["eval"] => eval(&m.config()?, out, created),
        ["bench-wmse"] => bench_wmse(&m.config()?, out, created),
        other => bail!("cannot replay command {other:?}"),
    }
}

/// Resolves the manifest argument of `replay`: a manifest file or a run
/// directory containing one.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(manifest::FILE_NAME)
    } else {
        arg.to_path_buf()
    }
}
