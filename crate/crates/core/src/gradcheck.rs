//! Numerical oracles for the analytic gradients.
//!
//! Three kinds of checks:
//!
//! - cross-formula: KL gradients (softmax chain rule) against the decoupled
//!   form with `alpha = beta = 1` ([`check_kl_equivalence`]);
//! - routing: what the wMSE term contributes to each side in the detached
//!   modes ([`check_asymmetry`]);
//! - central finite differences of every loss ([`fd_sweep`]).
//!
//! For losses with stop-gradients, finite differences are taken on the
//! *frozen* objective: detached quantities (pair weights, cross-entropy
//! targets, detached logit differences) are held at their values at the
//! base point while the live inputs are perturbed.
//!
//! Every report is a pure function of `(seed, trials, class counts)`.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::class_stats::ClassStatsTable;
use crate::error::{Error, Result};
use crate::losses::{
    dkl_family, jsd_forward_backward, kl_backward, kl_forward, soft_ce, wmse_dense_from_scores,
    wmse_efficient, GradFlow, LossConfig, LossOutput, WeightSource, WmseKernel,
};
use crate::numerics::softmax_rows_unchecked;
use crate::rng::{stream, SeededRng};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative tolerance for finite differences on soft logits.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Relative tolerance in the saturated regime (logit scale 5).
pub const FD_SATURATED_TOLERANCE: f64 = 1e-4;
/// Logit scales used by the sweeps: soft, moderate, near one-hot.
pub const LOGIT_SCALES: [f64; 3] = [0.1, 1.0, 5.0];
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    M,
    N,
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` w.r.t. every entry of
/// the chosen side.
pub fn finite_diff<F>(
    loss: F,
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    side: Side,
    h: f64,
) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut m = o_m.to_owned();
    let mut n = o_n.to_owned();
    let shape = match side {
        Side::M => m.raw_dim(),
        Side::N => n.raw_dim(),
    };
    let mut grad = Array2::zeros(shape.clone());
    for idx in ndarray::indices(shape) {
        let x = match side {
            Side::M => &mut m,
            Side::N => &mut n,
        };
        let orig = x[idx];
        x[idx] = orig + h;
        let plus = loss(m.view(), n.view())?;
        let x = match side {
            Side::M => &mut m,
            Side::N => &mut n,
        };
        x[idx] = orig - h;
        let minus = loss(m.view(), n.view())?;
        let x = match side {
            Side::M => &mut m,
            Side::N => &mut n,
        };
        x[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("loss value"));
        }
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMetric {
    /// `max |a - b|`.
    Absolute,
    /// `max |a - b| / max(max |b|, 1e-8)`, `b` being the oracle.
    Relative,
}

impl DiffMetric {
    fn as_str(self) -> &'static str {
        match self {
            DiffMetric::Absolute => "absolute",
            DiffMetric::Relative => "relative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub trials: usize,
    pub class_counts: Vec<usize>,
    pub metric: DiffMetric,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub worst_case: Option<String>,
    pub passed: bool,
    pub tolerance: f64,
    pub note: Option<String>,
}

fn toml_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:e}")
    }
}

impl GradReport {
    /// One `[name]` section of `key = value` lines (valid TOML).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let counts: Vec<String> = self.class_counts.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "[{}]", self.name);
        let _ = writeln!(out, "passed = {}", self.passed);
        let _ = writeln!(out, "trials = {}", self.trials);
        let _ = writeln!(out, "class_counts = [{}]", counts.join(", "));
        let _ = writeln!(out, "metric = \"{}\"", self.metric.as_str());
        let _ = writeln!(out, "max_abs_diff = {}", toml_float(self.max_abs_diff));
        let _ = writeln!(out, "mean_abs_diff = {}", toml_float(self.mean_abs_diff));
        let _ = writeln!(out, "tolerance = {}", toml_float(self.tolerance));
        if let Some(note) = &self.note {
            let _ = writeln!(out, "note = {note:?}");
        }
        if let Some(worst) = &self.worst_case {
            let _ = writeln!(out, "worst_case = {worst:?}");
        }
        out
    }
}

/// Running max/mean of per-trial discrepancies.
struct Tally {
    max: f64,
    sum: f64,
    count: usize,
    worst: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Self {
            max: 0.0,
            sum: 0.0,
            count: 0,
            worst: None,
        }
    }

    fn add(&mut self, diff: f64, describe: impl FnOnce() -> String) {
        // NaN counts as a failure
        let diff = if diff.is_nan() { f64::INFINITY } else { diff };
        self.sum += diff;
        self.count += 1;
        if diff > self.max || self.worst.is_none() {
            self.max = self.max.max(diff);
            self.worst = Some(describe());
        }
    }

    fn report(
        self,
        name: &str,
        class_counts: &[usize],
        metric: DiffMetric,
        tolerance: f64,
        note: Option<String>,
    ) -> GradReport {
        let passed = self.max <= tolerance;
        GradReport {
            name: name.to_string(),
            trials: self.count,
            class_counts: class_counts.to_vec(),
            metric,
            max_abs_diff: self.max,
            mean_abs_diff: if self.count == 0 {
                0.0
            } else {
                self.sum / self.count as f64
            },
            worst_case: if passed { None } else { self.worst },
            passed,
            tolerance,
            note,
        }
    }
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn relative_diff(analytic: &Array2<f64>, oracle: &Array2<f64>) -> f64 {
    max_abs_diff(analytic, oracle) / max_abs(oracle).max(REL_FLOOR)
}

fn describe(o_m: &Array2<f64>, o_n: &Array2<f64>) -> String {
    let fmt = |a: &Array2<f64>| -> String {
        let rows: Vec<String> = a
            .rows()
            .into_iter()
            .map(|r| {
                let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
                format!("[{}]", cells.join(", "))
            })
            .collect();
        format!("[{}]", rows.join(", "))
    };
    format!("o_m={} o_n={}", fmt(o_m), fmt(o_n))
}

pub(crate) fn random_logits(rng: &mut SeededRng, rows: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, c), |_| scale * rng.normal())
}

fn trial_rng(seed: u64, c: usize, salt: u64) -> SeededRng {
    let mixed = seed
        ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ salt.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    SeededRng::new(mixed, stream::GRADCHECK)
}

/// KL gradients against the decoupled family under `cfg`, one random logit
/// pair per trial, `trials` trials for each class count. Logit scales cycle
/// through [`LOGIT_SCALES`].
pub fn compare_kl_dkl(
    name: &str,
    cfg: &LossConfig,
    trials: usize,
    class_counts: &[usize],
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    let mut tally = Tally::new();
    for &c in class_counts {
        let mut rng = trial_rng(seed, c, 1);
        for t in 0..trials {
            let scale = LOGIT_SCALES[t % LOGIT_SCALES.len()];
            let o_m = random_logits(&mut rng, 1, c, scale);
            let o_n = random_logits(&mut rng, 1, c, scale);
            let kl = kl_backward(o_m.view(), o_n.view())?;
            let dkl = dkl_family(o_m.view(), o_n.view(), None, cfg, None)?;
            let diff = max_abs_diff(&kl.grad_m, &dkl.grad_m).max(max_abs_diff(&kl.grad_n, &dkl.grad_n));
            tally.add(diff, || describe(&o_m, &o_n));
        }
    }
    Ok(tally.report(name, class_counts, DiffMetric::Absolute, tolerance, None))
}

/// KL ≡ DKL(α = β = 1) gradient check with both wMSE kernels.
pub fn check_kl_equivalence(
    trials: usize,
    class_counts: &[usize],
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be nonnegative, got {tolerance}"
        )));
    }
    let mut reports = Vec::new();
    for kernel in [WmseKernel::Dense, WmseKernel::Efficient] {
        let cfg = LossConfig {
            kernel,
            ..LossConfig::dkl()
        };
        reports.push(compare_kl_dkl("kl_equivalence", &cfg, trials, class_counts, seed, tolerance)?);
    }
    let (dense, efficient) = (&reports[0], &reports[1]);
    let worst = if dense.max_abs_diff >= efficient.max_abs_diff {
        dense
    } else {
        efficient
    };
    Ok(GradReport {
        trials: dense.trials + efficient.trials,
        mean_abs_diff: 0.5 * (dense.mean_abs_diff + efficient.mean_abs_diff),
        note: Some(format!(
            "dense kernel max {}, efficient kernel max {}",
            toml_float(dense.max_abs_diff),
            toml_float(efficient.max_abs_diff)
        )),
        ..worst.clone()
    })
}

/// Brute-force `alpha * sum_k w[j][k] (dn[j][k] - dm[j][k])`, batch-mean
/// scaled.
fn wmse_n_term(o_m: &Array2<f64>, o_n: &Array2<f64>, scores: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let (b, c) = o_m.dim();
    Array2::from_shape_fn((b, c), |(i, j)| {
        let mut acc = 0.0;
        for k in 0..c {
            let dn = o_n[[i, j]] - o_n[[i, k]];
            let dm = o_m[[i, j]] - o_m[[i, k]];
            acc += scores[[i, j]] * scores[[i, k]] * (dn - dm);
        }
        alpha * acc / b as f64
    })
}

/// Gradient routing of the wMSE term:
/// (a) detached teacher, no asymmetry breaking: `grad_n` equals the pure
///     cross-entropy gradient;
/// (b) with asymmetry breaking: `grad_n` gains exactly the antisymmetric
///     wMSE term;
/// (c) wMSE flowing to both sides: `grad_m = -grad_n`.
pub fn check_asymmetry(trials: usize, seed: u64) -> Result<GradReport> {
    const TOL: f64 = 1e-10;
    let class_counts = [2usize, 5, 10];
    let mut tally = Tally::new();
    let mut rng = trial_rng(seed, 0, 2);
    for t in 0..trials {
        let c = class_counts[t % class_counts.len()];
        let scale = LOGIT_SCALES[(t / class_counts.len()) % LOGIT_SCALES.len()];
        let alpha = 0.5 + 4.0 * rng.uniform();
        let beta = 0.5 + 4.0 * rng.uniform();
        let o_m = random_logits(&mut rng, 2, c, scale);
        let o_n = random_logits(&mut rng, 2, c, scale);
        let s_m = softmax_rows_unchecked(o_m.view(), 1.0);

        let plain = LossConfig {
            alpha,
            beta,
            detach_m: true,
            break_asymmetry: false,
            weight_source: WeightSource::SampleWise,
            kernel: WmseKernel::Efficient,
        };
        let broken = LossConfig {
            break_asymmetry: true,
            ..plain
        };
        let a = dkl_family(o_m.view(), o_n.view(), None, &plain, None)?;
        let b = dkl_family(o_m.view(), o_n.view(), None, &broken, None)?;
        let ce = soft_ce(o_n.view(), s_m.view())?;

        let diff_a = max_abs_diff(&a.grad_n, &(&ce.grad_n * beta)).max(max_abs(&a.grad_m));
        let term = wmse_n_term(&o_m, &o_n, &s_m, alpha);
        let diff_b = max_abs_diff(&(&b.grad_n - &a.grad_n), &term).max(max_abs(&b.grad_m));

        let eff = wmse_efficient(o_m.view(), o_n.view(), s_m.view(), GradFlow::BOTH)?;
        let dense = wmse_dense_from_scores(o_m.view(), o_n.view(), s_m.view(), GradFlow::BOTH)?;
        let diff_c = max_abs(&(&eff.grad_m + &eff.grad_n)).max(max_abs(&(&dense.grad_m + &dense.grad_n)));

        tally.add(diff_a.max(diff_b).max(diff_c), || describe(&o_m, &o_n));
    }
    Ok(tally.report("asymmetry", &class_counts, DiffMetric::Absolute, TOL, None))
}

/// Losses covered by the finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdLoss {
    Kl,
    Jsd,
    SoftCe,
    WmseDense,
    WmseEfficient,
    /// DKL, full flow (`alpha = beta = 1`).
    Dkl,
    /// Detached teacher, no asymmetry breaking.
    DklKd,
    /// Detached teacher with asymmetry breaking.
    DklKdBa,
    /// Class-wise weights, asymmetry breaking, both sides live.
    Ikl,
    /// Class-wise weights, asymmetry breaking, detached teacher.
    IklKd,
}

impl FdLoss {
    pub const ALL: [FdLoss; 10] = [
        FdLoss::Kl,
        FdLoss::Jsd,
        FdLoss::SoftCe,
        FdLoss::WmseDense,
        FdLoss::WmseEfficient,
        FdLoss::Dkl,
        FdLoss::DklKd,
        FdLoss::DklKdBa,
        FdLoss::Ikl,
        FdLoss::IklKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FdLoss::Kl => "kl",
            FdLoss::Jsd => "jsd",
            FdLoss::SoftCe => "soft_ce",
            FdLoss::WmseDense => "wmse_dense",
            FdLoss::WmseEfficient => "wmse_efficient",
            FdLoss::Dkl => "dkl",
            FdLoss::DklKd => "dkl_kd",
            FdLoss::DklKdBa => "dkl_kd_ba",
            FdLoss::Ikl => "ikl",
            FdLoss::IklKd => "ikl_kd",
        }
    }

    fn loss_config(self) -> Option<LossConfig> {
        let base = LossConfig {
            alpha: 2.0,
            beta: 1.5,
            ..LossConfig::dkl()
        };
        match self {
            FdLoss::Dkl => Some(LossConfig::dkl()),
            FdLoss::DklKd => Some(LossConfig {
                detach_m: true,
                ..base
            }),
            FdLoss::DklKdBa => Some(LossConfig {
                detach_m: true,
                break_asymmetry: true,
                ..base
            }),
            FdLoss::Ikl => Some(LossConfig::ikl(2.0, 1.5)),
            FdLoss::IklKd => Some(LossConfig {
                detach_m: true,
                ..LossConfig::ikl(2.0, 1.5)
            }),
            _ => None,
        }
    }
}

/// Frozen objective of the decoupled family at the base point
/// `(base_m, base_n)`: weights, CE targets and detached logits are held at
/// their base values.
fn frozen_dkl_value(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    base_m: &Array2<f64>,
    base_n: &Array2<f64>,
    scores: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    let live_m = if cfg.detach_m { base_m.view() } else { o_m };
    let live_n = if cfg.break_asymmetry { o_n } else { base_n.view() };
    let wmse = wmse_dense_from_scores(live_m, live_n, scores.view(), GradFlow::NONE)?;
    let ce = soft_ce(o_n, targets.view())?;
    Ok(cfg.alpha * wmse.value + cfg.beta * ce.value)
}

struct FdCase {
    analytic: LossOutput,
    check_m: bool,
}

/// Analytic gradients for one case plus the scalar objective that finite
/// differences are taken on.
type Objective<'a> = Box<dyn Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<f64> + 'a>;

fn fd_case<'a>(
    loss: FdLoss,
    o_m: &Array2<f64>,
    o_n: &Array2<f64>,
    labels: &[usize],
    stats: &ClassStatsTable,
    aux: &'a Array2<f64>,
) -> Result<(FdCase, Objective<'a>)> {
    let both = GradFlow::BOTH;
    Ok(match loss {
        FdLoss::Kl => (
            FdCase {
                analytic: kl_backward(o_m.view(), o_n.view())?,
                check_m: true,
            },
            Box::new(|m, n| kl_forward(m, n)),
        ),
        FdLoss::Jsd => (
            FdCase {
                analytic: jsd_forward_backward(o_m.view(), o_n.view())?,
                check_m: true,
            },
            Box::new(|m, n| Ok(jsd_forward_backward(m, n)?.value)),
        ),
        FdLoss::SoftCe => {
            let out = soft_ce(o_n.view(), aux.view())?;
            (
                FdCase {
                    analytic: LossOutput {
                        value: out.value,
                        wmse: 0.0,
                        ce: out.value,
                        grad_m: Array2::zeros(o_m.raw_dim()),
                        grad_n: out.grad_n,
                    },
                    check_m: false,
                },
                Box::new(move |_, n| Ok(soft_ce(n, aux.view())?.value)),
            )
        }
        FdLoss::WmseDense | FdLoss::WmseEfficient => {
            let out = if loss == FdLoss::WmseDense {
                wmse_dense_from_scores(o_m.view(), o_n.view(), aux.view(), both)?
            } else {
                wmse_efficient(o_m.view(), o_n.view(), aux.view(), both)?
            };
            let dense = loss == FdLoss::WmseDense;
            (
                FdCase {
                    analytic: LossOutput {
                        value: out.value,
                        wmse: out.value,
                        ce: 0.0,
                        grad_m: out.grad_m,
                        grad_n: out.grad_n,
                    },
                    check_m: true,
                },
                Box::new(move |m, n| {
                    Ok(if dense {
                        wmse_dense_from_scores(m, n, aux.view(), GradFlow::NONE)?.value
                    } else {
                        wmse_efficient(m, n, aux.view(), GradFlow::NONE)?.value
                    })
                }),
            )
        }
        _ => {
            let cfg = loss.loss_config().expect("decoupled variant");
            let analytic = dkl_family(o_m.view(), o_n.view(), Some(labels), &cfg, Some(stats))?;
            let targets = softmax_rows_unchecked(o_m.view(), 1.0);
            let scores = match cfg.weight_source {
                WeightSource::SampleWise => targets.clone(),
                WeightSource::ClassWise => stats.class_scores(labels)?,
            };
            let (base_m, base_n) = (o_m.clone(), o_n.clone());
            (
                FdCase {
                    analytic,
                    check_m: !cfg.detach_m,
                },
                Box::new(move |m, n| frozen_dkl_value(m, n, &base_m, &base_n, &scores, &targets, &cfg)),
            )
        }
    })
}

/// Finite differences of `loss` at step `h` for every class count and logit
/// scale, `trials` random batches of `batch` rows each. Scale-5 cases are
/// held to [`FD_SATURATED_TOLERANCE`], the rest to [`FD_TOLERANCE`]; the
/// reported metric is the relative error divided by its own tolerance
/// budget, so the report passes iff that ratio is at most 1.
pub fn fd_sweep(
    loss: FdLoss,
    class_counts: &[usize],
    trials: usize,
    batch: usize,
    seed: u64,
    h: f64,
) -> Result<GradReport> {
    let mut tally = Tally::new();
    let mut worst_soft: f64 = 0.0;
    let mut worst_saturated: f64 = 0.0;
    for &c in class_counts {
        let mut rng = trial_rng(seed, c, 3 + loss as u64);
        for t in 0..trials {
            for &scale in &LOGIT_SCALES {
                let o_m = random_logits(&mut rng, batch, c, scale);
                let o_n = random_logits(&mut rng, batch, c, scale);
                let labels: Vec<usize> = (0..batch).map(|_| rng.below(c as u64) as usize).collect();
                let stat_logits = random_logits(&mut rng, 2 * c, c, 1.0);
                let stat_labels: Vec<usize> = (0..2 * c).map(|i| i % c).collect();
                let stats = ClassStatsTable::exact_recompute(stat_logits.view(), &stat_labels, 4.0, 0.9)?;
                let aux = softmax_rows_unchecked(random_logits(&mut rng, batch, c, scale).view(), 1.0);

                let (case, objective) = fd_case(loss, &o_m, &o_n, &labels, &stats, &aux)?;
                let fd_n = finite_diff(&objective, o_m.view(), o_n.view(), Side::N, h)?;
                let mut rel = relative_diff(&case.analytic.grad_n, &fd_n);
                if case.check_m {
                    let fd_m = finite_diff(&objective, o_m.view(), o_n.view(), Side::M, h)?;
                    rel = rel.max(relative_diff(&case.analytic.grad_m, &fd_m));
                } else {
                    rel = rel.max(max_abs(&case.analytic.grad_m));
                }
                let budget = if scale >= 5.0 {
                    worst_saturated = worst_saturated.max(rel);
                    FD_SATURATED_TOLERANCE
                } else {
                    worst_soft = worst_soft.max(rel);
                    FD_TOLERANCE
                };
                let _ = t;
                tally.add(rel / budget, || format!("scale={scale} {}", describe(&o_m, &o_n)));
            }
        }
    }
    let note = format!(
        "h={} relative error: soft max {} (tol {}), saturated max {} (tol {}); diff is error/tolerance",
        toml_float(h),
        toml_float(worst_soft),
        toml_float(FD_TOLERANCE),
        toml_float(worst_saturated),
        toml_float(FD_SATURATED_TOLERANCE)
    );
    Ok(tally.report(
        &format!("fd.{}", loss.name()),
        class_counts,
        DiffMetric::Relative,
        1.0,
        Some(note),
    ))
}

/// Values and gradients of the efficient wMSE against the dense kernel with
/// the same `c c^T` weights. Value error is scaled by `1 + |dense|`.
pub fn check_wmse_equivalence(
    class_counts: &[usize],
    batch: usize,
    trials: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    let mut tally = Tally::new();
    for &c in class_counts {
        let mut rng = trial_rng(seed, c, 40);
        for t in 0..trials {
            let scale = LOGIT_SCALES[t % LOGIT_SCALES.len()];
            let o_m = random_logits(&mut rng, batch, c, scale);
            let o_n = random_logits(&mut rng, batch, c, scale);
            let scores = softmax_rows_unchecked(random_logits(&mut rng, batch, c, scale).view(), 1.0);
            let e = wmse_efficient(o_m.view(), o_n.view(), scores.view(), GradFlow::BOTH)?;
            let d = wmse_dense_from_scores(o_m.view(), o_n.view(), scores.view(), GradFlow::BOTH)?;
            let diff = ((e.value - d.value).abs() / (1.0 + d.value.abs()))
                .max(max_abs_diff(&e.grad_m, &d.grad_m))
                .max(max_abs_diff(&e.grad_n, &d.grad_n));
            tally.add(diff, || describe(&o_m, &o_n));
        }
    }
    Ok(tally.report("wmse_equivalence", class_counts, DiffMetric::Absolute, tolerance, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub class_counts: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub fd_trials: usize,
    pub fd_batch: usize,
    pub fd_step: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            class_counts: vec![2, 5, 10, 100],
            trials: 1000,
            seed: 0,
            tolerance: 1e-10,
            fd_trials: 2,
            fd_batch: 2,
            fd_step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub sections: Vec<GradReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(|s| s.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.sections
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "passed = {}", self.passed());
        let failing: Vec<String> = self.failing().iter().map(|s| format!("{s:?}")).collect();
        let _ = writeln!(out, "failing = [{}]", failing.join(", "));
        for s in &self.sections {
            let _ = writeln!(out);
            out.push_str(&s.to_text());
        }
        out
    }
}

/// KL equivalence check, asymmetry routing, dense/efficient wMSE equality and a
/// finite-difference sweep of every loss.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut sections = vec![
        check_kl_equivalence(opts.trials, &opts.class_counts, opts.seed, opts.tolerance)?,
        GradReport {
            tolerance: opts.tolerance.min(1e-10),
            ..check_asymmetry(opts.trials.min(300), opts.seed)?
        },
        check_wmse_equivalence(&opts.class_counts, 4, 10, opts.seed, opts.tolerance)?,
    ];
    // re-derive pass flags in case the tolerance was tightened
    for s in sections.iter_mut() {
        s.passed = s.max_abs_diff <= s.tolerance;
    }
    for loss in FdLoss::ALL {
        sections.push(fd_sweep(
            loss,
            &opts.class_counts,
            opts.fd_trials,
            opts.fd_batch,
            opts.seed,
            opts.fd_step,
        )?);
    }
    Ok(VerifyReport { sections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let o = Array2::from_elem((2, 3), 0.3);
        let g = finite_diff(|_, _| Ok(4.2), o.view(), o.view(), Side::N, 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nan() {
        let o = Array2::zeros((1, 2));
        assert!(finite_diff(|_, _| Ok(0.0), o.view(), o.view(), Side::M, 0.0).is_err());
        assert!(matches!(
            finite_diff(|_, _| Ok(f64::NAN), o.view(), o.view(), Side::M, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn finite_diff_of_kl_at_equal_inputs_is_small() {
        let o = ndarray::arr2(&[[0.3, -0.7, 1.1]]);
        for side in [Side::M, Side::N] {
            let g = finite_diff(|m, n| kl_forward(m, n), o.view(), o.view(), side, 1e-5).unwrap();
            assert!(max_abs(&g) < 1e-9);
        }
    }

    #[test]
    fn finite_diff_error_shrinks_fourfold_when_step_halves() {
        let mut rng = SeededRng::new(21, 0);
        let o_m = random_logits(&mut rng, 2, 5, 1.0);
        let o_n = random_logits(&mut rng, 2, 5, 1.0);
        let exact = kl_backward(o_m.view(), o_n.view()).unwrap();
        let kl = |m: ArrayView2<'_, f64>, n: ArrayView2<'_, f64>| kl_forward(m, n);
        for (side, analytic) in [(Side::M, &exact.grad_m), (Side::N, &exact.grad_n)] {
            let coarse = finite_diff(kl, o_m.view(), o_n.view(), side, 1e-2).unwrap();
            let fine = finite_diff(kl, o_m.view(), o_n.view(), side, 5e-3).unwrap();
            let ratio = max_abs_diff(&coarse, analytic) / max_abs_diff(&fine, analytic);
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
            let rel = relative_diff(analytic, &finite_diff(kl, o_m.view(), o_n.view(), side, 1e-5).unwrap());
            assert!(rel < 1e-5);
        }
    }

    #[test]
    fn kl_equivalence_single_identical_pair() {
        let o = ndarray::arr2(&[[0.2, -1.0, 0.5, 2.0]]);
        let kl = kl_backward(o.view(), o.view()).unwrap();
        let dkl = dkl_family(o.view(), o.view(), None, &LossConfig::dkl(), None).unwrap();
        assert_eq!(max_abs_diff(&kl.grad_m, &dkl.grad_m), 0.0);
        assert_eq!(max_abs_diff(&kl.grad_n, &dkl.grad_n), 0.0);
    }

    #[test]
    fn kl_equivalence_passes_small_sweep() {
        let r = check_kl_equivalence(50, &[2, 5, 10, 100], 3, 1e-10).unwrap();
        assert!(r.passed, "{}", r.to_text());
        assert_eq!(r.trials, 2 * 50 * 4);
        assert!(r.worst_case.is_none());
    }

    #[test]
    fn perturbed_beta_is_detected_with_predicted_gap() {
        let cfg = LossConfig {
            beta: 2.0,
            ..LossConfig::dkl()
        };
        let r = compare_kl_dkl("perturbed", &cfg, 1, &[5], 9, 1e-10).unwrap();
        assert!(!r.passed);
        assert!(r.worst_case.is_some());
        // replay the single trial: grad_n gap is (beta - 1) (s_n - s_m)
        let mut rng = trial_rng(9, 5, 1);
        let o_m = random_logits(&mut rng, 1, 5, LOGIT_SCALES[0]);
        let o_n = random_logits(&mut rng, 1, 5, LOGIT_SCALES[0]);
        let s_m = softmax(&o_m.row(0).to_vec(), 1.0).unwrap();
        let s_n = softmax(&o_n.row(0).to_vec(), 1.0).unwrap();
        let gap = s_m
            .as_slice()
            .iter()
            .zip(s_n.as_slice())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!((r.max_abs_diff - gap).abs() < 1e-14);
    }

    #[test]
    fn asymmetry_report_passes() {
        let r = check_asymmetry(60, 4).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn fd_sweep_passes_for_every_loss() {
        for loss in FdLoss::ALL {
            let r = fd_sweep(loss, &[2, 5], 1, 2, 5, DEFAULT_STEP).unwrap();
            assert!(r.passed, "{}", r.to_text());
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let a = check_kl_equivalence(20, &[3, 7], 11, 1e-10).unwrap();
        let b = check_kl_equivalence(20, &[3, 7], 11, 1e-10).unwrap();
        assert_eq!(a, b);
        let a = fd_sweep(FdLoss::Ikl, &[4], 1, 2, 2, DEFAULT_STEP).unwrap();
        let b = fd_sweep(FdLoss::Ikl, &[4], 1, 2, 2, DEFAULT_STEP).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_tolerance_fails() {
        let r = check_kl_equivalence(30, &[5, 10], 1, 0.0).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn report_text_is_key_value() {
        let r = check_asymmetry(6, 1).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("[asymmetry]\n"));
        assert!(text.contains("passed = true"));
        assert!(text.contains("class_counts = [2, 5, 10]"));
    }
}
