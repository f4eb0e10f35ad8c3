//! Divergence losses with closed-form gradients.
//!
//! Every loss compares two logits batches: `o_m` (the reference side: clean
//! image in adversarial training, teacher in distillation) and `o_n` (the
//! side being pulled towards it). Values are batch means; gradients are the
//! exact derivatives of those means.
//!
//! The decoupled family splits KL into a weighted MSE over pairwise logit
//! differences plus a cross-entropy against the (detached) reference
//! probabilities:
//!
//! ```text
//! value = alpha * (1/4) * sum_jk w[j][k] * (dm[j][k] - dn[j][k])^2
//!       + beta  * (-sum_j S(s_m[j]) * log s_n[j])
//! ```
//!
//! Which side of the weighted MSE receives gradient is controlled by
//! [`LossConfig::detach_m`] and [`LossConfig::break_asymmetry`]; the weights
//! and the cross-entropy targets are always constants.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::class_stats::ClassStatsTable;
use crate::error::{Error, Result};
use crate::numerics::{
    check_batch, check_prob_row, log_softmax_rows_unchecked, softmax_rows_unchecked, PROB_SUM_TOL,
};

/// `B x C` matrix of pre-softmax scores.
pub type LogitsBatch = Array2<f64>;

/// Maximum `|w[j][k] - w[k][j]|` accepted by [`wmse_dense`].
pub const WEIGHT_SYMMETRY_TOL: f64 = 1e-12;

/// Where the pair weights of the wMSE term come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// `w = s_m s_m^T`, per sample.
    #[default]
    SampleWise,
    /// `w = s̄_y s̄_y^T` from the class statistics of the ground-truth class.
    ClassWise,
}

/// Which wMSE kernel [`dkl_family`] evaluates. Both give the same values and
/// gradients; `Dense` materializes the `C x C` pair matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WmseKernel {
    Dense,
    #[default]
    Efficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// wMSE weight; the forward prefactor is `alpha / 4`.
    pub alpha: f64,
    /// Cross-entropy weight.
    pub beta: f64,
    /// Treat `o_m` as a constant (distillation).
    pub detach_m: bool,
    /// Let the wMSE term send gradient into `o_n`.
    pub break_asymmetry: bool,
    pub weight_source: WeightSource,
    pub kernel: WmseKernel,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::dkl()
    }
}

impl LossConfig {
    /// The configuration whose gradients coincide with KL.
    pub fn dkl() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            detach_m: false,
            break_asymmetry: false,
            weight_source: WeightSource::SampleWise,
            kernel: WmseKernel::Efficient,
        }
    }

    /// Class-wise weights with gradient through both sides of the wMSE.
    pub fn ikl(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            detach_m: false,
            break_asymmetry: true,
            weight_source: WeightSource::ClassWise,
            kernel: WmseKernel::Efficient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Which inputs of the wMSE term receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradFlow {
    pub to_m: bool,
    pub to_n: bool,
}

impl GradFlow {
    pub const BOTH: GradFlow = GradFlow {
        to_m: true,
        to_n: true,
    };
    pub const NONE: GradFlow = GradFlow {
        to_m: false,
        to_n: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch-mean loss.
    pub value: f64,
    /// Unweighted wMSE component (with its 1/4 prefactor); zero for losses
    /// that are not decomposed.
    pub wmse: f64,
    /// Unweighted soft cross-entropy component; zero for losses that are not
    /// decomposed.
    pub ce: f64,
    pub grad_m: Array2<f64>,
    pub grad_n: Array2<f64>,
}

/// wMSE value (including the 1/4) and its gradients; zero-filled on
/// detached sides.
#[derive(Debug, Clone, PartialEq)]
pub struct WmseOutput {
    pub value: f64,
    pub grad_m: Array2<f64>,
    pub grad_n: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub value: f64,
    pub grad_n: Array2<f64>,
}

fn dims(a: ArrayView2<'_, f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn check_pair(o_m: ArrayView2<'_, f64>, o_n: ArrayView2<'_, f64>) -> Result<()> {
    check_batch(o_m, "o_m")?;
    if dims(o_m) != dims(o_n) {
        return Err(Error::ShapeMismatch {
            what: "o_n",
            expected: dims(o_m),
            found: dims(o_n),
        });
    }
    check_batch(o_n, "o_n")
}

fn check_scores(scores: ArrayView2<'_, f64>, shape: (usize, usize), what: &'static str) -> Result<()> {
    if dims(scores) != shape {
        return Err(Error::ShapeMismatch {
            what,
            expected: shape,
            found: dims(scores),
        });
    }
    for row in scores.axis_iter(Axis(0)) {
        match row.as_slice() {
            Some(slice) => check_prob_row(slice, PROB_SUM_TOL, what)?,
            None => check_prob_row(&row.to_vec(), PROB_SUM_TOL, what)?,
        }
    }
    Ok(())
}

fn batch_scale(rows: usize) -> f64 {
    if rows == 0 {
        0.0
    } else {
        1.0 / rows as f64
    }
}

/// `mean_i sum_j s_m[j] (log s_m[j] - log s_n[j])`.
pub fn kl_forward(o_m: ArrayView2<'_, f64>, o_n: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(o_m, o_n)?;
    let ls_m = log_softmax_rows_unchecked(o_m, 1.0);
    let ls_n = log_softmax_rows_unchecked(o_n, 1.0);
    let total: f64 = ls_m
        .axis_iter(Axis(0))
        .zip(ls_n.axis_iter(Axis(0)))
        .map(|(lm, ln)| kl_row(lm, ln))
        .sum();
    Ok(total * batch_scale(o_m.nrows()))
}

fn kl_row(ls_m: ArrayView1<'_, f64>, ls_n: ArrayView1<'_, f64>) -> f64 {
    ls_m.iter()
        .zip(ls_n.iter())
        .map(|(&lm, &ln)| lm.exp() * (lm - ln))
        .sum()
}

/// KL value and gradients for both inputs.
///
/// `grad_n = s_n - s_m`. `grad_m` follows the chain rule through the softmax
/// Jacobian, `s_m[j] * (log s_m[j] - log s_n[j] - KL)`, which is the same
/// quantity as `sum_k (dm[j][k] - dn[j][k]) s_m[j] s_m[k]` but computed
/// without forming pairwise differences.
pub fn kl_backward(o_m: ArrayView2<'_, f64>, o_n: ArrayView2<'_, f64>) -> Result<LossOutput> {
    check_pair(o_m, o_n)?;
    let scale = batch_scale(o_m.nrows());
    let ls_m = log_softmax_rows_unchecked(o_m, 1.0);
    let ls_n = log_softmax_rows_unchecked(o_n, 1.0);
    let mut grad_m = Array2::zeros(o_m.raw_dim());
    let mut grad_n = Array2::zeros(o_m.raw_dim());
    let mut total = 0.0;
    for (((lm, ln), mut gm), mut gn) in ls_m
        .axis_iter(Axis(0))
        .zip(ls_n.axis_iter(Axis(0)))
        .zip(grad_m.axis_iter_mut(Axis(0)))
        .zip(grad_n.axis_iter_mut(Axis(0)))
    {
        let kl = kl_row(lm, ln);
        total += kl;
        for j in 0..lm.len() {
            let sm = lm[j].exp();
            let sn = ln[j].exp();
            gm[j] = scale * sm * (lm[j] - ln[j] - kl);
            gn[j] = scale * (sn - sm);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        wmse: 0.0,
        ce: 0.0,
        grad_m,
        grad_n,
    })
}

fn check_weights(w: ArrayView2<'_, f64>, c: usize, sample: usize) -> Result<()> {
    if dims(w) != (c, c) {
        return Err(Error::ShapeMismatch {
            what: "weight matrix",
            expected: (c, c),
            found: dims(w),
        });
    }
    let mut deviation: f64 = 0.0;
    for j in 0..c {
        for k in 0..c {
            let v = w[[j, k]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidWeights {
                    sample,
                    deviation: if v.is_finite() { -v } else { f64::INFINITY },
                });
            }
            deviation = deviation.max((v - w[[k, j]]).abs());
        }
    }
    if deviation > WEIGHT_SYMMETRY_TOL {
        return Err(Error::InvalidWeights { sample, deviation });
    }
    Ok(())
}

/// Dense wMSE for one sample. Returns the value with its 1/4 prefactor and
/// writes `d value / d a` into `grad` (the gradient w.r.t. `b` is its
/// negation).
fn wmse_dense_row(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    w: ArrayView2<'_, f64>,
    grad: &mut [f64],
) -> f64 {
    let c = a.len();
    // residual r[j][k] = (a_j - a_k) - (b_j - b_k)
    let residual = Array2::from_shape_fn((c, c), |(j, k)| (a[j] - a[k]) - (b[j] - b[k]));
    let mut value = 0.0;
    for j in 0..c {
        for k in 0..c {
            let r = residual[[j, k]];
            value += w[[j, k]] * r * r;
        }
    }
    // d/da_i of 1/4 sum_jk w_jk r_jk^2 = 1/2 (sum_k w_ik r_ik - sum_j w_ji r_ji)
    for (i, g) in grad.iter_mut().enumerate() {
        let mut out = 0.0;
        let mut inn = 0.0;
        for k in 0..c {
            out += w[[i, k]] * residual[[i, k]];
            inn += w[[k, i]] * residual[[k, i]];
        }
        *g = 0.5 * (out - inn);
    }
    0.25 * value
}

fn finish_wmse(
    total: f64,
    grad: Array2<f64>,
    flow: GradFlow,
    scale: f64,
) -> WmseOutput {
    let grad_m = if flow.to_m {
        &grad * scale
    } else {
        Array2::zeros(grad.raw_dim())
    };
    let grad_n = if flow.to_n {
        &grad * -scale
    } else {
        Array2::zeros(grad.raw_dim())
    };
    WmseOutput {
        value: total * scale,
        grad_m,
        grad_n,
    }
}

/// wMSE with explicit per-sample `C x C` weight matrices.
///
/// `weights[i]` must be symmetric (within [`WEIGHT_SYMMETRY_TOL`]) and
/// nonnegative.
pub fn wmse_dense(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    weights: &[Array2<f64>],
    flow: GradFlow,
) -> Result<WmseOutput> {
    check_pair(o_m, o_n)?;
    let (rows, c) = dims(o_m);
    if weights.len() != rows {
        return Err(Error::ShapeMismatch {
            what: "weights (samples x 1)",
            expected: (rows, 1),
            found: (weights.len(), 1),
        });
    }
    for (i, w) in weights.iter().enumerate() {
        check_weights(w.view(), c, i)?;
    }
    let mut grad = Array2::zeros((rows, c));
    let mut total = 0.0;
    for i in 0..rows {
        let g = grad.row_mut(i).into_slice().expect("standard layout");
        total += wmse_dense_row(o_m.row(i), o_n.row(i), weights[i].view(), g);
    }
    Ok(finish_wmse(total, grad, flow, batch_scale(rows)))
}

/// Dense wMSE with weights `c c^T` built one sample at a time from
/// `class_scores` (transient memory `O(C^2)`).
pub fn wmse_dense_from_scores(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    class_scores: ArrayView2<'_, f64>,
    flow: GradFlow,
) -> Result<WmseOutput> {
    check_pair(o_m, o_n)?;
    check_scores(class_scores, dims(o_m), "class_scores")?;
    let (rows, c) = dims(o_m);
    let mut grad = Array2::zeros((rows, c));
    let mut total = 0.0;
    for i in 0..rows {
        let s = class_scores.row(i);
        let w = Array2::from_shape_fn((c, c), |(j, k)| s[j] * s[k]);
        let g = grad.row_mut(i).into_slice().expect("standard layout");
        total += wmse_dense_row(o_m.row(i), o_n.row(i), w.view(), g);
    }
    Ok(finish_wmse(total, grad, flow, batch_scale(rows)))
}

/// Memory-efficient wMSE for weights `c c^T` with `sum_k c_k = 1`.
///
/// With `d = o_m - o_n` and `mu = sum_k c_k d_k`, the pair sum collapses to
/// `1/2 (sum_k c_k d_k^2 - mu^2) = 1/2 sum_k c_k (d_k - mu)^2` and the
/// gradient w.r.t. `o_m` to `c_i (d_i - mu)`. The centered form avoids the
/// cancellation between the two squared sums. No buffer beyond the two
/// output gradients is allocated.
pub fn wmse_efficient(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    class_scores: ArrayView2<'_, f64>,
    flow: GradFlow,
) -> Result<WmseOutput> {
    check_pair(o_m, o_n)?;
    check_scores(class_scores, dims(o_m), "class_scores")?;
    let (rows, c) = dims(o_m);
    let scale = batch_scale(rows);
    let mut grad_m = Array2::zeros((rows, c));
    let mut grad_n = Array2::zeros((rows, c));
    let mut total = 0.0;
    for i in 0..rows {
        let (a, b, s) = (o_m.row(i), o_n.row(i), class_scores.row(i));
        let mut mu = 0.0;
        for k in 0..c {
            mu += s[k] * (a[k] - b[k]);
        }
        let mut value = 0.0;
        for k in 0..c {
            let centered = (a[k] - b[k]) - mu;
            value += s[k] * centered * centered;
            let g = scale * s[k] * centered;
            if flow.to_m {
                grad_m[[i, k]] = g;
            }
            if flow.to_n {
                grad_n[[i, k]] = -g;
            }
        }
        total += 0.5 * value;
    }
    Ok(WmseOutput {
        value: total * scale,
        grad_m,
        grad_n,
    })
}

/// Soft-label cross-entropy `-mean_i sum_j t[j] log s_n[j]`, gradient
/// `s_n - t` per row (batch-mean scaled).
pub fn soft_ce(o_n: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<CeOutput> {
    check_batch(o_n, "o_n")?;
    check_scores(targets, dims(o_n), "soft targets")?;
    Ok(soft_ce_unchecked(o_n, targets))
}

fn soft_ce_unchecked(o_n: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> CeOutput {
    let scale = batch_scale(o_n.nrows());
    let ls_n = log_softmax_rows_unchecked(o_n, 1.0);
    let mut grad_n = Array2::zeros(o_n.raw_dim());
    let mut total = 0.0;
    for ((ln, t), mut g) in ls_n
        .axis_iter(Axis(0))
        .zip(targets.axis_iter(Axis(0)))
        .zip(grad_n.axis_iter_mut(Axis(0)))
    {
        for j in 0..ln.len() {
            total -= t[j] * ln[j];
            g[j] = scale * (ln[j].exp() - t[j]);
        }
    }
    CeOutput {
        value: total * scale,
        grad_n,
    }
}

/// Hard-label cross-entropy, the one-hot special case of [`soft_ce`].
pub fn hard_ce(o_n: ArrayView2<'_, f64>, labels: &[usize]) -> Result<CeOutput> {
    check_batch(o_n, "o_n")?;
    check_labels(labels, o_n.nrows(), o_n.ncols())?;
    let targets = one_hot(labels, o_n.ncols());
    Ok(soft_ce_unchecked(o_n, targets.view()))
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y]] = 1.0;
    }
    t
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            what: "labels (samples x 1)",
            expected: (rows, 1),
            found: (labels.len(), 1),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Decoupled KL and its variants (DKL, DKL-KD with or without asymmetry
/// breaking, IKL, IKL-KD), selected by `cfg`.
///
/// Gradient routing:
/// - cross-entropy targets are `S(s_m)`; the CE term only reaches `o_n`;
/// - the wMSE term reaches `o_m` unless `detach_m`;
/// - the wMSE term reaches `o_n` iff `break_asymmetry`;
/// - pair weights are always constants.
pub fn dkl_family(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    cfg: &LossConfig,
    stats: Option<&ClassStatsTable>,
) -> Result<LossOutput> {
    Ok(dkl_family_traced(o_m, o_n, labels, cfg, stats)?.0)
}

/// [`dkl_family`] plus the unweighted wMSE term on its own, so callers can
/// inspect how much gradient it sends to each side.
pub fn dkl_family_traced(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    cfg: &LossConfig,
    stats: Option<&ClassStatsTable>,
) -> Result<(LossOutput, WmseOutput)> {
    cfg.validate()?;
    check_pair(o_m, o_n)?;
    let (rows, c) = dims(o_m);
    let s_m = softmax_rows_unchecked(o_m, 1.0);

    let class_scores = match cfg.weight_source {
        WeightSource::SampleWise => None,
        WeightSource::ClassWise => {
            let stats = stats.ok_or(Error::MissingClassStats("a class statistics table"))?;
            let labels = labels.ok_or(Error::MissingClassStats("labels"))?;
            check_labels(labels, rows, c)?;
            if stats.num_classes() != c {
                return Err(Error::ShapeMismatch {
                    what: "class statistics table",
                    expected: (c, c),
                    found: (stats.num_classes(), stats.num_classes()),
                });
            }
            Some(stats.class_scores(labels)?)
        }
    };
    let scores = class_scores.as_ref().map_or(s_m.view(), |s| s.view());

    let flow = GradFlow {
        to_m: !cfg.detach_m,
        to_n: cfg.break_asymmetry,
    };
    let wmse = match cfg.kernel {
        WmseKernel::Efficient => wmse_efficient(o_m, o_n, scores, flow)?,
        WmseKernel::Dense => wmse_dense_from_scores(o_m, o_n, scores, flow)?,
    };
    let ce = soft_ce_unchecked(o_n, s_m.view());

    let grad_m = &wmse.grad_m * cfg.alpha;
    let grad_n = &wmse.grad_n * cfg.alpha + &(ce.grad_n * cfg.beta);
    debug_assert_eq!(grad_m.dim(), (rows, c));
    let out = LossOutput {
        value: cfg.alpha * wmse.value + cfg.beta * ce.value,
        wmse: wmse.value,
        ce: ce.value,
        grad_m,
        grad_n,
    };
    Ok((out, wmse))
}

/// Jensen-Shannon divergence `1/2 KL(s_m || M) + 1/2 KL(s_n || M)` with
/// `M = (s_m + s_n) / 2`.
///
/// Gradients use the virtual logits `o' = log M` (any logits with
/// `softmax(o') = M`):
/// `d/d o_n[i] = 1/2 sum_j s_n[i] s_n[j] ((dn[i][j]) - (do'[i][j]))`, and
/// symmetrically for `o_m`.
pub fn jsd_forward_backward(
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
) -> Result<LossOutput> {
    check_pair(o_m, o_n)?;
    let scale = batch_scale(o_m.nrows());
    let ls_m = log_softmax_rows_unchecked(o_m, 1.0);
    let ls_n = log_softmax_rows_unchecked(o_n, 1.0);
    let mut grad_m = Array2::zeros(o_m.raw_dim());
    let mut grad_n = Array2::zeros(o_m.raw_dim());
    let c = o_m.ncols();
    let mut e_m = vec![0.0; c];
    let mut e_n = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..o_m.nrows() {
        let (lm, ln) = (ls_m.row(i), ls_n.row(i));
        let mut mean_m = 0.0;
        let mut mean_n = 0.0;
        for j in 0..c {
            let log_mix = log_add_exp(lm[j], ln[j]) - std::f64::consts::LN_2;
            e_m[j] = lm[j] - log_mix;
            e_n[j] = ln[j] - log_mix;
            mean_m += lm[j].exp() * e_m[j];
            mean_n += ln[j].exp() * e_n[j];
        }
        total += 0.5 * (mean_m + mean_n);
        for j in 0..c {
            grad_m[[i, j]] = scale * 0.5 * lm[j].exp() * (e_m[j] - mean_m);
            grad_n[[i, j]] = scale * 0.5 * ln[j].exp() * (e_n[j] - mean_n);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        wmse: 0.0,
        ce: 0.0,
        grad_m,
        grad_n,
    })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    const LN9: f64 = 2.197_224_577_336_219_6;

    fn random_batch(rng: &mut SeededRng, rows: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, c), |_| scale * rng.normal())
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Central differences of a scalar function of one batch.
    fn fd(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let fp = f(&xp);
            xp[idx] = orig - h;
            let fm = f(&xp);
            xp[idx] = orig;
            g[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn kl_forward_examples() {
        let o = arr2(&[[0.3, -1.2, 2.0]]);
        assert_eq!(kl_forward(o.view(), o.view()).unwrap(), 0.0);

        let o_m = arr2(&[[LN9, 0.0]]);
        let o_n = arr2(&[[0.0, LN9]]);
        // 0.9 ln(0.9/0.1) + 0.1 ln(0.1/0.9) = 0.8 ln 9
        let v = kl_forward(o_m.view(), o_n.view()).unwrap();
        assert!((v - 0.8 * LN9).abs() < 1e-14);
        assert!((v - 1.757_780).abs() < 1e-6);

        let o_m = Array2::zeros((1, 4));
        let o_n = arr2(&[[3f64.ln(), 0.0, 0.0, 0.0]]);
        // s_n = [1/2, 1/6, 1/6, 1/6]
        let sn = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        let expected: f64 = sn.iter().map(|q: &f64| 0.25 * (0.25f64.ln() - q.ln())).sum();
        let v = kl_forward(o_m.view(), o_n.view()).unwrap();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn kl_forward_rejects_shape_mismatch() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(
            kl_forward(a.view(), b.view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(kl_backward(a.view(), b.view()).is_err());
    }

    #[test]
    fn kl_backward_examples() {
        let o = arr2(&[[0.3, -1.2, 2.0]]);
        let out = kl_backward(o.view(), o.view()).unwrap();
        assert!(max_abs(&out.grad_m) < 1e-16 && max_abs(&out.grad_n) < 1e-16);

        let o_m = arr2(&[[LN9, 0.0]]);
        let o_n = arr2(&[[0.0, LN9]]);
        let out = kl_backward(o_m.view(), o_n.view()).unwrap();
        // frozen from central differences of kl_forward (h = 1e-5)
        let fd_n = fd(|x| kl_forward(o_m.view(), x.view()).unwrap(), &o_n, 1e-5);
        let fd_m = fd(|x| kl_forward(x.view(), o_n.view()).unwrap(), &o_m, 1e-5);
        assert!((fd_n[[0, 0]] + 0.8).abs() < 1e-9);
        assert!((fd_m[[0, 0]] - 0.18 * LN9).abs() < 1e-9);
        assert!((out.grad_n[[0, 0]] + 0.8).abs() < 1e-14);
        assert!((out.grad_n[[0, 1]] - 0.8).abs() < 1e-14);
        assert!((out.grad_m[[0, 0]] - 0.09 * 2.0 * LN9).abs() < 1e-14);
        assert!((out.grad_m[[0, 1]] + 0.09 * 2.0 * LN9).abs() < 1e-14);
        assert!((out.grad_m[[0, 0]] - 0.3955).abs() < 1e-4);
    }

    #[test]
    fn kl_grad_m_matches_pairwise_formula() {
        let mut rng = SeededRng::new(1, 0);
        let o_m = random_batch(&mut rng, 3, 6, 2.0);
        let o_n = random_batch(&mut rng, 3, 6, 2.0);
        let out = kl_backward(o_m.view(), o_n.view()).unwrap();
        for i in 0..3 {
            let s = crate::numerics::softmax(&o_m.row(i).to_vec(), 1.0).unwrap();
            let s = s.as_slice();
            for j in 0..6 {
                let mut g = 0.0;
                for k in 0..6 {
                    let dm = o_m[[i, j]] - o_m[[i, k]];
                    let dn = o_n[[i, j]] - o_n[[i, k]];
                    g += (dm - dn) * s[j] * s[k];
                }
                assert!((out.grad_m[[i, j]] - g / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wmse_dense_examples() {
        let o = arr2(&[[0.4, -0.1]]);
        let w = vec![arr2(&[[0.25, 0.25], [0.25, 0.25]])];
        let out = wmse_dense(o.view(), o.view(), &w, GradFlow::BOTH).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(max_abs(&out.grad_m), 0.0);

        // residual is +-1 off-diagonal: 1/4 (0.25 + 0.25) = 0.125
        let o_m = arr2(&[[1.0, 0.0]]);
        let o_n = arr2(&[[0.0, 0.0]]);
        let out = wmse_dense(o_m.view(), o_n.view(), &w, GradFlow::BOTH).unwrap();
        assert!((out.value - 0.125).abs() < 1e-16);
        let sum = &out.grad_m + &out.grad_n;
        assert_eq!(max_abs(&sum), 0.0);
    }

    #[test]
    fn wmse_dense_rejects_bad_weights() {
        let o = arr2(&[[0.4, -0.1]]);
        let asym = vec![arr2(&[[0.25, 0.3], [0.2, 0.25]])];
        assert!(matches!(
            wmse_dense(o.view(), o.view(), &asym, GradFlow::BOTH),
            Err(Error::InvalidWeights { .. })
        ));
        let neg = vec![arr2(&[[0.25, -0.1], [-0.1, 0.25]])];
        assert!(wmse_dense(o.view(), o.view(), &neg, GradFlow::BOTH).is_err());
        assert!(wmse_dense(o.view(), o.view(), &[], GradFlow::BOTH).is_err());
    }

    #[test]
    fn wmse_dense_matches_pair_brute_force() {
        let mut rng = SeededRng::new(5, 0);
        let (b, c) = (3, 5);
        let o_m = random_batch(&mut rng, b, c, 1.5);
        let o_n = random_batch(&mut rng, b, c, 1.5);
        let weights: Vec<Array2<f64>> = (0..b)
            .map(|_| {
                let r = Array2::from_shape_fn((c, c), |_| rng.uniform());
                &r + &r.t()
            })
            .collect();
        let out = wmse_dense(o_m.view(), o_n.view(), &weights, GradFlow::BOTH).unwrap();
        let mut brute = 0.0;
        for i in 0..b {
            for j in 0..c {
                for k in 0..c {
                    let r = (o_m[[i, j]] - o_m[[i, k]]) - (o_n[[i, j]] - o_n[[i, k]]);
                    brute += weights[i][[j, k]] * r * r / 4.0;
                }
            }
        }
        brute /= b as f64;
        assert!((out.value - brute).abs() < 1e-12);
        let f = |x: &Array2<f64>| wmse_dense(x.view(), o_n.view(), &weights, GradFlow::BOTH).unwrap().value;
        let g = fd(f, &o_m, 1e-5);
        assert!(max_abs(&(&g - &out.grad_m)) < 1e-8);
    }

    #[test]
    fn wmse_flow_flags_zero_detached_side() {
        let mut rng = SeededRng::new(6, 0);
        let o_m = random_batch(&mut rng, 2, 4, 1.0);
        let o_n = random_batch(&mut rng, 2, 4, 1.0);
        let scores = softmax_rows_unchecked(o_m.view(), 1.0);
        for flow in [
            GradFlow::NONE,
            GradFlow { to_m: true, to_n: false },
            GradFlow { to_m: false, to_n: true },
        ] {
            for out in [
                wmse_efficient(o_m.view(), o_n.view(), scores.view(), flow).unwrap(),
                wmse_dense_from_scores(o_m.view(), o_n.view(), scores.view(), flow).unwrap(),
            ] {
                assert_eq!(max_abs(&out.grad_m) == 0.0, !flow.to_m);
                assert_eq!(max_abs(&out.grad_n) == 0.0, !flow.to_n);
            }
        }
    }

    /// Algorithm-2 arithmetic exactly as written (squared sums, no centering).
    fn wmse_literal_sums(o_m: &Array2<f64>, o_n: &Array2<f64>, c: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..o_m.nrows() {
            let (a, b, s) = (o_m.row(i), o_n.row(i), c.row(i));
            let saa: f64 = (0..a.len()).map(|k| s[k] * a[k] * a[k]).sum();
            let sbb: f64 = (0..a.len()).map(|k| s[k] * b[k] * b[k]).sum();
            let sab: f64 = (0..a.len()).map(|k| s[k] * a[k] * b[k]).sum();
            let sa: f64 = (0..a.len()).map(|k| s[k] * a[k]).sum();
            let sb: f64 = (0..a.len()).map(|k| s[k] * b[k]).sum();
            let loss_a = 2.0 * saa - 2.0 * sa * sa;
            let loss_b = 2.0 * sbb - 2.0 * sb * sb;
            let loss_ex = 4.0 * sab - 4.0 * sa * sb;
            total += 0.25 * (loss_a + loss_b - loss_ex);
        }
        total / o_m.nrows() as f64
    }

    #[test]
    fn wmse_efficient_examples() {
        let o = arr2(&[[0.4, -0.1, 0.7]]);
        let c = arr2(&[[0.2, 0.3, 0.5]]);
        let out = wmse_efficient(o.view(), o.view(), c.view(), GradFlow::BOTH).unwrap();
        assert_eq!(out.value, 0.0);

        let o_m = arr2(&[[1.0, 0.0]]);
        let o_n = arr2(&[[0.0, 0.0]]);
        let c = arr2(&[[0.5, 0.5]]);
        let out = wmse_efficient(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
        assert!((out.value - 0.125).abs() < 1e-16);

        let mut rng = SeededRng::new(8, 0);
        let o_m = random_batch(&mut rng, 4, 7, 1.0);
        let o_n = random_batch(&mut rng, 4, 7, 1.0);
        let c = softmax_rows_unchecked(random_batch(&mut rng, 4, 7, 1.0).view(), 1.0);
        let out = wmse_efficient(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
        assert!((out.value - wmse_literal_sums(&o_m, &o_n, &c)).abs() < 1e-12);
    }

    #[test]
    fn wmse_efficient_rejects_unnormalized_scores() {
        let o = arr2(&[[0.4, -0.1]]);
        let c = arr2(&[[0.5, 0.6]]);
        assert!(matches!(
            wmse_efficient(o.view(), o.view(), c.view(), GradFlow::BOTH),
            Err(Error::InvalidProbVector { .. })
        ));
    }

    #[test]
    fn wmse_efficient_matches_dense_at_c100() {
        let mut rng = SeededRng::new(9, 0);
        let o_m = random_batch(&mut rng, 8, 100, 2.0);
        let o_n = random_batch(&mut rng, 8, 100, 2.0);
        let c = softmax_rows_unchecked(random_batch(&mut rng, 8, 100, 1.0).view(), 1.0);
        let e = wmse_efficient(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
        let d = wmse_dense_from_scores(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
        assert!((e.value - d.value).abs() <= 1e-10 * (1.0 + d.value.abs()));
        assert!(max_abs(&(&e.grad_m - &d.grad_m)) <= 1e-10);
        assert!(max_abs(&(&e.grad_n - &d.grad_n)) <= 1e-10);
    }

    #[test]
    fn soft_ce_examples() {
        let o = Array2::zeros((1, 4));
        let t = Array2::from_elem((1, 4), 0.25);
        let out = soft_ce(o.view(), t.view()).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-15);
        assert!(max_abs(&out.grad_n) < 1e-16);

        let o = Array2::zeros((1, 2));
        let t = arr2(&[[1.0, 0.0]]);
        let out = soft_ce(o.view(), t.view()).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        assert!((out.grad_n[[0, 0]] + 0.5).abs() < 1e-15);
        assert!((out.grad_n[[0, 1]] - 0.5).abs() < 1e-15);

        let o = arr2(&[[1.3, -0.2, 0.5]]);
        let s = softmax_rows_unchecked(o.view(), 1.0);
        let out = soft_ce(o.view(), s.view()).unwrap();
        let entropy: f64 = s.iter().map(|p| -p * p.ln()).sum();
        assert!((out.value - entropy).abs() < 1e-15);
        assert!(max_abs(&out.grad_n) < 1e-16);

        assert!(soft_ce(o.view(), arr2(&[[0.5, 0.4, 0.0]]).view()).is_err());
    }

    #[test]
    fn hard_ce_checks_labels() {
        let o = Array2::zeros((2, 3));
        assert!(matches!(
            hard_ce(o.view(), &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let out = hard_ce(o.view(), &[0, 2]).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dkl_matches_kl_gradients() {
        let mut rng = SeededRng::new(10, 0);
        for kernel in [WmseKernel::Efficient, WmseKernel::Dense] {
            let cfg = LossConfig {
                kernel,
                ..LossConfig::dkl()
            };
            for c in [2, 5, 10] {
                let o_m = random_batch(&mut rng, 4, c, 1.0);
                let o_n = random_batch(&mut rng, 4, c, 1.0);
                let kl = kl_backward(o_m.view(), o_n.view()).unwrap();
                let dkl = dkl_family(o_m.view(), o_n.view(), None, &cfg, None).unwrap();
                assert!(max_abs(&(&kl.grad_m - &dkl.grad_m)) <= 1e-10);
                assert!(max_abs(&(&kl.grad_n - &dkl.grad_n)) <= 1e-10);
            }
        }
    }

    #[test]
    fn dkl_detached_without_ba_is_pure_ce() {
        let mut rng = SeededRng::new(11, 0);
        let o_m = random_batch(&mut rng, 3, 5, 1.0);
        let o_n = random_batch(&mut rng, 3, 5, 1.0);
        let cfg = LossConfig {
            alpha: 3.0,
            beta: 2.0,
            detach_m: true,
            ..LossConfig::dkl()
        };
        let out = dkl_family(o_m.view(), o_n.view(), None, &cfg, None).unwrap();
        assert_eq!(max_abs(&out.grad_m), 0.0);
        let s_m = softmax_rows_unchecked(o_m.view(), 1.0);
        let s_n = softmax_rows_unchecked(o_n.view(), 1.0);
        let expected = (&s_n - &s_m) * (2.0 / 3.0);
        assert!(max_abs(&(&out.grad_n - &expected)) < 1e-15);
    }

    #[test]
    fn dkl_detached_with_ba_adds_wmse_term() {
        let mut rng = SeededRng::new(12, 0);
        let (b, c) = (3, 5);
        let o_m = random_batch(&mut rng, b, c, 1.0);
        let o_n = random_batch(&mut rng, b, c, 1.0);
        let alpha = 3.0;
        let base = LossConfig {
            alpha,
            beta: 2.0,
            detach_m: true,
            ..LossConfig::dkl()
        };
        let ba = LossConfig {
            break_asymmetry: true,
            ..base
        };
        let a = dkl_family(o_m.view(), o_n.view(), None, &base, None).unwrap();
        let with = dkl_family(o_m.view(), o_n.view(), None, &ba, None).unwrap();
        let s_m = softmax_rows_unchecked(o_m.view(), 1.0);
        for i in 0..b {
            for j in 0..c {
                let mut term = 0.0;
                for k in 0..c {
                    let dn = o_n[[i, j]] - o_n[[i, k]];
                    let dm = o_m[[i, j]] - o_m[[i, k]];
                    term += s_m[[i, j]] * s_m[[i, k]] * (dn - dm);
                }
                let diff = with.grad_n[[i, j]] - a.grad_n[[i, j]];
                assert!((diff - alpha * term / b as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dkl_class_wise_requires_stats_and_labels() {
        let o = Array2::zeros((2, 3));
        let cfg = LossConfig::ikl(1.0, 1.0);
        assert!(matches!(
            dkl_family(o.view(), o.view(), Some(&[0, 1]), &cfg, None),
            Err(Error::MissingClassStats(_))
        ));
        let stats = ClassStatsTable::init_uniform(3, 4.0, 0.9).unwrap();
        assert!(matches!(
            dkl_family(o.view(), o.view(), None, &cfg, Some(&stats)),
            Err(Error::MissingClassStats(_))
        ));
        assert!(matches!(
            dkl_family(o.view(), o.view(), Some(&[0, 5]), &cfg, Some(&stats)),
            Err(Error::LabelOutOfRange { .. })
        ));
        let out = dkl_family(o.view(), o.view(), Some(&[0, 2]), &cfg, Some(&stats)).unwrap();
        assert!((out.ce - 3f64.ln()).abs() < 1e-15);
        assert_eq!(out.wmse, 0.0);
    }

    #[test]
    fn dkl_rejects_negative_weights() {
        let o = Array2::zeros((1, 2));
        let cfg = LossConfig {
            alpha: -1.0,
            ..LossConfig::dkl()
        };
        assert!(dkl_family(o.view(), o.view(), None, &cfg, None).is_err());
    }

    #[test]
    fn jsd_examples() {
        let o = arr2(&[[0.3, -1.2, 2.0]]);
        let out = jsd_forward_backward(o.view(), o.view()).unwrap();
        assert!(out.value.abs() < 1e-16);
        assert!(max_abs(&out.grad_n) < 1e-16 && max_abs(&out.grad_m) < 1e-16);

        let mut rng = SeededRng::new(13, 0);
        for _ in 0..20 {
            let o_m = random_batch(&mut rng, 2, 6, 4.0);
            let o_n = random_batch(&mut rng, 2, 6, 4.0);
            let out = jsd_forward_backward(o_m.view(), o_n.view()).unwrap();
            assert!(out.value >= -1e-15 && out.value <= std::f64::consts::LN_2);
        }

        let o_m = random_batch(&mut rng, 3, 5, 1.0);
        let o_n = random_batch(&mut rng, 3, 5, 1.0);
        let out = jsd_forward_backward(o_m.view(), o_n.view()).unwrap();
        let f = |x: &Array2<f64>| jsd_forward_backward(o_m.view(), x.view()).unwrap().value;
        let g = fd(f, &o_n, 1e-5);
        assert!(max_abs(&(&g - &out.grad_n)) <= 1e-6 * max_abs(&g).max(1e-3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_shift_invariant(seed in 0u64..10_000, cm in -50.0f64..50.0, cn in -50.0f64..50.0) {
            let mut rng = SeededRng::new(seed, 0);
            let (b, c) = (3, 6);
            let o_m = random_batch(&mut rng, b, c, 2.0);
            let o_n = random_batch(&mut rng, b, c, 2.0);
            let o_m2 = &o_m + cm;
            let o_n2 = &o_n + cn;
            let cfgs = [
                LossConfig::dkl(),
                LossConfig { detach_m: true, break_asymmetry: true, ..LossConfig::dkl() },
            ];
            let pairs = [
                (kl_backward(o_m.view(), o_n.view()).unwrap(), kl_backward(o_m2.view(), o_n2.view()).unwrap()),
                (jsd_forward_backward(o_m.view(), o_n.view()).unwrap(), jsd_forward_backward(o_m2.view(), o_n2.view()).unwrap()),
                (dkl_family(o_m.view(), o_n.view(), None, &cfgs[0], None).unwrap(), dkl_family(o_m2.view(), o_n2.view(), None, &cfgs[0], None).unwrap()),
                (dkl_family(o_m.view(), o_n.view(), None, &cfgs[1], None).unwrap(), dkl_family(o_m2.view(), o_n2.view(), None, &cfgs[1], None).unwrap()),
            ];
            for (a, b2) in pairs.iter() {
                prop_assert!((a.value - b2.value).abs() <= 1e-10);
                prop_assert!(max_abs(&(&a.grad_m - &b2.grad_m)) <= 1e-10);
                prop_assert!(max_abs(&(&a.grad_n - &b2.grad_n)) <= 1e-10);
            }
        }

        #[test]
        fn gradient_rows_sum_to_zero(seed in 0u64..10_000, scale in 0.1f64..5.0) {
            let mut rng = SeededRng::new(seed, 1);
            let o_m = random_batch(&mut rng, 3, 7, scale);
            let o_n = random_batch(&mut rng, 3, 7, scale);
            let outs = [
                kl_backward(o_m.view(), o_n.view()).unwrap(),
                jsd_forward_backward(o_m.view(), o_n.view()).unwrap(),
                dkl_family(o_m.view(), o_n.view(), None, &LossConfig { break_asymmetry: true, ..LossConfig::dkl() }, None).unwrap(),
            ];
            for out in &outs {
                for g in [&out.grad_m, &out.grad_n] {
                    for row in g.axis_iter(Axis(0)) {
                        prop_assert!(row.sum().abs() <= 1e-10);
                    }
                }
                prop_assert!(out.value >= -1e-12);
            }
        }

        #[test]
        fn two_sided_wmse_is_antisymmetric(seed in 0u64..10_000) {
            let mut rng = SeededRng::new(seed, 2);
            let o_m = random_batch(&mut rng, 2, 5, 2.0);
            let o_n = random_batch(&mut rng, 2, 5, 2.0);
            let c = softmax_rows_unchecked(o_m.view(), 1.0);
            let e = wmse_efficient(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
            let d = wmse_dense_from_scores(o_m.view(), o_n.view(), c.view(), GradFlow::BOTH).unwrap();
            prop_assert!(max_abs(&(&e.grad_m + &e.grad_n)) <= 1e-12);
            prop_assert!(max_abs(&(&d.grad_m + &d.grad_n)) <= 1e-12);
        }
    }
}
