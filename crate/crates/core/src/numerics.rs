//! Numerically stable probability kernels shared by every loss.
//!
//! Temperature divides the logits before the max is subtracted. All kernels
//! run in `f64`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` for a vector to count as a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A categorical distribution over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates finiteness, range `[0, 1]` and normalization within
    /// [`PROB_SUM_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_prob_row(&values, PROB_SUM_TOL, "probability vector")?;
        Ok(Self(values))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `M[j][k] = o[j] - o[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDiffMatrix(Array2<f64>);

impl PairDiffMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.0[[j, k]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub(crate) fn check_prob_row(values: &[f64], tol: f64, what: &'static str) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidProbVector {
            what,
            reason: format!("needs at least 2 classes, got {}", values.len()),
        });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::InvalidProbVector {
            what,
            reason: format!("entry {v} outside [0, 1]"),
        });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidProbVector {
            what,
            reason: format!("sums to {sum:.17}"),
        });
    }
    Ok(())
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "logit vector needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Checks a logits batch: `C >= 2` columns and finite entries.
pub(crate) fn check_batch(logits: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if logits.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{what} needs at least 2 classes, got {}",
            logits.ncols()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Writes `log softmax(src / temperature)` into `dst`.
///
/// The largest entry contributes exactly 1 to the partition sum, so the
/// remainder goes through `ln_1p`; this keeps `log s` accurate for dominant
/// classes (e.g. `-exp(-50)` rather than `0`).
pub(crate) fn log_softmax_into(src: &[f64], temperature: f64, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), dst.len());
    let inv_t = 1.0 / temperature;
    let mut arg = 0;
    for (i, &v) in src.iter().enumerate() {
        if v > src[arg] {
            arg = i;
        }
    }
    let max = src[arg] * inv_t;
    let mut rest = 0.0;
    for (i, &v) in src.iter().enumerate() {
        if i != arg {
            rest += (v * inv_t - max).exp();
        }
    }
    let log_norm = rest.ln_1p();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v * inv_t - max) - log_norm;
    }
}

/// Writes `softmax(src / temperature)` into `dst`, as the exponential of
/// [`log_softmax_into`] so that both kernels agree bit for bit.
pub(crate) fn softmax_into(src: &[f64], temperature: f64, dst: &mut [f64]) {
    log_softmax_into(src, temperature, dst);
    for d in dst.iter_mut() {
        *d = d.exp();
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(ProbVector(out))
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// Row-wise softmax of a `B x C` batch.
pub fn softmax_rows(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    check_temperature(temperature)?;
    check_batch(logits, "logits")?;
    Ok(softmax_rows_unchecked(logits, temperature))
}

/// Row-wise log-softmax of a `B x C` batch.
pub fn log_softmax_rows(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    check_temperature(temperature)?;
    check_batch(logits, "logits")?;
    Ok(log_softmax_rows_unchecked(logits, temperature))
}

pub(crate) fn softmax_rows_unchecked(logits: ArrayView2<'_, f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    let mut src = vec![0.0; logits.ncols()];
    for (row, mut dst) in logits.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        src.iter_mut().zip(row.iter()).for_each(|(s, &v)| *s = v);
        softmax_into(&src, temperature, dst.as_slice_mut().expect("standard layout"));
    }
    out
}

pub(crate) fn log_softmax_rows_unchecked(
    logits: ArrayView2<'_, f64>,
    temperature: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    let mut src = vec![0.0; logits.ncols()];
    for (row, mut dst) in logits.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        src.iter_mut().zip(row.iter()).for_each(|(s, &v)| *s = v);
        log_softmax_into(&src, temperature, dst.as_slice_mut().expect("standard layout"));
    }
    out
}

pub fn pairwise_diff(logits: &[f64]) -> Result<PairDiffMatrix> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let c = logits.len();
    Ok(PairDiffMatrix(Array2::from_shape_fn((c, c), |(j, k)| {
        logits[j] - logits[k]
    })))
}

/// `W[j][k] = p[j] * p[k]`: the pair weights of the weighted MSE term.
pub fn outer_weight(p: &ProbVector) -> Array2<f64> {
    outer_weight_slice(p.as_slice())
}

pub(crate) fn outer_weight_slice(p: &[f64]) -> Array2<f64> {
    let c = p.len();
    Array2::from_shape_fn((c, c), |(j, k)| p[j] * p[k])
}
