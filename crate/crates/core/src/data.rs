//! Datasets: a seeded Gaussian mixture, stratified splits, CSV loading and
//! the `DKLL` logits file.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

/// Magic bytes of the logits file.
pub const LOGITS_MAGIC: &[u8; 4] = b"DKLL";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// Checks that labels lie in `[0, C)`, every class is present and the
    /// row counts agree.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                what: "dataset labels",
                expected: (features.nrows(), 1),
                found: (labels.len(), 1),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: num_classes,
                });
            }
            counts[y] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(empty));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn in_unit_box(&self) -> bool {
        self.features.iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Rescales each column to `[0, 1]`; constant columns become `0.5`.
pub fn min_max_rescale(features: &mut Array2<f64>) {
    for mut col in features.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
        } else {
            col.fill(0.5);
        }
    }
}

/// Class means on a multi-frequency ring: coordinate pair `(2k, 2k+1)` of
/// class `c` is `(cos, sin)(2π (k+1) c / C)`, scaled so the mean has norm
/// about 1 whatever `D` is. Samples add `N(0, spread²)` noise per
/// coordinate; the result is min-max rescaled to `[0, 1]^D`.
///
/// Rows are grouped by class, `n_per_class` each.
pub fn gaussian_mixture(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class < 1 {
        return Err(Error::InvalidArgument(format!(
            "need C >= 2, D >= 2, n >= 1; got C={classes}, D={dim}, n={n_per_class}"
        )));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be > 0, got {spread}")));
    }
    let scale = (2.0 / dim as f64).sqrt();
    let means = Array2::from_shape_fn((classes, dim), |(c, d)| {
        let freq = (d / 2 + 1) as f64;
        let angle = std::f64::consts::TAU * freq * c as f64 / classes as f64;
        scale * if d % 2 == 0 { angle.cos() } else { angle.sin() }
    });
    let mut rng = SeededRng::new(seed, stream::DATA);
    let n = classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (row, mut out) in features.rows_mut().into_iter().enumerate() {
        let c = row / n_per_class;
        for (d, v) in out.iter_mut().enumerate() {
            *v = means[[c, d]] + spread * rng.normal();
        }
        labels.push(c);
    }
    min_max_rescale(&mut features);
    Dataset::new(features, labels, classes)
}

/// Stratified split. Each class keeps `round(n_c * test_fraction)` rows for
/// the test set, clamped to `[1, n_c - 1]`. Both halves preserve the
/// original row order.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = SeededRng::new(seed, stream::SPLIT);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train = Vec::with_capacity(dataset.len());
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} sample(s); stratified splitting needs at least 2",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Reads a CSV file with a header row: feature columns plus one column
/// named `label`. The class count is `max(label) + 1`.
///
/// Values outside `[0, 1]` are rejected unless `rescale` is set, in which
/// case every column is min-max rescaled.
pub fn load_csv(path: &Path, rescale: bool) -> Result<Dataset> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = reader.headers()?.clone();
    let label_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h == "label")
        .map(|(i, _)| i)
        .collect();
    let label_col = match label_cols.as_slice() {
        [one] => *one,
        [] => return Err(format("no `label` column in header".into())),
        _ => return Err(format("more than one `label` column".into())),
    };
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(format("no feature columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let y = field
                    .parse::<usize>()
                    .map_err(|_| format(format!("line {line}: bad label `{field}`")))?;
                labels.push(y);
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|_| format(format!("line {line}, column {}: bad number `{field}`", col + 1)))?;
                if !v.is_finite() {
                    return Err(format(format!("line {line}, column {}: non-finite value", col + 1)));
                }
                if !rescale && !(0.0..=1.0).contains(&v) {
                    return Err(format(format!(
                        "line {line}, column {}: {v} outside [0, 1] (enable rescaling to accept it)",
                        col + 1
                    )));
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(format("no data rows".into()));
    }
    let mut features =
        Array2::from_shape_vec((labels.len(), dim), values).map_err(|e| format(e.to_string()))?;
    if rescale {
        min_max_rescale(&mut features);
    }
    let classes = labels.iter().copied().max().expect("nonempty") + 1;
    Dataset::new(features, labels, classes)
}

/// Writes `dataset` in the format read by [`load_csv`], columns `x0..x{D-1}`
/// then `label`.
pub fn save_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|d| format!("x{d}")).collect();
    header.push("label".into());
    writer.write_record(&header)?;
    for (row, &y) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(y.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}

/// `DKLL`, `N` and `C` as little-endian `u32`, then `N * C` little-endian
/// `f64` values row-major.
pub fn logits_to_bytes(logits: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let too_big = |n: usize| u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} exceeds u32")));
    let (n, c) = logits.dim();
    let mut out = Vec::with_capacity(12 + 8 * n * c);
    out.extend_from_slice(LOGITS_MAGIC);
    out.extend_from_slice(&too_big(n)?.to_le_bytes());
    out.extend_from_slice(&too_big(c)?.to_le_bytes());
    for v in logits.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn logits_from_bytes(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < 4 || &bytes[..4] != LOGITS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DKLL",
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} byte header", bytes.len()),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 8 * n * c;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{n}x{c} payload needs {expected} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{n}x{c} payload followed by {} extra bytes", bytes.len() - expected),
        });
    }
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits file"));
    }
    Ok(Array2::from_shape_vec((n, c), values).expect("sized above"))
}

pub fn export_logits(path: &Path, logits: ArrayView2<'_, f64>) -> Result<()> {
    fs::write(path, logits_to_bytes(logits)?)?;
    Ok(())
}

pub fn import_logits(path: &Path) -> Result<Array2<f64>> {
    logits_from_bytes(&fs::read(path)?, path)
}
