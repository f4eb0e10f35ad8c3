//! Per-class mean probability vectors and the quantities derived from them.
//!
//! Row `y` holds `s̄_y`, the mean of `softmax(o / τ)` over samples of class
//! `y`. During training the rows follow an exponential moving average,
//! renormalized after every update; [`ClassStatsTable::exact_recompute`]
//! gives the exact dataset mean. Losses only ever read the table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::losses::check_labels;
use crate::numerics::{check_batch, check_temperature, outer_weight_slice, softmax_rows_unchecked};

/// Default class-statistics temperature.
pub const DEFAULT_TEMPERATURE: f64 = 4.0;
/// Default EMA momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsTable {
    rows: Array2<f64>,
    temperature: f64,
    momentum: f64,
    counts: Vec<u64>,
}

fn check_settings(classes: usize, temperature: f64, momentum: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "class statistics need at least 2 classes, got {classes}"
        )));
    }
    check_temperature(temperature)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

fn normalize_row(row: &mut [f64]) {
    for v in row.iter_mut() {
        *v = v.max(0.0);
    }
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl ClassStatsTable {
    pub fn init_uniform(classes: usize, temperature: f64, momentum: f64) -> Result<Self> {
        check_settings(classes, temperature, momentum)?;
        Ok(Self {
            rows: Array2::from_elem((classes, classes), 1.0 / classes as f64),
            temperature,
            momentum,
            counts: vec![0; classes],
        })
    }

    /// Exact per-class means of `softmax(o / τ)` over a full dataset.
    pub fn exact_recompute(
        logits: ArrayView2<'_, f64>,
        labels: &[usize],
        temperature: f64,
        momentum: f64,
    ) -> Result<Self> {
        let classes = logits.ncols();
        check_settings(classes, temperature, momentum)?;
        check_batch(logits, "logits")?;
        check_labels(labels, logits.nrows(), classes)?;
        let probs = softmax_rows_unchecked(logits, temperature);
        let mut rows = Array2::zeros((classes, classes));
        let mut counts = vec![0u64; classes];
        for (p, &y) in probs.axis_iter(Axis(0)).zip(labels) {
            let mut row = rows.row_mut(y);
            row += &p;
            counts[y] += 1;
        }
        for (y, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::EmptyClass(y));
            }
            rows.row_mut(y).mapv_inplace(|v| v / n as f64);
        }
        Ok(Self {
            rows,
            temperature,
            momentum,
            counts,
        })
    }

    /// Folds one batch into the running means:
    /// `row_y <- normalize((1 - μ) * batch_mean_y + μ * row_y)` for every
    /// class `y` present in the batch. Absent classes are left unchanged.
    pub fn update_batch(&mut self, logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        let classes = self.num_classes();
        if logits.ncols() != classes {
            return Err(Error::ShapeMismatch {
                what: "logits",
                expected: (logits.nrows(), classes),
                found: (logits.nrows(), logits.ncols()),
            });
        }
        check_batch(logits, "logits")?;
        check_labels(labels, logits.nrows(), classes)?;
        let probs = softmax_rows_unchecked(logits, self.temperature);
        let mut sums = Array2::<f64>::zeros((classes, classes));
        let mut present = vec![0u64; classes];
        for (p, &y) in probs.axis_iter(Axis(0)).zip(labels) {
            let mut row = sums.row_mut(y);
            row += &p;
            present[y] += 1;
        }
        let mu = self.momentum;
        for y in 0..classes {
            let n = present[y];
            if n == 0 {
                continue;
            }
            let mut row = self.rows.row_mut(y);
            for (r, s) in row.iter_mut().zip(sums.row(y)) {
                *r = (1.0 - mu) * (s / n as f64) + mu * *r;
            }
            normalize_row(row.as_slice_mut().expect("standard layout"));
            self.counts[y] += n;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn row(&self, y: usize) -> Result<&[f64]> {
        self.check_class(y)?;
        Ok(self
            .rows
            .row(y)
            .to_slice()
            .expect("rows are stored in standard layout"))
    }

    /// `w̄_y[j][k] = s̄_y[j] * s̄_y[k]`.
    pub fn class_weight_matrix(&self, y: usize) -> Result<Array2<f64>> {
        Ok(outer_weight_slice(self.row(y)?))
    }

    /// Stacks `s̄_{labels[i]}` into a `B x C` matrix (one-hot times table).
    pub fn class_scores(&self, labels: &[usize]) -> Result<Array2<f64>> {
        let c = self.num_classes();
        let mut out = Array2::zeros((labels.len(), c));
        for (i, &y) in labels.iter().enumerate() {
            self.check_class(y)?;
            out.row_mut(i).assign(&self.rows.row(y));
        }
        Ok(out)
    }

    /// `s̄_y[y] - max_{k != y} s̄_y[k]`, in `[-1, 1]`.
    pub fn margin(&self, y: usize) -> Result<f64> {
        let row = self.row(y)?;
        let rival = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != y)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(row[y] - rival)
    }

    pub fn margins(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|y| self.margin(y).expect("in range"))
            .collect()
    }

    pub fn mean_margin(&self) -> f64 {
        let m = self.margins();
        m.iter().sum::<f64>() / m.len() as f64
    }

    /// Plain-text table: `#` metadata lines, then one line per class with
    /// `C` whitespace-separated probabilities (shortest round-trip decimal).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# classes {}", self.num_classes());
        let _ = writeln!(out, "# temperature {}", self.temperature);
        let _ = writeln!(out, "# momentum {}", self.momentum);
        let counts: Vec<String> = self.counts.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "# counts {}", counts.join(" "));
        for row in self.rows.axis_iter(Axis(0)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    /// Parses [`ClassStatsTable::to_text`] output. Metadata lines are
    /// optional (defaults: τ = 1, μ = 0, zero counts); rows must be valid
    /// probability vectors within `1e-9`.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let format_err = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut temperature = 1.0;
        let mut momentum = 0.0;
        let mut counts: Option<Vec<u64>> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.split_whitespace();
                let key = parts.next().unwrap_or("");
                let rest: Vec<&str> = parts.collect();
                let parse_f = |s: Option<&&str>| -> Result<f64> {
                    s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                        format_err(format!("line {}: bad `{key}` value", lineno + 1))
                    })
                };
                match key {
                    "temperature" => temperature = parse_f(rest.first())?,
                    "momentum" => momentum = parse_f(rest.first())?,
                    "counts" => {
                        let parsed: std::result::Result<Vec<u64>, _> =
                            rest.iter().map(|v| v.parse()).collect();
                        counts = Some(parsed.map_err(|_| {
                            format_err(format!("line {}: bad counts", lineno + 1))
                        })?);
                    }
                    _ => {}
                }
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse).collect();
            rows.push(row.map_err(|e| format_err(format!("line {}: {e}", lineno + 1)))?);
        }
        let classes = rows.len();
        check_settings(classes, temperature, momentum).map_err(|e| format_err(e.to_string()))?;
        let mut table = Array2::zeros((classes, classes));
        for (y, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(format_err(format!(
                    "row {y} has {} columns, expected {classes}",
                    row.len()
                )));
            }
            crate::numerics::check_prob_row(row, 1e-9, "class statistics row")
                .map_err(|e| format_err(format!("row {y}: {e}")))?;
            table.row_mut(y).assign(&ndarray::ArrayView1::from(row.as_slice()));
        }
        let counts = counts.unwrap_or_else(|| vec![0; classes]);
        if counts.len() != classes {
            return Err(format_err(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(Self {
            rows: table,
            temperature,
            momentum,
            counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}
