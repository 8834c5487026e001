//! Datasets: synthetic generators, CSV ingestion with missing values,
//! standardization, and train/test splitting.
//!
//! Missingness is per entry: a row may be observed in some outputs and not
//! others. Unobserved entries hold NaN sentinels and must never be read;
//! debug builds assert on any such access.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Mat;

/// Per-output standardization record: `y_original = y * sd + mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

/// Names and transforms attached to a dataset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    /// Per output, the transform mapping stored values back to original
    /// units, when the dataset has been standardized.
    pub standardization: Option<Vec<Standardization>>,
}

/// Inputs, multi-output observations, and an observation mask.
#[derive(Clone, Debug)]
pub struct Dataset {
    x: Mat,
    y: Mat,
    mask: Vec<bool>,
    meta: DatasetMeta,
}

impl Dataset {
    /// Build a dataset; unobserved entries of `y` are overwritten with NaN
    /// sentinels, observed entries must be finite.
    pub fn new(x: Mat, y: Mat, mask: Vec<bool>, mut meta: DatasetMeta) -> Result<Self> {
        let n = x.rows();
        let d = y.cols();
        if y.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {n} rows but outputs have {}",
                y.rows()
            )));
        }
        if mask.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                n * d
            )));
        }
        if meta.output_names.is_empty() {
            meta.output_names = (0..d).map(|j| format!("y{j}")).collect();
        }
        if meta.input_names.is_empty() {
            meta.input_names = (0..x.cols()).map(|p| format!("x{p}")).collect();
        }
        if meta.output_names.len() != d || meta.input_names.len() != x.cols() {
            return Err(Error::DimensionMismatch(
                "metadata names do not match dataset shape".into(),
            ));
        }
        let mut y = y;
        for i in 0..n {
            for j in 0..d {
                if mask[i * d + j] {
                    if !y.get(i, j).is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "observed entry ({i}, {j}) is not finite"
                        )));
                    }
                } else {
                    y.set(i, j, f64::NAN);
                }
            }
        }
        Ok(Self { x, y, mask, meta })
    }

    /// Fully observed dataset.
    pub fn from_dense(x: Mat, y: Mat) -> Result<Self> {
        let mask = vec![true; x.rows() * y.cols()];
        Self::new(x, y, mask, DatasetMeta::default())
    }

    pub fn num_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.y.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn inputs(&self) -> &Mat {
        &self.x
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    #[inline]
    pub fn is_observed(&self, row: usize, output: usize) -> bool {
        self.mask[row * self.y.cols() + output]
    }

    /// Value of an observed entry. Reading a masked entry is a caller bug;
    /// debug builds panic, release builds return the NaN sentinel.
    #[inline]
    pub fn y_observed(&self, row: usize, output: usize) -> f64 {
        debug_assert!(
            self.is_observed(row, output),
            "read of unobserved entry ({row}, {output})"
        );
        self.y.get(row, output)
    }

    pub fn observed(&self, row: usize, output: usize) -> Option<f64> {
        self.is_observed(row, output)
            .then(|| self.y.get(row, output))
    }

    /// Total number of observed entries.
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Number of observed entries within the given rows.
    pub fn observed_count_in(&self, rows: &[usize]) -> usize {
        rows.iter()
            .map(|&r| (0..self.num_outputs()).filter(|&d| self.is_observed(r, d)).count())
            .sum()
    }

    /// Rows with at least one observed entry.
    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.num_rows())
            .filter(|&r| (0..self.num_outputs()).any(|d| self.is_observed(r, d)))
            .collect()
    }

    /// All observed `(row, output, value)` triples in row-major order.
    pub fn observed_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.observed_count());
        for r in 0..self.num_rows() {
            for d in 0..self.num_outputs() {
                if self.is_observed(r, d) {
                    out.push((r, d, self.y.get(r, d)));
                }
            }
        }
        out
    }

    /// Per-dimension `(min, max)` input range over rows with at least one
    /// observed entry.
    pub fn input_range(&self) -> Result<Vec<(f64, f64)>> {
        let rows = self.observed_rows();
        if rows.is_empty() {
            return Err(Error::NoObservedEntries);
        }
        Ok((0..self.input_dim())
            .map(|p| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &r in &rows {
                    let v = self.x.get(r, p);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            })
            .collect())
    }

    /// Write as CSV: input columns then output columns; unobserved entries
    /// become empty cells.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = self
            .meta
            .input_names
            .iter()
            .chain(self.meta.output_names.iter())
            .map(String::as_str)
            .collect();
        w.write_record(&header)?;
        for r in 0..self.num_rows() {
            let mut record: Vec<String> = Vec::with_capacity(self.input_dim() + self.num_outputs());
            for p in 0..self.input_dim() {
                record.push(format!("{}", self.x.get(r, p)));
            }
            for d in 0..self.num_outputs() {
                record.push(match self.observed(r, d) {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Synthetic dataset family: low frequency, high frequency, or varying
/// frequency (the frequency rises over the time interval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Lf,
    Hf,
    Vf,
}

impl SyntheticKind {
    /// Frequency `w` and time-warp exponent `s` of the generator.
    pub fn params(self) -> (f64, f64) {
        match self {
            SyntheticKind::Lf => (2.0, 1.0),
            SyntheticKind::Hf => (5.0, 1.0),
            SyntheticKind::Vf => (5.0, 2.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Lf => "lf",
            SyntheticKind::Hf => "hf",
            SyntheticKind::Vf => "vf",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lf" => Ok(SyntheticKind::Lf),
            "hf" => Ok(SyntheticKind::Hf),
            "vf" => Ok(SyntheticKind::Vf),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset kind `{other}` (expected lf, hf or vf)"
            ))),
        }
    }
}

/// Noise-free generator outputs at time `t`.
pub fn synthetic_truth(kind: SyntheticKind, t: f64) -> (f64, f64) {
    let (w, s) = kind.params();
    let c = (2.0 * std::f64::consts::PI * w * t.powf(s)).cos();
    let y1 = 5.0 * c;
    let y2 = 5.0 * (1.0 - t) * c - 5.0 * t * c;
    (y1, y2)
}

/// Generate the two-output synthetic system.
///
/// Training rows: `n_per_dim` times uniform on `(0, 0.8)` observed only in
/// output 1, then `n_per_dim` times uniform on `(0.2, 1)` observed only in
/// output 2. Test rows: `n_per_dim` times uniform on `(0, 1)` per output,
/// again observed one output per row. Noise is iid Gaussian with standard
/// deviation `noise_sd`.
pub fn generate_synthetic(
    kind: SyntheticKind,
    n_per_dim: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_per_dim == 0 {
        return Err(Error::InvalidArgument("n_per_dim must be >= 1".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::InvalidArgument(
            "noise standard deviation must be nonnegative and finite".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_dim;
    let t_train_1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.8)).collect();
    let t_train_2: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let t_test_1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let t_test_2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();

    let build = |times_1: &[f64], times_2: &[f64], rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let rows = times_1.len() + times_2.len();
        let x = Mat::from_fn(rows, 1, |i, _| {
            if i < times_1.len() {
                times_1[i]
            } else {
                times_2[i - times_1.len()]
            }
        });
        let mut y = Mat::from_fn(rows, 2, |_, _| 0.0);
        let mut mask = vec![false; rows * 2];
        for (i, &t) in times_1.iter().enumerate() {
            let (y1, _) = synthetic_truth(kind, t);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal);
            y.set(i, 0, y1 + noise_sd * eps);
            mask[i * 2] = true;
        }
        for (k, &t) in times_2.iter().enumerate() {
            let i = times_1.len() + k;
            let (_, y2) = synthetic_truth(kind, t);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal);
            y.set(i, 1, y2 + noise_sd * eps);
            mask[i * 2 + 1] = true;
        }
        Dataset::new(x, y, mask, DatasetMeta::default())
    };

    let train = build(&t_train_1, &t_train_2, &mut rng)?;
    let test = build(&t_test_1, &t_test_2, &mut rng)?;
    Ok((train, test))
}

/// Load a dataset from CSV. Empty cells and `NaN` tokens in output columns
/// become unobserved entries; input cells must parse as numbers.
pub fn load_csv(path: &Path, input_cols: &[String], output_cols: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &String| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 0,
                column: name.clone(),
                message: "column not found in header".into(),
            })
    };
    let in_idx: Vec<usize> = input_cols.iter().map(find).collect::<Result<_>>()?;
    let out_idx: Vec<usize> = output_cols.iter().map(find).collect::<Result<_>>()?;

    let mut x_data = Vec::new();
    let mut y_data = Vec::new();
    let mut mask = Vec::new();
    let mut rows = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2; // 1-based, after the header
        for (&c, name) in in_idx.iter().zip(input_cols) {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("cannot parse input value `{cell}`"),
            })?;
            x_data.push(v);
        }
        for (&c, name) in out_idx.iter().zip(output_cols) {
            let cell = record.get(c).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                y_data.push(f64::NAN);
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("cannot parse output value `{cell}`"),
                })?;
                y_data.push(v);
                mask.push(true);
            }
        }
        rows += 1;
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::NoObservedEntries);
    }
    let x = Mat::new(rows, input_cols.len(), x_data)?;
    // NaN sentinels for unobserved entries are expected here; Dataset::new
    // checks finiteness of the observed entries only.
    let d_out = output_cols.len();
    let y = Mat::from_fn(rows, d_out, |i, j| y_data[i * d_out + j]);
    Dataset::new(
        x,
        y,
        mask,
        DatasetMeta {
            input_names: input_cols.to_vec(),
            output_names: output_cols.to_vec(),
            standardization: None,
        },
    )
}

/// Standardize each output to zero mean and unit standard deviation over its
/// observed entries; the composed inverse transform is recorded in the
/// metadata.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let d = ds.num_outputs();
    let n = ds.num_rows();
    let mut stats = Vec::with_capacity(d);
    for j in 0..d {
        let vals: Vec<f64> = (0..n).filter_map(|i| ds.observed(i, j)).collect();
        if vals.len() < 2 {
            return Err(Error::DegenerateOutput(
                j,
                format!("need >= 2 observed entries to standardize, got {}", vals.len()),
            ));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let sd = var.sqrt();
        if sd == 0.0 {
            return Err(Error::DegenerateOutput(
                j,
                "zero standard deviation".into(),
            ));
        }
        stats.push(Standardization { mean, sd });
    }
    let y = Mat::from_fn(n, d, |i, j| {
        if ds.is_observed(i, j) {
            (ds.y_observed(i, j) - stats[j].mean) / stats[j].sd
        } else {
            f64::NAN
        }
    });
    let prior = ds.meta.standardization.clone();
    let composed: Vec<Standardization> = match prior {
        // y_orig = (y_new * sd_new + mean_new) * sd_old + mean_old
        Some(old) => old
            .iter()
            .zip(&stats)
            .map(|(o, s)| Standardization {
                mean: o.mean + o.sd * s.mean,
                sd: o.sd * s.sd,
            })
            .collect(),
        None => stats.clone(),
    };
    let mut meta = ds.meta.clone();
    meta.standardization = Some(composed);
    Dataset::new(ds.x.clone(), y, ds.mask.clone(), meta)
}

/// Map a standardized value for `output` back to original units.
pub fn destandardize_value(meta: &DatasetMeta, output: usize, value: f64) -> f64 {
    match &meta.standardization {
        Some(stats) => value * stats[output].sd + stats[output].mean,
        None => value,
    }
}

/// Move a seeded random fraction of the observed entries (optionally
/// restricted to one output) from the training mask into a test dataset that
/// shares the same rows.
pub fn split(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
    target_output: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(
            "test fraction must lie in [0, 1]".into(),
        ));
    }
    let candidates: Vec<(usize, usize)> = ds
        .observed_entries()
        .into_iter()
        .filter(|&(_, d, _)| target_output.is_none_or(|t| t == d))
        .map(|(r, d, _)| (r, d))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoObservedEntries);
    }
    let n_test = (test_fraction * candidates.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let test_entries: Vec<(usize, usize)> =
        order[..n_test].iter().map(|&k| candidates[k]).collect();

    let d = ds.num_outputs();
    let mut train_mask = ds.mask.clone();
    let mut test_mask = vec![false; ds.mask.len()];
    for &(r, c) in &test_entries {
        train_mask[r * d + c] = false;
        test_mask[r * d + c] = true;
    }
    let train = Dataset::new(ds.x.clone(), ds.y.clone(), train_mask, ds.meta.clone())?;
    let test = Dataset::new(ds.x.clone(), ds.y.clone(), test_mask, ds.meta.clone())?;
    Ok((train, test))
}
