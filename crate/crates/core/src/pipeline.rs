//! Data ingestion, preprocessing and the train/validation protocol.
//!
//! Counts are read either as dense CSV (header row of feature names, one row
//! per observation) or as coordinate triplets in MatrixMarket layout:
//!
//! ```text
//! %%MatrixMarket matrix coordinate integer general
//! % comments
//! N J NNZ
//! i j value        (1-based, repeated entries are summed)
//! ```
//!
//! Coordinates are CSV with one row per observation and an optional header.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::likelihoods::{self, poisson_deviance};
use crate::model::{predict_mean_with, FactorModel, PredictOptions, Query};
use crate::rng;
use crate::scalar::Scalar;

/// Observations with a smaller total count are dropped on load.
pub const DEFAULT_MIN_TOTAL: f64 = 100.0;

/// Floor applied to means recovered from the log transform.
pub const INVERSE_TRANSFORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountsFormat {
    Dense,
    Triplet,
}

impl CountsFormat {
    /// Triplet if the file opens with a MatrixMarket banner, dense otherwise.
    pub fn detect(path: &Path) -> Result<Self> {
        let mut head = [0u8; 14];
        let n = File::open(path)?.read(&mut head)?;
        Ok(if head[..n].starts_with(b"%%MatrixMarket") { Self::Triplet } else { Self::Dense })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub min_total: f64,
    /// Center each coordinate and scale it to unit max-absolute-value.
    pub rescale: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { min_total: DEFAULT_MIN_TOTAL, rescale: true }
    }
}

/// Log-normalized counts for the Gaussian models, with what is needed to map
/// predictions back to the count scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCounts<F> {
    pub values: Array2<F>,
    pub transform: LogTransform<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogTransform<F> {
    /// `median(total) / total_i`.
    pub row_scale: Array1<F>,
    pub column_means: Array1<F>,
}

impl<F: Scalar> LogTransform<F> {
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { row_scale: self.row_scale.select(Axis(0), rows), column_means: self.column_means.clone() }
    }

    /// Count-scale means from predictions on the normalized scale.
    pub fn invert(&self, pred: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if pred.nrows() != self.row_scale.len() || pred.ncols() != self.column_means.len() {
            return Err(NsfError::Shape("predictions do not match the transform".into()));
        }
        let floor = F::of(INVERSE_TRANSFORM_FLOOR);
        let mut out = pred.to_owned();
        for ((i, j), v) in out.indexed_iter_mut() {
            let raw = ((*v + self.column_means[j]).exp() - F::one()) / self.row_scale[i];
            *v = raw.max(floor);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CountDataset<F> {
    /// Counts (N × J).
    pub y: Array2<F>,
    /// Coordinates (N × D).
    pub x: Array2<F>,
    pub nu: Array1<F>,
    pub feature_names: Vec<String>,
    /// Row of each observation in the file it was loaded from.
    pub source_rows: Vec<usize>,
    normalized: OnceLock<NormalizedCounts<F>>,
}

impl<F: Scalar> CountDataset<F> {
    /// Size factors are computed from `y`.
    pub fn new(y: Array2<F>, x: Array2<F>, feature_names: Vec<String>) -> Result<Self> {
        let nu = likelihoods::size_factors(y.view())?;
        let n = y.nrows();
        Self::with_size_factors(y, x, nu, feature_names, (0..n).collect())
    }

    pub fn with_size_factors(
        y: Array2<F>,
        x: Array2<F>,
        nu: Array1<F>,
        feature_names: Vec<String>,
        source_rows: Vec<usize>,
    ) -> Result<Self> {
        let n = y.nrows();
        if x.nrows() != n || nu.len() != n || source_rows.len() != n {
            return Err(NsfError::Shape(format!("{n} count rows but {} coordinate rows", x.nrows())));
        }
        if x.ncols() < 1 {
            return Err(NsfError::Shape("need at least one coordinate dimension".into()));
        }
        if feature_names.len() != y.ncols() {
            return Err(NsfError::Shape("one name per feature is required".into()));
        }
        if let Some((idx, _)) = y.indexed_iter().find(|(_, &v)| v < F::zero() || v.fract() != F::zero() || !v.is_finite()) {
            return Err(NsfError::Argument(format!("entry {idx:?} is not a count")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NsfError::Argument("coordinates must be finite".into()));
        }
        if let Some(i) = nu.iter().position(|&v| !(v > F::zero())) {
            return Err(NsfError::DegenerateObservation { index: i, reason: "size factor is not positive".into() });
        }
        Ok(Self { y, x, nu, feature_names, source_rows, normalized: OnceLock::new() })
    }

    pub fn num_observations(&self) -> usize {
        self.y.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.y.ncols()
    }

    /// Log-normalized view, computed on first use.
    pub fn normalized(&self) -> &NormalizedCounts<F> {
        self.normalized.get_or_init(|| normalize_log(self.y.view()).expect("row totals are positive"))
    }

    /// Keeps rows `rows`; size factors are carried over, not recomputed.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::with_size_factors(
            self.y.select(Axis(0), rows),
            self.x.select(Axis(0), rows),
            self.nu.select(Axis(0), rows),
            self.feature_names.clone(),
            rows.iter().map(|&r| self.source_rows[r]).collect(),
        )
    }

    /// Keeps features `cols` in the given order; size factors are carried
    /// over. Observations left with no counts are dropped.
    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        let reduced = Self::with_size_factors(
            self.y.select(Axis(1), cols),
            self.x.clone(),
            self.nu.clone(),
            cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
            self.source_rows.clone(),
        )?;
        let keep: Vec<usize> = (0..reduced.num_observations()).filter(|&i| reduced.y.row(i).sum() > F::zero()).collect();
        if keep.len() == reduced.num_observations() {
            return Ok(reduced);
        }
        log::warn!("{} observations have no counts in the selected features", reduced.num_observations() - keep.len());
        reduced.select_rows(&keep)
    }

    /// Keeps features by name.
    pub fn select_features_named(&self, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| NsfError::Shape(format!("feature '{n}' is missing from the data")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_features(&cols)
    }
}

fn parse_count(s: &str, at: impl Fn() -> String) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| NsfError::Parse(format!("{}: '{s}' is not a number", at())))?;
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
        return Err(NsfError::Parse(format!("{}: '{s}' is not a nonnegative integer count", at())));
    }
    Ok(v)
}

/// Dense CSV counts with a header row of feature names.
pub fn read_dense_counts<R: Read>(reader: R) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr.headers().map_err(|e| NsfError::Parse(e.to_string()))?.iter().map(String::from).collect();
    if names.is_empty() {
        return Err(NsfError::Parse("count file has an empty header".into()));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NsfError::Parse(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(NsfError::Parse(format!("line {line}: expected {} fields, found {}", names.len(), rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            values.push(parse_count(field, || format!("line {line}, column {}", c + 1))?);
        }
        rows += 1;
    }
    let y = Array2::from_shape_vec((rows, names.len()), values).map_err(|e| NsfError::Shape(e.to_string()))?;
    Ok((y, names))
}

/// Coordinate triplets; feature names are `feature_1`, `feature_2`, ...
pub fn read_triplet_counts<R: Read>(reader: R) -> Result<(Array2<f64>, Vec<String>)> {
    let mut y: Option<Array2<f64>> = None;
    let mut entry = 0usize;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match &mut y {
            None => {
                if fields.len() < 2 {
                    return Err(NsfError::Parse(format!("line {lineno}: expected 'rows cols [nnz]'")));
                }
                let dim = |s: &str| {
                    s.parse::<usize>().map_err(|_| NsfError::Parse(format!("line {lineno}: bad dimension '{s}'")))
                };
                y = Some(Array2::zeros((dim(fields[0])?, dim(fields[1])?)));
            }
            Some(y) => {
                entry += 1;
                if fields.len() != 3 {
                    return Err(NsfError::Parse(format!("entry {entry} (line {lineno}): expected 'row col value'")));
                }
                let (n, j) = y.dim();
                let index = |s: &str, max: usize, what: &str| -> Result<usize> {
                    match s.parse::<usize>() {
                        Ok(v) if (1..=max).contains(&v) => Ok(v - 1),
                        _ => Err(NsfError::Parse(format!(
                            "entry {entry} (line {lineno}): {what} index '{s}' outside 1..={max}"
                        ))),
                    }
                };
                let i = index(fields[0], n, "row")?;
                let c = index(fields[1], j, "column")?;
                y[[i, c]] += parse_count(fields[2], || format!("entry {entry} (line {lineno})"))?;
            }
        }
    }
    let y = y.ok_or_else(|| NsfError::Parse("triplet file has no size line".into()))?;
    let names = (1..=y.ncols()).map(|j| format!("feature_{j}")).collect();
    Ok((y, names))
}

/// Coordinates CSV; a first row that does not parse as numbers is a header.
pub fn read_coordinates<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| NsfError::Parse(e.to_string()))?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        let parsed: Vec<Option<f64>> = rec.iter().map(|s| s.parse::<f64>().ok()).collect();
        if k == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(NsfError::Parse(format!("coordinates line {line}: expected {w} fields, found {}", rec.len())));
        }
        for (c, v) in parsed.into_iter().enumerate() {
            match v {
                Some(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(NsfError::Parse(format!(
                        "coordinates line {line}, column {}: '{}' is not a finite number",
                        c + 1,
                        &rec[c]
                    )))
                }
            }
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), values).map_err(|e| NsfError::Shape(e.to_string()))
}

/// Centers each column and scales it to unit max-absolute-value. Constant
/// columns become zero.
pub fn rescale_coordinates<F: Scalar>(x: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = x.to_owned();
    for mut col in out.columns_mut() {
        let mean = col.sum() / F::of_usize(col.len().max(1));
        col.mapv_inplace(|v| v - mean);
        let m = col.iter().fold(F::zero(), |a, &v| a.max(v.abs()));
        if m > F::zero() {
            col.mapv_inplace(|v| v / m);
        }
    }
    out
}

/// Builds a dataset from parsed arrays, dropping low-count observations.
pub fn prepare_dataset<F: Scalar>(
    y: Array2<f64>,
    x: Array2<f64>,
    feature_names: Vec<String>,
    opts: LoadOptions,
) -> Result<CountDataset<F>> {
    if y.nrows() != x.nrows() {
        return Err(NsfError::Shape(format!("{} count rows but {} coordinate rows", y.nrows(), x.nrows())));
    }
    let keep: Vec<usize> = (0..y.nrows()).filter(|&i| y.row(i).sum() >= opts.min_total && y.row(i).sum() > 0.0).collect();
    if keep.len() < y.nrows() {
        log::info!("dropped {} observations with total count below {}", y.nrows() - keep.len(), opts.min_total);
    }
    if keep.is_empty() {
        return Err(NsfError::DegenerateInput("no observation passes the total-count filter".into()));
    }
    let y = y.select(Axis(0), &keep).mapv(F::of);
    let mut x = x.select(Axis(0), &keep).mapv(F::of);
    if opts.rescale {
        x = rescale_coordinates(x.view());
    }
    let nu = likelihoods::size_factors(y.view())?;
    CountDataset::with_size_factors(y, x, nu, feature_names, keep)
}

pub fn load_dataset<F: Scalar>(
    counts: &Path,
    coords: &Path,
    format: Option<CountsFormat>,
    opts: LoadOptions,
) -> Result<CountDataset<F>> {
    let format = match format {
        Some(f) => f,
        None => CountsFormat::detect(counts)?,
    };
    let file = File::open(counts)?;
    let (y, names) = match format {
        CountsFormat::Dense => read_dense_counts(file)?,
        CountsFormat::Triplet => read_triplet_counts(file)?,
    };
    let x = read_coordinates(File::open(coords)?)?;
    prepare_dataset(y, x, names, opts)
}

/// Poisson deviance of each feature against `μ̂_ij = ν_i Σ_i y_ij / Σ_i ν_i`.
pub fn feature_deviances<F: Scalar>(data: &CountDataset<F>) -> Array1<F> {
    let nu_total = data.nu.sum();
    let two = F::of(2.0);
    Array1::from_iter(data.y.columns().into_iter().map(|col| {
        let rate = col.sum() / nu_total;
        if !(rate > F::zero()) {
            return F::zero();
        }
        let d = col.iter().zip(data.nu.iter()).fold(F::zero(), |acc, (&y, &nu)| {
            let mu = nu * rate;
            let t = if y > F::zero() { y * (y / mu).ln() } else { F::zero() };
            acc + t - (y - mu)
        });
        (two * d).max(F::zero())
    }))
}

/// Indices of the `n_top` most deviant features, in their original order.
pub fn select_feature_indices<F: Scalar>(data: &CountDataset<F>, n_top: usize) -> Result<Vec<usize>> {
    if n_top == 0 {
        return Err(NsfError::Argument("n_top must be at least 1".into()));
    }
    let dev = feature_deviances(data);
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.sort_by(|&a, &b| dev[b].partial_cmp(&dev[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(n_top);
    order.sort_unstable();
    Ok(order)
}

pub fn select_features<F: Scalar>(data: &CountDataset<F>, n_top: usize) -> Result<CountDataset<F>> {
    let idx = select_feature_indices(data, n_top)?;
    data.select_features(&idx)
}

/// Scales rows to the median total, applies `log1p` and centers columns.
pub fn normalize_log<F: Scalar>(y: ArrayView2<'_, F>) -> Result<NormalizedCounts<F>> {
    let totals: Vec<F> = y.rows().into_iter().map(|r| r.sum()).collect();
    if let Some(i) = totals.iter().position(|&t| !(t > F::zero())) {
        return Err(NsfError::DegenerateObservation { index: i, reason: "total count is zero".into() });
    }
    if totals.is_empty() {
        return Err(NsfError::Argument("no observations".into()));
    }
    let med = likelihoods::median(&totals);
    let row_scale = Array1::from_iter(totals.iter().map(|&t| med / t));
    let mut values = y.to_owned();
    for (mut row, &s) in values.rows_mut().into_iter().zip(row_scale.iter()) {
        row.mapv_inplace(|v| (v * s).ln_1p());
    }
    let column_means = values.mean_axis(Axis(0)).expect("at least one row");
    values -= &column_means;
    Ok(NormalizedCounts { values, transform: LogTransform { row_scale, column_means } })
}

/// Uniform random split of `0..n` into sorted (train, validation) index sets.
pub fn split_indices(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(NsfError::Argument(format!("training fraction must lie in (0, 1), got {frac}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_train = ((frac * n as f64).round() as usize).min(n);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn train_val_split<F: Scalar>(data: &CountDataset<F>, frac: f64, seed: u64) -> Result<(CountDataset<F>, CountDataset<F>)> {
    let (train, val) = split_indices(data.num_observations(), frac, seed)?;
    Ok((data.select_rows(&train)?, data.select_rows(&val)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub deviance: f64,
    pub deviance_per_observation: f64,
    pub loadings_sparsity: f64,
    /// Nonspatial factors were extended to these observations by their prior
    /// means; the deviance then mostly reflects the size factors.
    pub prior_only: bool,
}

/// Poisson deviance of `model`'s predictions for `counts`.
///
/// `query` selects the training rows or new coordinates; `transform` maps
/// Gaussian-model predictions back to counts and must cover the same rows.
pub fn evaluate<'a, F: Scalar>(
    model: &'a FactorModel<F>,
    counts: ArrayView2<'_, F>,
    query: Query<'a, F>,
    transform: Option<&LogTransform<F>>,
) -> Result<Evaluation> {
    let out_of_sample = matches!(query, Query::Coordinates { .. });
    let prior_only = out_of_sample && model.spec.num_spatial < model.spec.num_components;
    if prior_only {
        log::warn!("{} extends nonspatial factors to new observations by their prior means", model.kind());
    }
    let opts = PredictOptions { allow_prior_only: true, ..PredictOptions::default() };
    let mut mhat = predict_mean_with(model, query, opts)?;
    if !model.likelihood.family.is_count() {
        let t = transform.ok_or_else(|| {
            NsfError::Argument("Gaussian models need the log transform to be evaluated on counts".into())
        })?;
        mhat = t.invert(mhat.view())?;
    }
    let dev = poisson_deviance(counts, mhat.view())?.as_f64();
    let n = counts.nrows().max(1);
    Ok(Evaluation {
        deviance: dev,
        deviance_per_observation: dev / n as f64,
        loadings_sparsity: model.loadings_sparsity().as_f64(),
        prior_only,
    })
}

/// Deterministic part of a [`RunReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub elbo_trace: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    pub train: Evaluation,
    pub validation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub wall_time_secs: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ds(y: Array2<f64>) -> CountDataset<f64> {
        let n = y.nrows();
        let names = (0..y.ncols()).map(|j| format!("g{j}")).collect();
        CountDataset::new(y, Array2::from_shape_fn((n, 1), |(i, _)| i as f64), names).unwrap()
    }

    #[test]
    fn dense_and_coords() {
        let counts = "a,b\n60,50\n100,20\n3,200\n";
        let (y, names) = read_dense_counts(counts.as_bytes()).unwrap();
        assert_eq!(names, vec!["a", "b"]);
        let x = read_coordinates("x,y\n0,0\n1,0\n0,2\n".as_bytes()).unwrap();
        let d: CountDataset<f64> = prepare_dataset(y, x, names, LoadOptions::default()).unwrap();
        assert_eq!((d.num_observations(), d.num_features(), d.x.ncols()), (3, 2, 2));
        for col in d.x.columns() {
            assert!(col.sum().abs() < 1e-12);
            assert!((col.iter().fold(0.0_f64, |a, v| a.max(v.abs())) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_total_rows_are_dropped() {
        let (y, names) = read_dense_counts("a,b\n60,50\n30,20\n100,20\n".as_bytes()).unwrap();
        let x = read_coordinates("0\n1\n2\n".as_bytes()).unwrap();
        let d: CountDataset<f64> = prepare_dataset(y, x, names, LoadOptions::default()).unwrap();
        assert_eq!(d.num_observations(), 2);
        assert_eq!(d.source_rows, vec![0, 2]);
    }

    #[test]
    fn parse_errors_name_the_entry() {
        let bad = "%%MatrixMarket matrix coordinate integer general\n3 2 2\n1 1 5\n4 2 7\n";
        match read_triplet_counts(bad.as_bytes()) {
            Err(NsfError::Parse(msg)) => assert!(msg.contains("entry 2") && msg.contains("row index '4'"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let neg = "a,b\n1,-2\n";
        match read_dense_counts(neg.as_bytes()) {
            Err(NsfError::Parse(msg)) => assert!(msg.contains("line 2, column 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(read_coordinates("0,1\n2\n".as_bytes()).is_err());
        let (y, names) = read_dense_counts("a\n200\n".as_bytes()).unwrap();
        let x = Array2::zeros((2, 1));
        assert!(matches!(prepare_dataset::<f64>(y, x, names, LoadOptions::default()), Err(NsfError::Shape(_))));
    }

    #[test]
    fn triplets_match_dense() {
        let t = "%%MatrixMarket matrix coordinate integer general\n% x\n2 3 3\n1 1 4\n2 3 9\n1 1 1\n";
        let (y, names) = read_triplet_counts(t.as_bytes()).unwrap();
        assert_eq!(y, array![[5.0, 0.0, 0.0], [0.0, 0.0, 9.0]]);
        assert_eq!(names[2], "feature_3");
    }

    #[test]
    fn feature_selection_examples() {
        // Columns 1 and 2 have equal totals; column 2 is concentrated.
        let y = array![[2.0, 3.0, 12.0], [4.0, 3.0, 0.0], [6.0, 3.0, 0.0], [4.0, 3.0, 0.0]];
        let d = ds(y.clone());
        let dev = feature_deviances(&d);
        // Oracle: deviance of column 2 computed directly.
        let nu = likelihoods::size_factors(y.view()).unwrap();
        let rate = 12.0 / nu.sum();
        let direct: f64 = 2.0 * (0..4).map(|i| {
            let mu = nu[i] * rate;
            let yy = y[[i, 2]];
            (if yy > 0.0 { yy * (yy / mu).ln() } else { 0.0 }) - (yy - mu)
        }).sum::<f64>();
        assert!((dev[2] - direct).abs() < 1e-12);
        assert!(dev[2] > dev[1]);
        assert_eq!(select_feature_indices(&d, 1).unwrap(), vec![2]);
        assert_eq!(select_feature_indices(&d, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_feature_indices(&d, 0).is_err());
    }

    #[test]
    fn proportional_feature_has_zero_deviance() {
        let y = array![[1.0, 5.0], [2.0, 1.0], [4.0, 9.0]];
        let mut d = ds(y);
        d.nu = array![1.0, 2.0, 4.0];
        assert!(feature_deviances(&d)[0].abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        let y = array![[1.0, 0.0, 3.0], [10.0, 2.0, 0.0], [5.0, 5.0, 5.0]];
        let n = normalize_log::<f64>(y.view()).unwrap();
        for m in n.values.mean_axis(Axis(0)).unwrap().iter() {
            assert!(m.abs() < 1e-12);
        }
        // Pre-log row totals equal the median total (12).
        for (i, r) in y.rows().into_iter().enumerate() {
            assert!((r.sum() * n.transform.row_scale[i] - 12.0_f64).abs() < 1e-12);
        }
        let back = n.transform.invert(n.values.view()).unwrap();
        for (a, b) in back.iter().zip(y.iter()) {
            assert!((a - b.max(INVERSE_TRANSFORM_FLOOR)).abs() < 1e-9);
        }
    }

    #[test]
    fn split_examples() {
        let (tr, va) = split_indices(100, 0.95, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (95, 5));
        let mut all: Vec<usize> = tr.iter().chain(va.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.95, 7).unwrap(), (tr, va));
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    fn counts() -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0u32..30, 6 * 4).prop_map(|v| {
            let mut a = Array2::from_shape_vec((6, 4), v.into_iter().map(f64::from).collect()).unwrap();
            a.column_mut(0).mapv_inplace(|x| x + 1.0);
            a
        })
    }

    proptest! {
        #[test]
        fn selection_is_permutation_invariant(y in counts(), k in 1usize..=4, seed in 0u64..1000) {
            let d = ds(y.clone());
            let base: Vec<String> = select_feature_indices(&d, k).unwrap().iter().map(|&j| d.feature_names[j].clone()).collect();
            let mut rows: Vec<usize> = (0..6).collect();
            let mut cols: Vec<usize> = (0..4).collect();
            let mut r = rng::seeded(seed);
            rows.shuffle(&mut r);
            cols.shuffle(&mut r);
            let p = d.select_rows(&rows).unwrap().select_features(&cols).unwrap();
            let dev = feature_deviances(&d);
            let pdev = feature_deviances(&p);
            for (pj, &j) in cols.iter().enumerate() {
                prop_assert!((pdev[pj] - dev[j]).abs() <= 1e-9 * dev[j].max(1.0));
            }
            // Exact ties can legitimately reorder; compare only when the cut is clean.
            let mut sorted = dev.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if k == 4 || (sorted[k - 1] - sorted[k]).abs() > 1e-9 {
                let mut got: Vec<String> = select_feature_indices(&p, k).unwrap().iter().map(|&j| p.feature_names[j].clone()).collect();
                let mut want = base.clone();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want);
            }
        }
    }
}
