//! Dataset ingestion and preparation: delimited-file loading, lagged input
//! construction, contiguous splits, regular-pattern label masking,
//! standardization on training statistics, and consecutive-row pairing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            debug_assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }
}

/// Known dataset schemas. The numbers of process columns are fixed for the
/// two benchmarks; `Generic` accepts any rectangular numeric file.
#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    /// Seven process variables followed by the quality variable.
    Debutanizer,
    /// Five process variables followed by quality columns; `quality_col`
    /// picks which quality column to regress (0-based among the quality
    /// columns).
    Sru { quality_col: usize },
    /// Any numeric table; `quality_col` is the absolute 0-based column index
    /// of the quality variable (defaults to the last column when `None`).
    Generic { quality_col: Option<usize> },
}

/// An ingested time series: process variables plus one designated quality
/// column, sampling order preserved.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub table: Matrix,
    /// Absolute column index of the quality variable.
    pub quality_col: usize,
    /// Column indices of the process variables (everything except quality
    /// columns).
    pub process_cols: Vec<usize>,
}

impl RawSeries {
    pub fn n_rows(&self) -> usize {
        self.table.rows
    }
}

/// Load a comma- or whitespace-separated numeric file.
pub fn load_csv(path: &Path, schema: &Schema, has_header: bool) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_series(&text, schema, has_header, &path.display().to_string())
}

fn parse_series(text: &str, schema: &Schema, has_header: bool, path: &str) -> Result<RawSeries> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut expected_cols: Option<usize> = None;

    for (line_idx, line) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if has_header && rows.is_empty() && names.is_empty() {
            names = split_cells(trimmed).into_iter().map(String::from).collect();
            continue;
        }
        let cells = split_cells(trimmed);
        if let Some(n) = expected_cols {
            if cells.len() != n {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no,
                    column: cells.len(),
                    detail: format!("expected {} columns, found {}", n, cells.len()),
                });
            }
        } else {
            expected_cols = Some(cells.len());
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col_idx, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: line_no,
                column: col_idx + 1,
                detail: format!("not a number: `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no,
                    column: col_idx + 1,
                    detail: format!("non-finite cell `{cell}`"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::Dataset(format!("{path}: no data rows")));
    }
    let n_cols = expected_cols.unwrap();

    let (quality_col, process_cols) = match schema {
        Schema::Debutanizer => {
            if n_cols != 8 {
                return Err(Error::Dataset(format!(
                    "{path}: debutanizer schema expects 8 columns (7 process + quality), found {n_cols}"
                )));
            }
            (7, (0..7).collect::<Vec<_>>())
        }
        Schema::Sru { quality_col } => {
            if n_cols < 6 {
                return Err(Error::Dataset(format!(
                    "{path}: sru schema expects 5 process columns plus at least one quality column, found {n_cols}"
                )));
            }
            let q = 5 + *quality_col;
            if q >= n_cols {
                return Err(Error::Dataset(format!(
                    "{path}: sru quality column {} out of range ({} quality columns present)",
                    quality_col,
                    n_cols - 5
                )));
            }
            (q, (0..5).collect::<Vec<_>>())
        }
        Schema::Generic { quality_col } => {
            if n_cols < 2 {
                return Err(Error::Dataset(format!(
                    "{path}: need at least one process column and one quality column, found {n_cols}"
                )));
            }
            let q = quality_col.unwrap_or(n_cols - 1);
            if q >= n_cols {
                return Err(Error::Dataset(format!(
                    "{path}: quality column {q} out of range ({n_cols} columns)"
                )));
            }
            (q, (0..n_cols).filter(|&c| c != q).collect::<Vec<_>>())
        }
    };

    if names.is_empty() {
        names = (0..n_cols)
            .map(|c| {
                if c == quality_col {
                    "y".to_string()
                } else {
                    format!("x{}", c + 1)
                }
            })
            .collect();
    } else if names.len() != n_cols {
        return Err(Error::Dataset(format!(
            "{path}: header has {} names for {} columns",
            names.len(),
            n_cols
        )));
    }

    Ok(RawSeries {
        names,
        table: Matrix::from_rows(rows),
        quality_col,
        process_cols,
    })
}

fn split_cells(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Which lags each used process variable contributes, in a fixed column
/// order. Variables are keyed by their position in `RawSeries::process_cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagSpec {
    /// (process-variable index, lags) in output column order.
    pub per_var: Vec<(usize, Vec<usize>)>,
}

impl LagSpec {
    /// The same lag set applied to the given process variables.
    pub fn uniform(vars: &[usize], lags: &[usize]) -> Self {
        LagSpec {
            per_var: vars.iter().map(|&v| (v, lags.to_vec())).collect(),
        }
    }

    /// Apply per-variable overrides on top of a uniform base.
    pub fn with_overrides(vars: &[usize], lags: &[usize], overrides: &BTreeMap<usize, Vec<usize>>) -> Self {
        LagSpec {
            per_var: vars
                .iter()
                .map(|&v| (v, overrides.get(&v).cloned().unwrap_or_else(|| lags.to_vec())))
                .collect(),
        }
    }

    pub fn max_lag(&self) -> usize {
        self.per_var
            .iter()
            .flat_map(|(_, lags)| lags.iter().copied())
            .max()
            .unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.per_var.iter().map(|(_, lags)| lags.len()).sum()
    }
}

/// Lagged inputs with labels aligned to time `t`. Row `t` of `x` concatenates
/// the configured lags of each variable; the first `max_lag` source rows are
/// dropped.
#[derive(Debug, Clone)]
pub struct LaggedData {
    pub x: Matrix,
    pub y: Vec<f64>,
}

pub fn build_lagged(series: &RawSeries, spec: &LagSpec) -> Result<LaggedData> {
    let max_lag = spec.max_lag();
    let n = series.n_rows();
    if max_lag >= n {
        return Err(Error::Dataset(format!(
            "max lag {} needs more than {} rows",
            max_lag, n
        )));
    }
    for (var, _) in &spec.per_var {
        if *var >= series.process_cols.len() {
            return Err(Error::Dataset(format!(
                "lag spec references process variable {} but only {} exist",
                var + 1,
                series.process_cols.len()
            )));
        }
    }
    let out_rows = n - max_lag;
    let width = spec.width();
    let mut x = Matrix::zeros(out_rows, width);
    let mut y = Vec::with_capacity(out_rows);
    for t in max_lag..n {
        let out_r = t - max_lag;
        let mut c = 0;
        for (var, lags) in &spec.per_var {
            let col = series.process_cols[*var];
            for &lag in lags {
                x.data[out_r * width + c] = series.table.row(t - lag)[col];
                c += 1;
            }
        }
        y.push(series.table.row(t)[series.quality_col]);
    }
    Ok(LaggedData { x, y })
}

/// Contiguous, ordered, disjoint partitions covering `total` rows exactly.
pub fn split_ranges(
    total: usize,
    train: usize,
    val: usize,
    test: usize,
) -> Result<[std::ops::Range<usize>; 3]> {
    if train + val + test != total {
        return Err(Error::Dataset(format!(
            "split sizes {}+{}+{} = {} do not cover {} rows",
            train,
            val,
            test,
            train + val + test,
            total
        )));
    }
    Ok([
        0..train,
        train..train + val,
        train + val..total,
    ])
}

/// Indices labelled under the regular every-k-th-record pattern,
/// `k = round(1 / fraction)`.
pub fn mask_labels(n_rows: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) || !fraction.is_finite() {
        return Err(Error::Invalid(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let step = (1.0 / fraction).round().max(1.0) as usize;
    Ok((0..n_rows).step_by(step).collect())
}

/// Per-column z-score statistics fit on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub label_mean: f64,
    pub label_scale: f64,
}

impl Standardizer {
    pub fn fit(x_train: &Matrix, y_train: &[f64]) -> Result<Self> {
        if x_train.rows == 0 || y_train.is_empty() {
            return Err(Error::Dataset("cannot standardize an empty training split".into()));
        }
        let n = x_train.rows as f64;
        let mut input_mean = vec![0.0; x_train.cols];
        let mut input_scale = vec![0.0; x_train.cols];
        for c in 0..x_train.cols {
            let mut acc = 0.0;
            for r in 0..x_train.rows {
                acc += x_train.data[r * x_train.cols + c];
            }
            let mean = acc / n;
            let mut var = 0.0;
            for r in 0..x_train.rows {
                let d = x_train.data[r * x_train.cols + c] - mean;
                var += d * d;
            }
            let scale = (var / n).sqrt();
            if scale < 1e-12 {
                return Err(Error::Dataset(format!(
                    "input column {c} is constant on the training split; cannot standardize"
                )));
            }
            input_mean[c] = mean;
            input_scale[c] = scale;
        }
        let ym = y_train.iter().sum::<f64>() / y_train.len() as f64;
        let yv = y_train.iter().map(|v| (v - ym) * (v - ym)).sum::<f64>() / y_train.len() as f64;
        let ys = yv.sqrt();
        if ys < 1e-12 {
            return Err(Error::Dataset(
                "quality column is constant on the training split; cannot standardize".into(),
            ));
        }
        Ok(Standardizer {
            input_mean,
            input_scale,
            label_mean: ym,
            label_scale: ys,
        })
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[r * x.cols + c] =
                    (x.data[r * x.cols + c] - self.input_mean[c]) / self.input_scale[c];
            }
        }
        out
    }

    pub fn inverse_transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[r * x.cols + c] =
                    x.data[r * x.cols + c] * self.input_scale[c] + self.input_mean[c];
            }
        }
        out
    }

    pub fn transform_labels(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.label_mean) / self.label_scale).collect()
    }

    pub fn inverse_label(&self, v: f64) -> f64 {
        v * self.label_scale + self.label_mean
    }

    /// Variances rescale by the squared label scale.
    pub fn inverse_label_var(&self, var: f64) -> f64 {
        var * self.label_scale * self.label_scale
    }
}

/// Paired consecutive standardized rows with the label mask for time `t`.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub x_t: Matrix,
    pub x_next: Matrix,
    /// Standardized labels aligned with rows; meaningful only where `mask`
    /// is set (zero placeholder elsewhere).
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    /// Source row index (time `t`) of each batch row within its split.
    pub row_indices: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x_t.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_labelled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Consecutive-row pairs over one split, batched in a caller-supplied order.
///
/// Pair `i` couples rows `i` and `i + 1`; the last row appears only as a
/// successor. `order` permutes pair indices (shuffle it outside for
/// stochastic batches); the final partial batch is kept.
pub fn make_pairs(
    x: &Matrix,
    y: &[f64],
    labelled: &[bool],
    batch_size: usize,
    order: &[usize],
) -> Result<Vec<SampleBatch>> {
    if x.rows < 2 {
        return Err(Error::Dataset(format!(
            "pairing needs at least 2 rows, got {}",
            x.rows
        )));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let n_pairs = x.rows - 1;
    debug_assert_eq!(order.len(), n_pairs);
    debug_assert_eq!(y.len(), x.rows);
    debug_assert_eq!(labelled.len(), x.rows);

    let mut batches = Vec::with_capacity(n_pairs.div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut x_t = Matrix::zeros(b, x.cols);
        let mut x_next = Matrix::zeros(b, x.cols);
        let mut yb = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b);
        let mut idx = Vec::with_capacity(b);
        for (k, &p) in chunk.iter().enumerate() {
            debug_assert!(p < n_pairs);
            x_t.data[k * x.cols..(k + 1) * x.cols].copy_from_slice(x.row(p));
            x_next.data[k * x.cols..(k + 1) * x.cols].copy_from_slice(x.row(p + 1));
            mask.push(labelled[p]);
            yb.push(if labelled[p] { y[p] } else { 0.0 });
            idx.push(p);
        }
        batches.push(SampleBatch {
            x_t,
            x_next,
            y: yb,
            mask,
            row_indices: idx,
        });
    }
    Ok(batches)
}

/// Identity pair order (no shuffling).
pub fn pair_order(n_rows: usize) -> Vec<usize> {
    (0..n_rows.saturating_sub(1)).collect()
}

/// Seeded Fisher-Yates shuffle of a pair order.
pub fn shuffle_order(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Deterministic synthetic process series for demos and tests. Two slow
/// latent factors drive both the observed process variables (through a fixed
/// mixing matrix, plus measurement noise) and a nonlinear quality variable,
/// mimicking the low-rank correlated structure of plant data.
pub fn synthetic_series(n_rows: usize, n_process: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const N_FACTORS: usize = 2;
    let mixing: Vec<f64> = (0..n_process * N_FACTORS)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let mut factors = [0.0_f64; N_FACTORS];
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        for f in factors.iter_mut() {
            let shock: f64 = rng.random::<f64>() * 2.0 - 1.0;
            *f = 0.95 * *f + 0.2 * shock;
        }
        let mut row = Vec::with_capacity(n_process + 1);
        for j in 0..n_process {
            let mut v = 0.0;
            for (k, f) in factors.iter().enumerate() {
                v += mixing[j * N_FACTORS + k] * f;
            }
            let noise: f64 = rng.random::<f64>() * 2.0 - 1.0;
            row.push(v + 0.05 * noise);
        }
        let noise: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let y = (2.0 * factors[0]).tanh() + 0.5 * factors[1] - 0.4 * factors[1] * factors[1]
            + 0.02 * noise;
        row.push(y);
        rows.push(row);
    }
    let mut names: Vec<String> = (0..n_process).map(|j| format!("x{}", j + 1)).collect();
    names.push("y".to_string());
    RawSeries {
        names,
        table: Matrix::from_rows(rows),
        quality_col: n_process,
        process_cols: (0..n_process).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn series_from(rows: Vec<Vec<f64>>, quality_col: usize) -> RawSeries {
        let n_cols = rows[0].len();
        RawSeries {
            names: (0..n_cols).map(|c| format!("c{c}")).collect(),
            table: Matrix::from_rows(rows),
            quality_col,
            process_cols: (0..n_cols).filter(|&c| c != quality_col).collect(),
        }
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_temp("1.0 2.0 3.0\n4.0 5.0 6.0\n7.0 8.0 9.0\n");
        let s = load_csv(f.path(), &Schema::Generic { quality_col: None }, false).unwrap();
        assert_eq!(s.n_rows(), 3);
        assert_eq!(s.quality_col, 2);
        assert_eq!(s.process_cols, vec![0, 1]);
    }

    #[test]
    fn comma_and_header_variants() {
        let f = write_temp("a,b,y\n1.0,2.0,3.0\n4,5,6\n");
        let s = load_csv(f.path(), &Schema::Generic { quality_col: None }, true).unwrap();
        assert_eq!(s.n_rows(), 2);
        assert_eq!(s.names, vec!["a", "b", "y"]);
    }

    #[test]
    fn text_cell_names_row_and_column() {
        let f = write_temp("1.0 2.0\n3.0 oops\n");
        let err = load_csv(f.path(), &Schema::Generic { quality_col: None }, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn column_count_mismatch_rejected() {
        let f = write_temp("1 2 3\n4 5\n");
        assert!(load_csv(f.path(), &Schema::Generic { quality_col: None }, false).is_err());
    }

    #[test]
    fn debutanizer_schema_wants_eight_columns() {
        let f = write_temp("1 2 3 4 5 6 7\n");
        assert!(load_csv(f.path(), &Schema::Debutanizer, false).is_err());
        let g = write_temp("1 2 3 4 5 6 7 8\n");
        let s = load_csv(g.path(), &Schema::Debutanizer, false).unwrap();
        assert_eq!(s.quality_col, 7);
        assert_eq!(s.process_cols.len(), 7);
    }

    #[test]
    fn sru_schema_selects_quality_column() {
        let f = write_temp("1 2 3 4 5 6 7\n1 2 3 4 5 6 7\n");
        let s = load_csv(f.path(), &Schema::Sru { quality_col: 1 }, false).unwrap();
        assert_eq!(s.quality_col, 6);
        assert_eq!(s.process_cols, vec![0, 1, 2, 3, 4]);
        assert!(load_csv(f.path(), &Schema::Sru { quality_col: 2 }, false).is_err());
    }

    #[test]
    fn lag_counting() {
        // 12 rows, lags {0..9} -> 3 output rows.
        let rows: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64, -(t as f64)]).collect();
        let s = series_from(rows, 1);
        let spec = LagSpec::uniform(&[0], &(0..10).collect::<Vec<_>>());
        let lag = build_lagged(&s, &spec).unwrap();
        assert_eq!(lag.x.rows, 3);
        assert_eq!(lag.x.cols, 10);
        assert_eq!(lag.y, vec![-9.0, -10.0, -11.0]);
    }

    #[test]
    fn lag_zero_is_identity() {
        let rows: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64 * 2.0, 100.0 + t as f64]).collect();
        let s = series_from(rows, 1);
        let spec = LagSpec::uniform(&[0], &[0]);
        let lag = build_lagged(&s, &spec).unwrap();
        assert_eq!(lag.x.rows, 5);
        for t in 0..5 {
            assert_eq!(lag.x.row(t), &[t as f64 * 2.0]);
        }
    }

    #[test]
    fn hand_built_lag_concatenation() {
        // Two process vars, lags {0, 2}: row t = [a(t), a(t-2), b(t), b(t-2)].
        let rows = vec![
            vec![10.0, 0.1, 900.0],
            vec![11.0, 0.2, 901.0],
            vec![12.0, 0.3, 902.0],
            vec![13.0, 0.4, 903.0],
            vec![14.0, 0.5, 904.0],
        ];
        let s = series_from(rows, 2);
        let spec = LagSpec::uniform(&[0, 1], &[0, 2]);
        let lag = build_lagged(&s, &spec).unwrap();
        assert_eq!(lag.x.rows, 3);
        assert_eq!(lag.x.row(0), &[12.0, 10.0, 0.3, 0.1]);
        assert_eq!(lag.x.row(2), &[14.0, 12.0, 0.5, 0.3]);
        assert_eq!(lag.y, vec![902.0, 903.0, 904.0]);
    }

    #[test]
    fn lag_exceeding_rows_rejected() {
        let rows: Vec<Vec<f64>> = (0..3).map(|t| vec![t as f64, 0.0]).collect();
        let s = series_from(rows, 1);
        let spec = LagSpec::uniform(&[0], &[3]);
        assert!(build_lagged(&s, &spec).is_err());
    }

    #[test]
    fn split_basics() {
        let [a, b, c] = split_ranges(10, 6, 2, 2).unwrap();
        assert_eq!((a, b, c), (0..6, 6..8, 8..10));
        assert!(split_ranges(10080, 6000, 2000, 2071).is_err());
        let [_, v, _] = split_ranges(10, 8, 0, 2).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn mask_pattern() {
        assert_eq!(mask_labels(20, 0.10).unwrap(), vec![0, 10]);
        assert_eq!(mask_labels(5, 1.0).unwrap(), vec![0, 1, 2, 3, 4]);
        let m = mask_labels(20, 0.142).unwrap();
        assert_eq!(m, vec![0, 7, 14]);
        assert!(mask_labels(10, 0.0).is_err());
        assert!(mask_labels(10, 1.5).is_err());
    }

    #[test]
    fn mask_fraction_converges() {
        for &f in &[0.01, 0.05, 0.2, 0.333, 0.5] {
            let n = 10_000;
            let m = mask_labels(n, f).unwrap();
            let step = (1.0 / f).round();
            let got = m.len() as f64 / n as f64;
            assert!((got - f).abs() <= 1.0 / step, "fraction {f}: got {got}");
        }
    }

    #[test]
    fn standardizer_round_trip_and_stats() {
        let s = synthetic_series(400, 3, 5);
        let spec = LagSpec::uniform(&[0, 1, 2], &[0, 1]);
        let lag = build_lagged(&s, &spec).unwrap();
        let std = Standardizer::fit(&lag.x, &lag.y).unwrap();
        let z = std.transform(&lag.x);
        for c in 0..z.cols {
            let n = z.rows as f64;
            let mean: f64 = (0..z.rows).map(|r| z.data[r * z.cols + c]).sum::<f64>() / n;
            let var: f64 = (0..z.rows)
                .map(|r| (z.data[r * z.cols + c] - mean).powi(2))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-9, "col {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "col {c} sd {}", var.sqrt());
        }
        let back = std.inverse_transform(&z);
        for (a, b) in lag.x.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zy = std.transform_labels(&lag.y);
        for (a, b) in lag.y.iter().zip(zy.iter()) {
            assert!((std.inverse_label(*b) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_rejected() {
        let x = Matrix::from_rows(vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]);
        let y = vec![0.1, 0.2, 0.3];
        assert!(Standardizer::fit(&x, &y).is_err());
    }

    #[test]
    fn pairs_count_and_alignment() {
        let x = Matrix::from_rows((0..5).map(|t| vec![t as f64]).collect());
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let labelled = vec![true, false, true, false, true];
        let order = pair_order(5);
        let batches = make_pairs(&x, &y, &labelled, 200, &order).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.len(), 4);
        for k in 0..4 {
            assert_eq!(b.x_t.row(k)[0] + 1.0, b.x_next.row(k)[0]);
        }
        assert_eq!(b.mask, vec![true, false, true, false]);
        assert_eq!(b.y, vec![0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn partial_batches_kept() {
        let x = Matrix::from_rows((0..8).map(|t| vec![t as f64]).collect());
        let y = vec![0.0; 8];
        let labelled = vec![true; 8];
        let order = pair_order(8);
        let batches = make_pairs(&x, &y, &labelled, 3, &order).unwrap();
        assert_eq!(batches.iter().map(SampleBatch::len).collect::<Vec<_>>(), vec![3, 3, 1]);
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = Matrix::from_rows(vec![vec![1.0]]);
        assert!(make_pairs(&x, &[0.0], &[true], 10, &[]).is_err());
    }

    #[test]
    fn shuffled_pair_stream_reproduces() {
        let run = || {
            let mut order = pair_order(50);
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            shuffle_order(&mut order, &mut rng);
            order
        };
        assert_eq!(run(), run());
        let mut other = pair_order(50);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        shuffle_order(&mut other, &mut rng);
        assert_ne!(run(), other);
    }

    #[test]
    fn synthetic_series_is_deterministic() {
        let a = synthetic_series(50, 4, 9);
        let b = synthetic_series(50, 4, 9);
        assert_eq!(a.table.data, b.table.data);
        assert_eq!(a.quality_col, 4);
    }
}
