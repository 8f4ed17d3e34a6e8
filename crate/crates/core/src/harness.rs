//! The experiment harness: data preparation, the training loop with
//! best-validation checkpointing, RMSE evaluation, confidence-interval
//! prediction, label-fraction sweeps, and latent export.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::{DatasetName, ExperimentConfig, ValSelection};
use crate::dataset::{
    build_lagged, load_csv, make_pairs, mask_labels, pair_order, shuffle_order, split_ranges,
    synthetic_series, LagSpec, Matrix, RawSeries, Schema, Standardizer,
};
use crate::error::{Error, Result};
use crate::models::{AnyModel, LossTerms, ModelKind, NoiseDraw};
use crate::nn::mlp_forward;
use crate::optim::{adam_step, clip_global_norm, lr_at, AdamState};

/// One split of standardized data plus its label mask.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub x: Matrix,
    /// Standardized labels for every row.
    pub y_std: Vec<f64>,
    /// Labels in original units for every row.
    pub y_raw: Vec<f64>,
    /// Label mask under the experiment's label fraction.
    pub labelled: Vec<bool>,
}

/// Fully prepared experiment data: lagged, split, standardized, masked.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    pub standardizer: Standardizer,
    pub input_width: usize,
}

fn load_series(config: &ExperimentConfig) -> Result<RawSeries> {
    let d = &config.dataset;
    match d.name {
        DatasetName::Synthetic => {
            if d.synth_rows < 4 || d.synth_vars == 0 {
                return Err(Error::Config(
                    "synthetic dataset needs synth_rows >= 4 and synth_vars >= 1".into(),
                ));
            }
            Ok(synthetic_series(d.synth_rows, d.synth_vars, config.run.seed))
        }
        name => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Config(format!("dataset `{}` needs a path", name.name())))?;
            let schema = match name {
                DatasetName::Debutanizer => Schema::Debutanizer,
                DatasetName::Sru => Schema::Sru {
                    quality_col: d.quality_column.unwrap_or(0),
                },
                DatasetName::Generic => Schema::Generic {
                    quality_col: d.quality_column,
                },
                DatasetName::Synthetic => unreachable!(),
            };
            load_csv(path, &schema, d.has_header)
        }
    }
}

fn lag_spec(config: &ExperimentConfig, series: &RawSeries) -> Result<LagSpec> {
    let d = &config.dataset;
    let vars: Vec<usize> = if d.use_vars.is_empty() {
        (0..series.process_cols.len()).collect()
    } else {
        // 1-based in the config.
        let mut v = Vec::with_capacity(d.use_vars.len());
        for &n in &d.use_vars {
            if n == 0 || n > series.process_cols.len() {
                return Err(Error::Config(format!(
                    "use_vars references x{n} but the dataset has {} process variables",
                    series.process_cols.len()
                )));
            }
            v.push(n - 1);
        }
        v
    };
    let overrides = d
        .lag_overrides
        .iter()
        .map(|(k, v)| {
            if *k == 0 {
                Err(Error::Config(
                    "lag override variable numbers are 1-based".into(),
                ))
            } else {
                Ok((*k - 1, v.clone()))
            }
        })
        .collect::<Result<std::collections::BTreeMap<_, _>>>()?;
    Ok(LagSpec::with_overrides(&vars, &d.lags, &overrides))
}

/// Load, lag, split, standardize, and mask per the configuration. Also
/// resolves data-dependent parts of the config (input width, derived
/// decoder); the returned config is fully concrete.
pub fn prepare(config: &ExperimentConfig) -> Result<(PreparedData, ExperimentConfig)> {
    config.validate()?;
    let series = load_series(config)?;
    let spec = lag_spec(config, &series)?;
    let lagged = build_lagged(&series, &spec)?;
    let width = lagged.x.cols;

    let usable = lagged.x.rows;
    let test_n = match config.split.test {
        Some(t) => t,
        None => usable
            .checked_sub(config.split.train + config.split.val)
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "train {} + val {} exceed usable rows {}",
                    config.split.train, config.split.val, usable
                ))
            })?,
    };
    let [r_train, r_val, r_test] =
        split_ranges(usable, config.split.train, config.split.val, test_n)?;
    if r_train.len() < 2 || r_test.is_empty() {
        return Err(Error::Dataset(format!(
            "split too small: train {} rows, test {} rows",
            r_train.len(),
            r_test.len()
        )));
    }

    let x_train = lagged.x.slice_rows(r_train.clone());
    let y_train_raw = lagged.y[r_train.clone()].to_vec();
    let standardizer = Standardizer::fit(&x_train, &y_train_raw)?;

    let mk_split = |range: std::ops::Range<usize>, fraction: Option<f64>| -> Result<SplitData> {
        let x = standardizer.transform(&lagged.x.slice_rows(range.clone()));
        let y_raw = lagged.y[range.clone()].to_vec();
        let y_std = standardizer.transform_labels(&y_raw);
        let labelled = match fraction {
            Some(f) => {
                let idx = mask_labels(range.len(), f)?;
                let mut mask = vec![false; range.len()];
                for i in idx {
                    mask[i] = true;
                }
                mask
            }
            None => vec![true; range.len()],
        };
        Ok(SplitData {
            x,
            y_std,
            y_raw,
            labelled,
        })
    };

    let fraction = config.run.label_fraction;
    let data = PreparedData {
        train: mk_split(r_train, Some(fraction))?,
        val: mk_split(r_val, Some(fraction))?,
        test: mk_split(r_test, None)?,
        standardizer,
        input_width: width,
    };

    // Resolve the config against the data.
    let mut resolved = config.clone();
    let sizes = resolved.model_sizes(width)?;
    resolved.model.shared = sizes.shared.clone();
    resolved.model.decoder = Some(sizes.decoder.clone());
    resolved.split.test = Some(test_n);
    Ok((data, resolved))
}

/// Per-epoch metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTerms,
    pub val_total: f64,
}

/// Training metrics: one row per completed epoch plus the final test RMSE of
/// the selected checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
    pub test_rmse: Option<f64>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,lr,rec,kl,label,entropy,pv,recon_reg,total,val_total\n");
        for r in &self.rows {
            let t = &r.train;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                t.rec,
                t.kl,
                t.label,
                t.entropy,
                t.pv,
                t.recon_reg,
                t.total,
                r.val_total
            ));
        }
        if let Some(rmse) = self.test_rmse {
            s.push_str(&format!("# test_rmse {rmse}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// A trained model frozen at its best validation epoch, together with
/// everything needed to reproduce predictions: config snapshot, standardizer
/// statistics, and every parameter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub standardizer: Standardizer,
    pub model: AnyModel,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
}

/// Validation objective over a split, mean-weighted by batch rows. For the
/// supervised baseline, batches without labelled rows contribute nothing.
fn split_loss(
    model: &AnyModel,
    split: &SplitData,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    opts: &crate::models::LossOptions,
) -> Result<f64> {
    let n = split.x.rows;
    if n < 2 {
        return Err(Error::Dataset(
            "validation split needs at least 2 rows".into(),
        ));
    }
    let order = pair_order(n);
    let batches = make_pairs(&split.x, &split.y_std, &split.labelled, batch_size, &order)?;
    let nz = model.nz();
    let mut acc = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        let noise = NoiseDraw::sample(rng, batch.len(), nz);
        if matches!(model.kind(), ModelKind::Fcnn) && batch.n_labelled() == 0 {
            continue;
        }
        let mut g = Graph::new();
        let (build, _) = model.loss(&mut g, batch, &noise, opts)?;
        acc += build.terms.total * batch.len() as f64;
        count += batch.len();
    }
    if count == 0 {
        return Err(Error::Dataset(
            "no evaluable batches on the validation split (no labelled rows?)".into(),
        ));
    }
    Ok(acc / count as f64)
}

/// Root mean square error on a split, in original label units.
pub fn evaluate_rmse_on(
    model: &AnyModel,
    split: &SplitData,
    standardizer: &Standardizer,
) -> Result<f64> {
    if split.x.rows == 0 {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let (mean, _var) = crate::models::predict_y(
        model,
        &split.x,
        standardizer.label_mean,
        standardizer.label_scale,
    )?;
    let mut acc = 0.0;
    for (p, t) in mean.iter().zip(split.y_raw.iter()) {
        let d = p - t;
        acc += d * d;
    }
    Ok((acc / split.x.rows as f64).sqrt())
}

/// RMSE of a checkpoint on a named split of its own dataset.
pub fn evaluate_rmse(checkpoint: &Checkpoint, split_name: &str) -> Result<f64> {
    let (data, _) = prepare(&checkpoint.config)?;
    let split = match split_name {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(Error::Invalid(format!(
                "unknown split `{other}` (expected train, val, or test)"
            )))
        }
    };
    evaluate_rmse_on(&checkpoint.model, split, &checkpoint.standardizer)
}

/// Run the full training protocol for one configuration.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutput> {
    let (data, resolved) = prepare(config)?;
    let sizes = resolved.model_sizes(data.input_width)?;
    let mut model = AnyModel::new(
        resolved.model.kind,
        &sizes,
        resolved.model.activation,
        resolved.run.seed,
    )?;

    if matches!(model.kind(), ModelKind::Fcnn) {
        if data.train.labelled.iter().all(|&m| !m) {
            return Err(Error::Dataset(
                "fcnn training needs at least one labelled training row".into(),
            ));
        }
        if !data.val.labelled.is_empty() && data.val.labelled.iter().all(|&m| !m) {
            return Err(Error::Dataset(
                "fcnn validation needs at least one labelled validation row".into(),
            ));
        }
    }

    let mut adam = AdamState::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(
        resolved
            .run
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(1),
    );
    let schedule = resolved.optim.schedule;
    let batch_size = resolved.optim.batch_size;
    let opts = resolved.loss;
    let nz = model.nz();

    let mut metrics = MetricsLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.clone()).collect();

    let n_train = data.train.x.rows;
    for epoch in 0..schedule.total_epochs {
        let lr = lr_at(&schedule, epoch)?;
        let mut order = pair_order(n_train);
        shuffle_order(&mut order, &mut rng);
        let batches = make_pairs(
            &data.train.x,
            &data.train.y_std,
            &data.train.labelled,
            batch_size,
            &order,
        )?;

        let mut term_acc = LossTerms::default();
        let mut rows_acc = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let noise = NoiseDraw::sample(&mut rng, batch.len(), nz);
            if matches!(model.kind(), ModelKind::Fcnn) && batch.n_labelled() == 0 {
                continue;
            }
            let mut g = Graph::new();
            let (build, leaves) =
                model
                    .loss(&mut g, batch, &noise, &opts)
                    .map_err(|e| Error::Training {
                        epoch,
                        batch: bi,
                        detail: e.to_string(),
                    })?;
            if !build.terms.all_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite loss terms: {:?}", build.terms),
                });
            }
            let grads_map = g.backward(build.total).map_err(|e| Error::Training {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            let mut grads: Vec<Vec<f64>> =
                leaves.iter().map(|t| grads_map.wrt(*t).to_vec()).collect();
            if let Some(max_norm) = resolved.optim.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            let mut params = model.params_mut();
            adam_step(&mut params, &grads, &mut adam, lr).map_err(|e| Error::Training {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            model.post_step();

            let b = batch.len() as f64;
            term_acc.rec += build.terms.rec * b;
            term_acc.kl += build.terms.kl * b;
            term_acc.label += build.terms.label * b;
            term_acc.entropy += build.terms.entropy * b;
            term_acc.pv += build.terms.pv * b;
            term_acc.recon_reg += build.terms.recon_reg * b;
            term_acc.total += build.terms.total * b;
            rows_acc += batch.len();
        }
        if rows_acc > 0 {
            let n = rows_acc as f64;
            term_acc.rec /= n;
            term_acc.kl /= n;
            term_acc.label /= n;
            term_acc.entropy /= n;
            term_acc.pv /= n;
            term_acc.recon_reg /= n;
            term_acc.total /= n;
        }

        let val_total = match resolved.run.val_selection {
            ValSelection::Loss => split_loss(&model, &data.val, batch_size, &mut rng, &opts)?,
            ValSelection::Rmse => evaluate_rmse_on(&model, &data.val, &data.standardizer)?,
        };
        if !val_total.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                detail: format!("non-finite validation objective {val_total}"),
            });
        }
        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            best_params = model.params().iter().map(|p| p.values.clone()).collect();
        }
        metrics.rows.push(EpochRow {
            epoch,
            lr,
            train: term_acc,
            val_total,
        });
    }

    // Freeze the best-validation weights.
    {
        let mut params = model.params_mut();
        for (p, best) in params.iter_mut().zip(best_params.iter()) {
            p.values.copy_from_slice(best);
        }
    }
    let test_rmse = evaluate_rmse_on(&model, &data.test, &data.standardizer)?;
    metrics.test_rmse = Some(test_rmse);

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: resolved,
            standardizer: data.standardizer,
            model,
            best_val_loss: best_val,
            best_epoch,
        },
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Confidence intervals
// ---------------------------------------------------------------------------

/// Inverse standard-normal CDF (Acklam's rational approximation, |relative
/// error| < 1.2e-9 over (0, 1)).
pub fn inv_norm_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    assert!(p > 0.0 && p < 1.0, "inv_norm_cdf domain is (0, 1)");
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiRow {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-row prediction with a two-sided confidence interval at the given
/// level: `mean +- z((1+level)/2) * sigma` in original label units.
pub fn predict_ci(
    model: &AnyModel,
    x_std: &Matrix,
    standardizer: &Standardizer,
    level: f64,
) -> Result<Vec<CiRow>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let z = inv_norm_cdf(0.5 + level / 2.0);
    let (mean, var) = crate::models::predict_y(
        model,
        x_std,
        standardizer.label_mean,
        standardizer.label_scale,
    )?;
    Ok(mean
        .iter()
        .zip(var.iter())
        .map(|(m, v)| {
            let half = z * v.sqrt();
            CiRow {
                mean: *m,
                lower: m - half,
                upper: m + half,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Latent export
// ---------------------------------------------------------------------------

/// One row per sample: latent means, de-standardized predictive standard
/// deviation of the quality variable, and the true label when known.
pub struct LatentRow {
    pub z_mean: Vec<f64>,
    pub y_std_dev: f64,
    pub y_true: Option<f64>,
}

pub fn export_latent(
    model: &AnyModel,
    x_std: &Matrix,
    y_true: Option<&[f64]>,
    standardizer: &Standardizer,
) -> Result<Vec<LatentRow>> {
    let (shared, latent_enc) = match model {
        AnyModel::Ssvaer(m) => (&m.shared, &m.latent_enc),
        AnyModel::Svaer(m) => (&m.shared, &m.latent_enc),
        AnyModel::Fcnn(_) => {
            return Err(Error::Invalid(
                "the supervised baseline has no latent space to export".into(),
            ))
        }
    };
    let mut g = Graph::new();
    let mut reg = Vec::new();
    let b_shared = shared.bind(&mut g, &mut reg)?;
    let b_latent = latent_enc.bind(&mut g, &mut reg)?;
    let x = g.leaf(&[x_std.rows, x_std.cols], x_std.data.clone())?;
    let (h, _) = mlp_forward(&mut g, shared, &b_shared, x, false)?;
    let (z_mean, _) = mlp_forward(&mut g, latent_enc, &b_latent, h, false)?;
    let z_vals = g.values(z_mean).to_vec();
    let nz = model.nz();

    let (_, var) = crate::models::predict_y(
        model,
        x_std,
        standardizer.label_mean,
        standardizer.label_scale,
    )?;

    Ok((0..x_std.rows)
        .map(|r| LatentRow {
            z_mean: z_vals[r * nz..(r + 1) * nz].to_vec(),
            y_std_dev: var[r].sqrt(),
            y_true: y_true.map(|y| y[r]),
        })
        .collect())
}

pub fn latent_rows_to_csv(rows: &[LatentRow]) -> String {
    let nz = rows.first().map_or(0, |r| r.z_mean.len());
    let mut s = String::new();
    for i in 0..nz {
        s.push_str(&format!("z{},", i + 1));
    }
    s.push_str("y_std,y_true\n");
    for r in rows {
        for z in &r.z_mean {
            s.push_str(&format!("{z},"));
        }
        match r.y_true {
            Some(y) => s.push_str(&format!("{},{}\n", r.y_std_dev, y)),
            None => s.push_str(&format!("{},\n", r.y_std_dev)),
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "ssvaer checkpoint v1";

impl Checkpoint {
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        s.push_str("[config]\n");
        for line in self.config.serialize().lines() {
            // Embedded config lines carry a `>` prefix so the outer parser
            // stays line-oriented.
            s.push('>');
            s.push_str(line);
            s.push('\n');
        }
        s.push_str("[standardizer]\n");
        s.push_str(&format!(
            "input_mean = {}\n",
            join_f64(&self.standardizer.input_mean)
        ));
        s.push_str(&format!(
            "input_scale = {}\n",
            join_f64(&self.standardizer.input_scale)
        ));
        s.push_str(&format!("label_mean = {}\n", self.standardizer.label_mean));
        s.push_str(&format!(
            "label_scale = {}\n",
            self.standardizer.label_scale
        ));
        s.push_str("[state]\n");
        s.push_str(&format!("best_val_loss = {}\n", self.best_val_loss));
        s.push_str(&format!("best_epoch = {}\n", self.best_epoch));
        for p in self.model.params() {
            s.push_str(&format!("[param {}]\n", p.name));
            s.push_str(&format!(
                "shape = {}\n",
                p.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ));
            s.push_str(&format!("values = {}\n", join_f64(&p.values)));
        }
        s.push_str("[end]\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.serialize())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or("");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint header `{magic}` (expected `{CHECKPOINT_MAGIC}`)"
            )));
        }

        let mut config_text = String::new();
        let mut section = String::new();
        let mut kv: Vec<(String, String, String)> = Vec::new();
        let mut saw_end = false;
        for line in lines {
            if saw_end {
                break;
            }
            if let Some(stripped) = line.strip_prefix('>') {
                if section != "config" {
                    return Err(Error::Checkpoint(
                        "escaped config line outside [config]".into(),
                    ));
                }
                config_text.push_str(stripped);
                config_text.push('\n');
                continue;
            }
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if trimmed == "[end]" {
                saw_end = true;
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed section `{trimmed}`")))?
                    .to_string();
                if section != "config"
                    && !section.starts_with("param ")
                    && section != "standardizer"
                    && section != "state"
                {
                    return Err(Error::Checkpoint(format!("unknown section `[{section}]`")));
                }
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("expected key = value, got `{trimmed}`"))
            })?;
            kv.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
        }
        if !saw_end {
            return Err(Error::Checkpoint(
                "truncated checkpoint: missing [end] marker".into(),
            ));
        }

        let config = ExperimentConfig::parse(&config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

        let get = |sec: &str, key: &str| -> Result<String> {
            kv.iter()
                .find(|(s, k, _)| s == sec && k == key)
                .map(|(_, _, v)| v.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` in [{sec}]")))
        };
        let standardizer = Standardizer {
            input_mean: parse_f64_list(&get("standardizer", "input_mean")?)?,
            input_scale: parse_f64_list(&get("standardizer", "input_scale")?)?,
            label_mean: parse_one_f64(&get("standardizer", "label_mean")?)?,
            label_scale: parse_one_f64(&get("standardizer", "label_scale")?)?,
        };
        let best_val_loss = parse_one_f64(&get("state", "best_val_loss")?)?;
        let best_epoch = get("state", "best_epoch")?
            .parse::<usize>()
            .map_err(|_| Error::Checkpoint("bad best_epoch".into()))?;

        let width = standardizer.input_mean.len();
        let sizes = config
            .model_sizes(width)
            .map_err(|e| Error::Checkpoint(format!("embedded config vs data width: {e}")))?;
        let mut model = AnyModel::new(
            config.model.kind,
            &sizes,
            config.model.activation,
            config.run.seed,
        )?;

        // Fill parameters by name, validating shapes.
        for p in model.params_mut() {
            let sec = format!("param {}", p.name);
            let shape_s = get(&sec, "shape")?;
            let shape: Vec<usize> = shape_s
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape for `{}`", p.name)))?;
            if shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` shape {:?} does not match the embedded config's {:?}",
                    p.name, shape, p.shape
                )));
            }
            let values = parse_f64_list(&get(&sec, "values")?)?;
            if values.len() != p.values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has {} values, expected {}",
                    p.name,
                    values.len(),
                    p.values.len()
                )));
            }
            p.values = values;
        }

        Ok(Checkpoint {
            config,
            standardizer,
            model,
            best_val_loss,
            best_epoch,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::deserialize(&text)
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad float `{x}`")))
        })
        .collect()
}

fn parse_one_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Checkpoint(format!("bad float `{s}`")))
}

// ---------------------------------------------------------------------------
// Label-fraction sweep
// ---------------------------------------------------------------------------

/// Result of one (model kind, fraction, seed) training cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub kind: ModelKind,
    pub fraction: f64,
    pub seed: u64,
    pub test_rmse: f64,
    /// Largest |entropy| seen in the per-epoch training log.
    pub max_abs_entropy: f64,
    /// True when the pseudo-variation and reconstruction-regularizer columns
    /// are identically zero in the log.
    pub pv_and_recon_reg_zero: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub fractions: Vec<f64>,
    pub kinds: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Mean test RMSE over seeds for one (kind, fraction).
    pub fn mean_rmse(&self, kind: ModelKind, fraction: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.kind == kind && c.fraction == fraction)
            .map(|c| c.test_rmse)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Methods-by-fractions table mirroring the benchmark comparison layout.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method");
        for f in &self.fractions {
            s.push_str(&format!(",{}", fraction_label(*f)));
        }
        s.push('\n');
        for kind in &self.kinds {
            s.push_str(kind.name());
            for f in &self.fractions {
                match self.mean_rmse(*kind, *f) {
                    Some(v) => s.push_str(&format!(",{v}")),
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Plot-ready long form: one `(method, fraction, seed, rmse)` row per cell.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("method,fraction,seed,test_rmse\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{}\n",
                c.kind.name(),
                c.fraction,
                c.seed,
                c.test_rmse
            ));
        }
        s
    }
}

pub fn fraction_label(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round() as i64)
    } else {
        let s = format!("{pct:.6}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        format!("{s}%")
    }
}

/// The ten benchmark label fractions.
pub const BENCHMARK_FRACTIONS: [f64; 10] = [
    0.01, 0.02, 0.05, 0.10, 0.142, 0.20, 0.25, 0.333, 0.50, 1.0,
];

/// Train one model per (kind, fraction, seed) cell and collect test RMSEs.
/// Cells are independent and run on up to `jobs` worker threads; results are
/// merged in a deterministic order regardless of scheduling.
pub fn sweep(
    template: &ExperimentConfig,
    kinds: &[ModelKind],
    fractions: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if fractions.is_empty() {
        return Err(Error::Invalid("sweep needs at least one fraction".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Invalid("sweep needs at least one model kind".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("sweep needs at least one seed".into()));
    }

    struct Cell {
        index: usize,
        kind: ModelKind,
        fraction: f64,
        seed: u64,
    }
    let mut queue: VecDeque<Cell> = VecDeque::new();
    let mut index = 0;
    for kind in kinds {
        for fraction in fractions {
            for seed in seeds {
                queue.push_back(Cell {
                    index,
                    kind: *kind,
                    fraction: *fraction,
                    seed: *seed,
                });
                index += 1;
            }
        }
    }
    let n_cells = index;
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<Option<Result<SweepCell>>>> =
        Mutex::new((0..n_cells).map(|_| None).collect());

    let workers = jobs.max(1).min(n_cells);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let cell = {
                    let mut q = queue.lock().unwrap();
                    match q.pop_front() {
                        Some(c) => c,
                        None => break,
                    }
                };
                let mut cfg = template.clone();
                cfg.model.kind = cell.kind;
                cfg.run.label_fraction = cell.fraction;
                cfg.run.seed = cell.seed;
                let outcome = train(&cfg).map(|out| {
                    let max_abs_entropy = out
                        .metrics
                        .rows
                        .iter()
                        .map(|r| r.train.entropy.abs())
                        .fold(0.0, f64::max);
                    let pv_and_recon_reg_zero = out
                        .metrics
                        .rows
                        .iter()
                        .all(|r| r.train.pv == 0.0 && r.train.recon_reg == 0.0);
                    SweepCell {
                        kind: cell.kind,
                        fraction: cell.fraction,
                        seed: cell.seed,
                        test_rmse: out.metrics.test_rmse.unwrap_or(f64::NAN),
                        max_abs_entropy,
                        pv_and_recon_reg_zero,
                    }
                });
                results.lock().unwrap()[cell.index] = Some(outcome);
            });
        }
    });

    let mut cells = Vec::with_capacity(n_cells);
    for slot in results.into_inner().unwrap() {
        match slot {
            Some(Ok(cell)) => cells.push(cell),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Invalid("sweep cell never ran".into())),
        }
    }
    Ok(SweepResult {
        fractions: fractions.to_vec(),
        kinds: kinds.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}
