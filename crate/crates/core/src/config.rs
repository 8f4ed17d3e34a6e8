//! Experiment configuration and its flat key-value file format.
//!
//! The on-disk format is sectioned `key = value` text, diff-friendly and
//! fully round-trippable: parsing the serialized form reproduces the struct.
//! Unknown sections or keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::models::{EntropySign, LossOptions, ModelKind, ModelSizes, TermWeights};
use crate::nn::Activation;
use crate::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Debutanizer,
    Sru,
    Generic,
    Synthetic,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "debutanizer" => Ok(DatasetName::Debutanizer),
            "sru" => Ok(DatasetName::Sru),
            "generic" => Ok(DatasetName::Generic),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(Error::Config(format!("unknown dataset name `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Debutanizer => "debutanizer",
            DatasetName::Sru => "sru",
            DatasetName::Generic => "generic",
            DatasetName::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub path: Option<PathBuf>,
    pub has_header: bool,
    /// For `sru`: which quality column (0-based among the quality columns).
    /// For `generic`: absolute 0-based column index of the quality variable.
    pub quality_column: Option<usize>,
    /// 1-based process-variable numbers used for input construction.
    pub use_vars: Vec<usize>,
    /// Base lag set applied to every used variable.
    pub lags: Vec<usize>,
    /// Per-variable lag overrides, keyed by 1-based variable number.
    pub lag_overrides: BTreeMap<usize, Vec<usize>>,
    /// Synthetic-source dimensions.
    pub synth_rows: usize,
    pub synth_vars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    /// `None` means "the remainder of the usable rows".
    pub test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// A leading 0 means "fill in the lagged input width at preparation time".
    pub shared: Vec<usize>,
    pub latent: Vec<usize>,
    pub regressor: Vec<usize>,
    pub generator: Vec<usize>,
    /// `None` derives the decoder by mirroring the shared encoder.
    pub decoder: Option<Vec<usize>>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValSelection {
    /// Keep the weights with the least validation value of the training
    /// objective.
    Loss,
    /// Keep the weights with the least validation RMSE.
    Rmse,
}

impl ValSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(ValSelection::Loss),
            "rmse" => Ok(ValSelection::Rmse),
            other => Err(Error::Config(format!("unknown val_selection `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValSelection::Loss => "loss",
            ValSelection::Rmse => "rmse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub label_fraction: f64,
    pub output_dir: PathBuf,
    pub val_selection: ValSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub loss: LossOptions,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Sensible defaults per dataset: the benchmark protocols for the two
    /// real datasets, a small fast setup for the synthetic source.
    pub fn default_for(name: DatasetName) -> Self {
        let (dataset, split, model) = match name {
            DatasetName::Debutanizer => (
                DatasetConfig {
                    name,
                    path: Some(PathBuf::from("data/debutanizer_data.txt")),
                    has_header: false,
                    quality_column: None,
                    use_vars: vec![1, 2, 3, 4, 5],
                    lags: vec![0, 5, 7, 9],
                    lag_overrides: BTreeMap::new(),
                    synth_rows: 0,
                    synth_vars: 0,
                },
                // 2394 rows - 9 lag rows = 2385 usable; 60/20/20.
                SplitConfig {
                    train: 1431,
                    val: 477,
                    test: None,
                },
                ModelConfig {
                    kind: ModelKind::Ssvaer,
                    shared: vec![20, 16, 12],
                    latent: vec![12, 6, 6],
                    regressor: vec![12, 6, 1],
                    generator: vec![2, 2, 6],
                    decoder: None,
                    activation: Activation::Relu,
                },
            ),
            DatasetName::Sru => (
                DatasetConfig {
                    name,
                    path: Some(PathBuf::from("data/SRU_data.txt")),
                    has_header: false,
                    quality_column: Some(0),
                    use_vars: vec![1, 2, 3, 4, 5],
                    lags: (0..10).collect(),
                    lag_overrides: BTreeMap::new(),
                    synth_rows: 0,
                    synth_vars: 0,
                },
                SplitConfig {
                    train: 6000,
                    val: 2000,
                    test: None,
                },
                ModelConfig {
                    kind: ModelKind::Ssvaer,
                    shared: vec![50, 20, 16, 12],
                    latent: vec![12, 6, 6],
                    regressor: vec![12, 6, 1],
                    generator: vec![2, 2, 6],
                    decoder: None,
                    activation: Activation::Relu,
                },
            ),
            DatasetName::Generic => (
                DatasetConfig {
                    name,
                    path: None,
                    has_header: false,
                    quality_column: None,
                    use_vars: vec![],
                    lags: vec![0],
                    lag_overrides: BTreeMap::new(),
                    synth_rows: 0,
                    synth_vars: 0,
                },
                SplitConfig {
                    train: 0,
                    val: 0,
                    test: None,
                },
                ModelConfig {
                    kind: ModelKind::Ssvaer,
                    shared: vec![0, 16, 12],
                    latent: vec![12, 6, 6],
                    regressor: vec![12, 6, 1],
                    generator: vec![2, 2, 6],
                    decoder: None,
                    activation: Activation::Relu,
                },
            ),
            DatasetName::Synthetic => (
                DatasetConfig {
                    name,
                    path: None,
                    has_header: false,
                    quality_column: None,
                    use_vars: vec![1, 2, 3, 4],
                    lags: vec![0, 1],
                    lag_overrides: BTreeMap::new(),
                    synth_rows: 600,
                    synth_vars: 4,
                },
                SplitConfig {
                    train: 360,
                    val: 120,
                    test: None,
                },
                ModelConfig {
                    kind: ModelKind::Ssvaer,
                    shared: vec![8, 6, 4],
                    latent: vec![4, 3, 3],
                    regressor: vec![4, 3, 1],
                    generator: vec![2, 2, 3],
                    decoder: None,
                    activation: Activation::Relu,
                },
            ),
        };
        ExperimentConfig {
            dataset,
            split,
            model,
            loss: LossOptions::default(),
            optim: OptimConfig {
                schedule: LrSchedule::default(),
                batch_size: 200,
                grad_clip: None,
            },
            run: RunConfig {
                seed: 1,
                label_fraction: 0.2,
                output_dir: PathBuf::from("runs/out"),
                val_selection: ValSelection::Loss,
            },
        }
    }

    /// Concrete [`ModelSizes`] once the lagged input width is known.
    pub fn model_sizes(&self, input_width: usize) -> Result<ModelSizes> {
        let mut shared = self.model.shared.clone();
        if shared.first() == Some(&0) {
            shared[0] = input_width;
        }
        if shared.first() != Some(&input_width) {
            return Err(Error::Config(format!(
                "shared encoder input {} does not match lagged input width {}",
                shared[0], input_width
            )));
        }
        let sizes = match &self.model.decoder {
            Some(decoder) => ModelSizes {
                shared,
                latent: self.model.latent.clone(),
                regressor: self.model.regressor.clone(),
                generator: self.model.generator.clone(),
                decoder: decoder.clone(),
            },
            None => ModelSizes::with_default_decoder(
                shared,
                self.model.latent.clone(),
                self.model.regressor.clone(),
                self.model.generator.clone(),
            ),
        };
        sizes.validate()?;
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.schedule.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.run.label_fraction > 0.0 && self.run.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must be in (0, 1], got {}",
                self.run.label_fraction
            )));
        }
        if self.dataset.name != DatasetName::Synthetic && self.dataset.path.is_none() {
            return Err(Error::Config(format!(
                "dataset `{}` needs a path",
                self.dataset.name.name()
            )));
        }
        if self.dataset.use_vars.is_empty() && self.dataset.name != DatasetName::Generic {
            return Err(Error::Config("use_vars must not be empty".into()));
        }
        if self.dataset.lags.is_empty() {
            return Err(Error::Config("lags must not be empty".into()));
        }
        Ok(())
    }

    /// Serialize to the flat sectioned text form.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        s.push_str("[dataset]\n");
        kv(&mut s, "name", d.name.name());
        if let Some(p) = &d.path {
            kv(&mut s, "path", &p.display().to_string());
        }
        kv(&mut s, "has_header", &d.has_header.to_string());
        if let Some(q) = d.quality_column {
            kv(&mut s, "quality_column", &q.to_string());
        }
        kv(&mut s, "use_vars", &join_usize(&d.use_vars));
        kv(&mut s, "lags", &join_usize(&d.lags));
        for (var, lags) in &d.lag_overrides {
            kv(&mut s, &format!("lags_x{var}"), &join_usize(lags));
        }
        if d.name == DatasetName::Synthetic {
            kv(&mut s, "synth_rows", &d.synth_rows.to_string());
            kv(&mut s, "synth_vars", &d.synth_vars.to_string());
        }

        s.push_str("\n[split]\n");
        kv(&mut s, "train", &self.split.train.to_string());
        kv(&mut s, "val", &self.split.val.to_string());
        match self.split.test {
            Some(t) => kv(&mut s, "test", &t.to_string()),
            None => kv(&mut s, "test", "rest"),
        }

        s.push_str("\n[model]\n");
        kv(&mut s, "kind", self.model.kind.name());
        kv(&mut s, "shared", &join_usize(&self.model.shared));
        kv(&mut s, "latent", &join_usize(&self.model.latent));
        kv(&mut s, "regressor", &join_usize(&self.model.regressor));
        kv(&mut s, "generator", &join_usize(&self.model.generator));
        match &self.model.decoder {
            Some(dcd) => kv(&mut s, "decoder", &join_usize(dcd)),
            None => kv(&mut s, "decoder", "auto"),
        }
        kv(&mut s, "activation", self.model.activation.name());

        s.push_str("\n[loss]\n");
        let w = &self.loss.weights;
        kv(&mut s, "w_rec", &fmt_f64(w.rec));
        kv(&mut s, "w_kl", &fmt_f64(w.kl));
        kv(&mut s, "w_label", &fmt_f64(w.label));
        kv(&mut s, "w_entropy", &fmt_f64(w.entropy));
        kv(&mut s, "w_pv", &fmt_f64(w.pv));
        kv(&mut s, "w_recon_reg", &fmt_f64(w.recon_reg));
        kv(&mut s, "entropy_sign", self.loss.entropy_sign.name());

        s.push_str("\n[optimizer]\n");
        let o = &self.optim;
        kv(&mut s, "lr_max", &fmt_f64(o.schedule.lr_max));
        kv(&mut s, "lr_min", &fmt_f64(o.schedule.lr_min));
        kv(&mut s, "warmup_epochs", &o.schedule.warmup_epochs.to_string());
        kv(&mut s, "total_epochs", &o.schedule.total_epochs.to_string());
        kv(&mut s, "batch_size", &o.batch_size.to_string());
        match o.grad_clip {
            Some(c) => kv(&mut s, "grad_clip", &fmt_f64(c)),
            None => kv(&mut s, "grad_clip", "none"),
        }

        s.push_str("\n[experiment]\n");
        let r = &self.run;
        kv(&mut s, "seed", &r.seed.to_string());
        kv(&mut s, "label_fraction", &fmt_f64(r.label_fraction));
        kv(&mut s, "output_dir", &r.output_dir.display().to_string());
        kv(&mut s, "val_selection", r.val_selection.name());
        s
    }

    /// Parse the flat sectioned text form. Fields start from the dataset's
    /// defaults, so partial files are valid.
    pub fn parse(text: &str) -> Result<Self> {
        // First pass: find the dataset name so defaults can seed the rest.
        let mut name = None;
        for (section, key, value, _) in iter_kv(text)? {
            if section == "dataset" && key == "name" {
                name = Some(DatasetName::parse(&value)?);
            }
        }
        let name = name.ok_or_else(|| Error::Config("missing [dataset] name".into()))?;
        let mut cfg = ExperimentConfig::default_for(name);
        cfg.dataset.lag_overrides.clear();

        for (section, key, value, line) in iter_kv(text)? {
            apply_kv(&mut cfg, &section, &key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }
}

fn kv(s: &mut String, key: &str, value: &str) {
    s.push_str(key);
    s.push_str(" = ");
    s.push_str(value);
    s.push('\n');
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Shortest round-trip decimal form.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn iter_kv(text: &str) -> Result<Vec<(String, String, String, usize)>> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {line_no}: malformed section header `{raw}`"))
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line_no}: expected `key = value`, got `{raw}`"))
        })?;
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {line_no}: key `{}` appears before any [section]",
                key.trim()
            )));
        }
        out.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
            line_no,
        ));
    }
    Ok(out)
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{x}` is not a non-negative integer")))
        })
        .collect()
}

fn parse_f64(v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("`{v}` is not a number")))
}

fn parse_usize(v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("`{v}` is not a non-negative integer")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{v}` is not true/false"))),
    }
}

fn apply_kv(cfg: &mut ExperimentConfig, section: &str, key: &str, value: &str) -> Result<()> {
    match section {
        "dataset" => match key {
            "name" => cfg.dataset.name = DatasetName::parse(value)?,
            "path" => cfg.dataset.path = Some(PathBuf::from(value)),
            "has_header" => cfg.dataset.has_header = parse_bool(value)?,
            "quality_column" => cfg.dataset.quality_column = Some(parse_usize(value)?),
            "use_vars" => cfg.dataset.use_vars = parse_usize_list(value)?,
            "lags" => cfg.dataset.lags = parse_usize_list(value)?,
            "synth_rows" => cfg.dataset.synth_rows = parse_usize(value)?,
            "synth_vars" => cfg.dataset.synth_vars = parse_usize(value)?,
            k if k.starts_with("lags_x") => {
                let var: usize = k["lags_x".len()..]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lag-override key `{k}`")))?;
                cfg.dataset.lag_overrides.insert(var, parse_usize_list(value)?);
            }
            other => return unknown(section, other),
        },
        "split" => match key {
            "train" => cfg.split.train = parse_usize(value)?,
            "val" => cfg.split.val = parse_usize(value)?,
            "test" => {
                cfg.split.test = if value == "rest" {
                    None
                } else {
                    Some(parse_usize(value)?)
                }
            }
            other => return unknown(section, other),
        },
        "model" => match key {
            "kind" => cfg.model.kind = ModelKind::parse(value)?,
            "shared" => cfg.model.shared = parse_usize_list(value)?,
            "latent" => cfg.model.latent = parse_usize_list(value)?,
            "regressor" => cfg.model.regressor = parse_usize_list(value)?,
            "generator" => cfg.model.generator = parse_usize_list(value)?,
            "decoder" => {
                cfg.model.decoder = if value == "auto" {
                    None
                } else {
                    Some(parse_usize_list(value)?)
                }
            }
            "activation" => cfg.model.activation = Activation::parse(value)?,
            other => return unknown(section, other),
        },
        "loss" => match key {
            "w_rec" => cfg.loss.weights.rec = parse_f64(value)?,
            "w_kl" => cfg.loss.weights.kl = parse_f64(value)?,
            "w_label" => cfg.loss.weights.label = parse_f64(value)?,
            "w_entropy" => cfg.loss.weights.entropy = parse_f64(value)?,
            "w_pv" => cfg.loss.weights.pv = parse_f64(value)?,
            "w_recon_reg" => cfg.loss.weights.recon_reg = parse_f64(value)?,
            "entropy_sign" => cfg.loss.entropy_sign = EntropySign::parse(value)?,
            other => return unknown(section, other),
        },
        "optimizer" => match key {
            "lr_max" => cfg.optim.schedule.lr_max = parse_f64(value)?,
            "lr_min" => cfg.optim.schedule.lr_min = parse_f64(value)?,
            "warmup_epochs" => cfg.optim.schedule.warmup_epochs = parse_usize(value)?,
            "total_epochs" => cfg.optim.schedule.total_epochs = parse_usize(value)?,
            "batch_size" => cfg.optim.batch_size = parse_usize(value)?,
            "grad_clip" => {
                cfg.optim.grad_clip = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            other => return unknown(section, other),
        },
        "experiment" => match key {
            "seed" => {
                cfg.run.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("`{value}` is not a seed")))?
            }
            "label_fraction" => cfg.run.label_fraction = parse_f64(value)?,
            "output_dir" => cfg.run.output_dir = PathBuf::from(value),
            "val_selection" => cfg.run.val_selection = ValSelection::parse(value)?,
            other => return unknown(section, other),
        },
        other => {
            return Err(Error::Config(format!("unknown section `[{other}]`")));
        }
    }
    Ok(())
}

fn unknown(section: &str, key: &str) -> Result<()> {
    Err(Error::Config(format!(
        "unknown key `{key}` in section [{section}]"
    )))
}

/// Loss-term defaults live with the models; re-exported here so config users
/// see one surface.
pub fn default_loss_options() -> LossOptions {
    LossOptions {
        weights: TermWeights::default(),
        entropy_sign: EntropySign::Minimize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default_for(DatasetName::Debutanizer);
        cfg.run.seed = 7;
        cfg.run.label_fraction = 0.142;
        cfg.model.kind = ModelKind::Fcnn;
        cfg.optim.grad_clip = Some(5.0);
        cfg.dataset.lag_overrides.insert(5, vec![0, 1, 2]);
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_gets_defaults() {
        let text = "[dataset]\nname = synthetic\n\n[experiment]\nseed = 42\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert_eq!(cfg.dataset.synth_rows, 600);
        assert_eq!(cfg.optim.batch_size, 200);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "[dataset]\nname = synthetic\nbogus = 1\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn unknown_section_rejected() {
        let text = "[dataset]\nname = synthetic\n[wat]\nx = 1\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# top comment\n[dataset]\nname = synthetic # trailing\n\n# more\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset.name, DatasetName::Synthetic);
    }

    #[test]
    fn model_sizes_fill_input_width() {
        let mut cfg = ExperimentConfig::default_for(DatasetName::Generic);
        cfg.model.shared = vec![0, 16, 12];
        let sizes = cfg.model_sizes(14).unwrap();
        assert_eq!(sizes.shared, vec![14, 16, 12]);
        assert_eq!(sizes.decoder, vec![6, 12, 16, 14]);
        assert!(cfg.model_sizes(0).is_err());
    }

    #[test]
    fn benchmark_protocol_defaults() {
        let cfg = ExperimentConfig::default_for(DatasetName::Debutanizer);
        assert_eq!(cfg.optim.schedule.lr_max, 0.01);
        assert_eq!(cfg.optim.schedule.lr_min, 0.0001);
        assert_eq!(cfg.optim.schedule.warmup_epochs, 60);
        assert_eq!(cfg.optim.schedule.total_epochs, 300);
        assert_eq!(cfg.optim.batch_size, 200);
        assert_eq!(cfg.model.shared, vec![20, 16, 12]);
        assert_eq!(cfg.model.latent, vec![12, 6, 6]);
        assert_eq!(cfg.model.regressor, vec![12, 6, 1]);
        assert_eq!(cfg.model.generator, vec![2, 2, 6]);
        let sizes = cfg.model_sizes(20).unwrap();
        assert_eq!(sizes.nz(), 6);
    }
}
