//! Run configuration: built-in defaults, then a JSON file of flat dotted keys,
//! then `KANREC_*` environment variables, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use kanrec_core::data::{Column, Format, LoadOptions};
use kanrec_core::model::{LossKind, ModelConfig, ModelKind};
use kanrec_core::train::{TrackSpec, TrainConfig};
use kanrec_core::BaseActivation;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "KANREC_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Auto,
    Csv,
    Tsv,
    Movielens,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub data_format: DataFormat,
    pub data_delimiter: Option<String>,
    pub data_header: bool,
    pub data_user_col: String,
    pub data_item_col: String,
    pub data_rating_col: Option<String>,
    pub data_time_col: Option<String>,
    pub data_min_rating: Option<f64>,
    pub split_ratios: [f64; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
    pub output: PathBuf,
    pub continual_base_fraction: f64,
    pub continual_blocks: usize,
    pub continual_k: usize,
    pub trace: TrackSpec,
    pub trace_enabled: bool,
    pub explain_tau1: f64,
    pub explain_tau2: f64,
    pub explain_top: usize,
    pub explain_sample: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            data_format: DataFormat::Auto,
            data_delimiter: None,
            data_header: false,
            data_user_col: "0".into(),
            data_item_col: "1".into(),
            data_rating_col: None,
            data_time_col: None,
            data_min_rating: None,
            split_ratios: [0.8, 0.1, 0.1],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_ks: vec![10, 20],
            seed: 0,
            output: PathBuf::from("kanrec-out"),
            continual_base_fraction: 0.5,
            continual_blocks: 5,
            continual_k: 20,
            trace: TrackSpec::default(),
            trace_enabled: false,
            explain_tau1: 0.1,
            explain_tau2: 0.09,
            explain_top: 10,
            explain_sample: None,
        }
    }
}

/// Every accepted key. Environment names are `KANREC_` plus the key in upper
/// case with dots replaced by underscores.
pub const KEYS: &[&str] = &[
    "data.path",
    "data.format",
    "data.delimiter",
    "data.header",
    "data.user_col",
    "data.item_col",
    "data.rating_col",
    "data.time_col",
    "data.min_rating",
    "split.ratios",
    "model.kind",
    "model.layers",
    "model.grids",
    "model.order",
    "model.latent",
    "model.activation",
    "model.loss",
    "model.lambda",
    "model.grid_min",
    "model.grid_max",
    "train.batch_size",
    "train.lr",
    "train.epochs",
    "train.patience",
    "train.clip",
    "train.block_epochs",
    "train.select_k",
    "eval.ks",
    "seed",
    "output",
    "continual.base_fraction",
    "continual.blocks",
    "continual.k",
    "trace.enabled",
    "trace.layer",
    "trace.rows",
    "trace.cols",
    "trace.every",
    "explain.tau1",
    "explain.tau2",
    "explain.top",
    "explain.sample",
];

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("invalid value `{value}` for {key}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then_some(v)
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

impl RunConfig {
    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data.path" => self.data_path = optional(value).map(PathBuf::from),
            "data.format" => {
                self.data_format = match value.trim().to_ascii_lowercase().as_str() {
                    "auto" => DataFormat::Auto,
                    "csv" => DataFormat::Csv,
                    "tsv" => DataFormat::Tsv,
                    "movielens" | "ml" => DataFormat::Movielens,
                    _ => return Err(CliError::Config(format!("invalid value `{value}` for {key}"))),
                }
            }
            "data.delimiter" => self.data_delimiter = (!value.is_empty()).then(|| value.to_string()),
            "data.header" => self.data_header = parse_bool(key, value)?,
            "data.user_col" => self.data_user_col = value.trim().to_string(),
            "data.item_col" => self.data_item_col = value.trim().to_string(),
            "data.rating_col" => self.data_rating_col = optional(value).map(str::to_string),
            "data.time_col" => self.data_time_col = optional(value).map(str::to_string),
            "data.min_rating" => self.data_min_rating = optional(value).map(|v| parse(key, v)).transpose()?,
            "split.ratios" => {
                let r: Vec<f64> = parse_list(key, value)?;
                self.split_ratios = r
                    .try_into()
                    .map_err(|_| CliError::Config(format!("{key} needs three comma-separated numbers")))?;
            }
            "model.kind" => self.model.kind = parse::<ModelKind>(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.grids" => self.model.grid_count = parse(key, value)?,
            "model.order" => self.model.spline_order = parse(key, value)?,
            "model.latent" => self.model.latent_dim = parse(key, value)?,
            "model.activation" => self.model.activation = parse::<BaseActivation>(key, value)?,
            "model.loss" => self.model.loss = parse::<LossKind>(key, value)?,
            "model.lambda" => self.model.lambda = parse(key, value)?,
            "model.grid_min" => self.model.grid_min = parse(key, value)?,
            "model.grid_max" => self.model.grid_max = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.train.max_epochs = parse(key, value)?,
            "train.patience" => self.train.patience = parse(key, value)?,
            "train.clip" => self.train.clip_norm = optional(value).map(|v| parse(key, v)).transpose()?,
            "train.block_epochs" => self.train.block_epochs = optional(value).map(|v| parse(key, v)).transpose()?,
            "train.select_k" => self.train.select_k = parse(key, value)?,
            "eval.ks" => self.eval_ks = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output" => self.output = PathBuf::from(value.trim()),
            "continual.base_fraction" => self.continual_base_fraction = parse(key, value)?,
            "continual.blocks" => self.continual_blocks = parse(key, value)?,
            "continual.k" => self.continual_k = parse(key, value)?,
            "trace.enabled" => self.trace_enabled = parse_bool(key, value)?,
            "trace.layer" => {
                self.trace.layer = match optional(value) {
                    None | Some("output") => None,
                    Some(v) => Some(parse(key, v)?),
                }
            }
            "trace.rows" => self.trace.rows = parse(key, value)?,
            "trace.cols" => self.trace.cols = parse(key, value)?,
            "trace.every" => self.trace.every = parse(key, value)?,
            "explain.tau1" => self.explain_tau1 = parse(key, value)?,
            "explain.tau2" => self.explain_tau2 = parse(key, value)?,
            "explain.top" => self.explain_top = parse(key, value)?,
            "explain.sample" => self.explain_sample = optional(value).map(|v| parse(key, v)).transpose()?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Reads a JSON object of flat dotted keys. Arrays become comma lists.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        for (key, v) in &map {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
                Value::Null => String::new(),
                other => scalar_text(other),
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), CliError> {
        self.apply_env_from(|name| std::env::var(name).ok())
    }

    pub fn apply_env_from(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        for key in KEYS {
            if let Some(v) = lookup(&env_name(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn apply_flags<'a>(&mut self, flags: impl IntoIterator<Item = (&'a str, Option<String>)>) -> Result<(), CliError> {
        for (key, value) in flags {
            if let Some(v) = value {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    /// Checks everything a command needs before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        self.train.validate().map_err(|e| CliError::Config(strip(e.to_string())))?;
        let mut model = self.model.clone();
        model.item_count = model.item_count.max(1);
        model.validate().map_err(|e| CliError::Config(strip(e.to_string())))?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return cfg("eval.ks needs at least one positive cutoff".into());
        }
        if self.split_ratios.iter().any(|r| *r < 0.0) || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return cfg(format!("split.ratios must be non-negative and sum to 1, got {:?}", self.split_ratios));
        }
        if !(0.0..1.0).contains(&self.continual_base_fraction) || self.continual_blocks == 0 || self.continual_k == 0 {
            return cfg("continual.base_fraction must lie in [0, 1); continual.blocks and continual.k must be >= 1".into());
        }
        if self.trace.rows == 0 || self.trace.cols == 0 || self.trace.every == 0 {
            return cfg("trace.rows, trace.cols and trace.every must be >= 1".into());
        }
        if self.explain_tau1 < 0.0 || self.explain_tau2 < 0.0 || self.explain_top == 0 {
            return cfg("explain thresholds must be >= 0 and explain.top >= 1".into());
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data_path.as_deref().ok_or_else(|| CliError::Config("no dataset given (--data or data.path)".into()))
    }

    pub fn load_options(&self) -> Result<LoadOptions, CliError> {
        let path = self.data_path()?;
        let format = match self.data_format {
            DataFormat::Auto => match path.extension().and_then(|e| e.to_str()) {
                Some("dat") => DataFormat::Movielens,
                Some("tsv") => DataFormat::Tsv,
                _ => DataFormat::Csv,
            },
            f => f,
        };
        let mut opts = match format {
            DataFormat::Movielens => LoadOptions::movielens(),
            DataFormat::Tsv => LoadOptions { format: Format::Tsv, ..LoadOptions::default() },
            _ => LoadOptions::default(),
        };
        if let Some(d) = &self.data_delimiter {
            opts.delimiter = Some(d.clone());
        }
        opts.has_header = self.data_header;
        opts.user = Column::from(self.data_user_col.as_str());
        opts.item = Column::from(self.data_item_col.as_str());
        if let Some(c) = &self.data_rating_col {
            opts.rating = Some(Column::from(c.as_str()));
        }
        if let Some(c) = &self.data_time_col {
            opts.timestamp = Some(Column::from(c.as_str()));
        }
        opts.min_rating = self.data_min_rating;
        if opts.min_rating.is_some() && opts.rating.is_none() {
            return Err(CliError::Config("data.min_rating needs data.rating_col".into()));
        }
        Ok(opts)
    }

    /// Model configuration for a dataset with `items` items.
    pub fn model_config(&self, items: usize) -> ModelConfig {
        ModelConfig { item_count: items, seed: self.seed, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Drops the library's own error-class prefix so diagnostics stay one class deep.
fn strip(msg: String) -> String {
    msg.strip_prefix("invalid config: ").map(str::to_string).unwrap_or(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("data.format", "tsv"),
            ("data.header", "true"),
            ("split.ratios", "0.7,0.2,0.1"),
            ("model.kind", "mlp"),
            ("model.activation", "tanh"),
            ("model.loss", "bce"),
            ("trace.layer", "output"),
            ("eval.ks", "5,10"),
        ];
        let mut c = RunConfig::default();
        for key in KEYS {
            let v = samples.iter().find(|(k, _)| k == key).map_or("1", |(_, v)| v);
            c.set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert!(c.set("model.nope", "1").is_err());
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"model.latent": 64, "model.layers": 2, "eval.ks": [5, 50], "train.lr": 0.01}"#).unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&file).unwrap();
        c.apply_env_from(|n| (n == "KANREC_MODEL_LAYERS" || n == "KANREC_TRAIN_LR").then(|| "3".to_string())).unwrap();
        c.apply_flags([("train.lr", Some("0.5".to_string())), ("seed", None)]).unwrap();
        assert_eq!(c.model.latent_dim, 64);
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.eval_ks, vec![5, 50]);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("train.batch_size"), "KANREC_TRAIN_BATCH_SIZE");
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        let e = c.set("model.layers", "two").unwrap_err();
        assert!(e.to_string().starts_with("config: "), "{e}");
        c.set("split.ratios", "0.5,0.6,0.1").unwrap();
        assert!(c.validate().is_err());
    }
}
