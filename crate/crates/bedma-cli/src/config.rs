//! Run configuration: a TOML file merged with command-line overrides.
//!
//! One file describes a whole run: where the series comes from, how it
//! is split, the model shape, and the optimizer settings. Every field
//! has a default except the data source, so a minimal file is just
//! `[data] source = "synthetic"`. The resolved configuration is echoed
//! into the output directory as `manifest.toml`, which can be fed back
//! through `--config` to reproduce the run.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use bedma::data::SynthKind;
use bedma::model::ModelConfig;
use bedma::training::TrainConfig;
use bedma::Variant;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the series comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synthetic,
    Csv,
}

fn default_kind() -> SynthKind {
    SynthKind::SineNoise
}

fn default_length() -> usize {
    6000
}

fn default_period() -> usize {
    144
}

fn default_noise_std() -> f64 {
    0.05
}

fn default_step_minutes() -> u32 {
    10
}

fn default_train_num() -> usize {
    48
}

fn default_train_den() -> usize {
    61
}

/// Data source and split protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    /// CSV file with `timestamp,road_id,speed` rows (csv source only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Road to select from the CSV (csv source only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road: Option<String>,
    /// Synthetic signal shape (synthetic source only).
    #[serde(default = "default_kind")]
    pub kind: SynthKind,
    #[serde(default = "default_length")]
    pub length: usize,
    /// Samples per synthetic cycle.
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Sampling interval, used to label horizons in minutes.
    #[serde(default = "default_step_minutes")]
    pub step_minutes: u32,
    /// Training fraction numerator; the first `len * num / den` samples
    /// train the model and the rest are held out.
    #[serde(default = "default_train_num")]
    pub train_num: usize,
    #[serde(default = "default_train_den")]
    pub train_den: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SourceKind::Synthetic,
            path: None,
            road: None,
            kind: default_kind(),
            length: default_length(),
            period: default_period(),
            noise_std: default_noise_std(),
            step_minutes: default_step_minutes(),
            train_num: default_train_num(),
            train_den: default_train_den(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match self.source {
            SourceKind::Csv => {
                if self.path.is_none() {
                    return Err(CliError::Config(
                        "data.path is required when data.source is \"csv\"".into(),
                    ));
                }
                if self.road.is_none() {
                    return Err(CliError::Config(
                        "data.road is required when data.source is \"csv\"".into(),
                    ));
                }
            }
            SourceKind::Synthetic => {
                if self.length == 0 {
                    return Err(CliError::Config("data.length must be positive".into()));
                }
                if self.period < 2 {
                    return Err(CliError::Config("data.period must be at least 2".into()));
                }
                if !self.noise_std.is_finite() || self.noise_std < 0.0 {
                    return Err(CliError::Config(
                        "data.noise_std must be finite and nonnegative".into(),
                    ));
                }
            }
        }
        if self.step_minutes == 0 {
            return Err(CliError::Config("data.step_minutes must be positive".into()));
        }
        if self.train_den == 0 || self.train_num == 0 || self.train_num > self.train_den {
            return Err(CliError::Config(
                "data.train_num / data.train_den must be a fraction in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Short label for reports: the road id or the synthetic kind.
    pub fn label(&self) -> String {
        match self.source {
            SourceKind::Csv => self.road.clone().unwrap_or_else(|| "csv".into()),
            SourceKind::Synthetic => self.kind.to_string(),
        }
    }
}

fn default_repeats() -> usize {
    3
}

/// How benchmark repeats are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedMode {
    /// Repeat k trains with `seed + k`.
    #[default]
    Vary,
    /// Every repeat trains with the same seed; deterministic variants
    /// then produce identical rows.
    Fixed,
}

/// Settings for the variant-comparison grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Forecast steps to score, each at most the trained horizon; empty
    /// means every step up to the trained horizon.
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub seed_mode: SeedMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: default_repeats(),
            horizons: Vec::new(),
            seed_mode: SeedMode::default(),
        }
    }
}

impl BenchConfig {
    /// Horizon steps to score for a model trained to `trained` steps.
    pub fn resolved_horizons(&self, trained: usize) -> Vec<usize> {
        if self.horizons.is_empty() {
            (1..=trained).collect()
        } else {
            self.horizons.clone()
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_model() -> ModelConfig {
    ModelConfig::new(Variant::Bedma, 12, 6)
}

/// Everything one run needs, as serialized in `manifest.toml`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data synthesis, initialization, shuffling, and
    /// weight sampling. `train.seed` is always overwritten with this.
    #[serde(default)]
    pub seed: u64,
    /// Directory that receives checkpoints, histories, and reports.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub benchmark: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            data: DataConfig::default(),
            model: default_model(),
            train: TrainConfig::default(),
            benchmark: BenchConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// CSV path; also switches the source to csv.
    pub data: Option<PathBuf>,
    pub road: Option<String>,
    pub variant: Option<String>,
    pub window: Option<usize>,
    pub horizon: Option<usize>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    /// Loads the file (when given), applies `overrides`, revalidates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, overrides: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(path) = &overrides.data {
            self.data.source = SourceKind::Csv;
            self.data.path = Some(path.clone());
        }
        if let Some(road) = &overrides.road {
            self.data.road = Some(road.clone());
        }
        if let Some(name) = &overrides.variant {
            self.model.variant = Variant::from_str(name)
                .map_err(|e| CliError::Config(format!("model.variant: {e}")))?;
        }
        if let Some(window) = overrides.window {
            self.model.window = window;
        }
        if let Some(horizon) = overrides.horizon {
            self.model.horizon = horizon;
        }
        if let Some(epochs) = overrides.epochs {
            self.train.epochs = epochs;
        }
        // One seed drives the whole run.
        self.train.seed = self.seed;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.benchmark.repeats == 0 {
            return Err(CliError::Config("benchmark.repeats must be positive".into()));
        }
        for &hz in &self.benchmark.horizons {
            if hz == 0 || hz > self.model.horizon {
                return Err(CliError::Config(format!(
                    "benchmark.horizons entry {hz} must be between 1 and model.horizon ({})",
                    self.model.horizon
                )));
            }
        }
        Ok(())
    }

    /// The resolved configuration as TOML, written as `manifest.toml`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialize: {e}")))
    }
}
