//! Experiment configuration: a TOML file plus `--key.path=value` overrides.

use std::path::{Path, PathBuf};

use attnrobust_core::adversarial::{AdvConfig, Variant};
use attnrobust_core::data::CorpusFormat;
use attnrobust_core::model::ScoreKind;
use attnrobust_core::training::TrainSettings;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_seeds() -> Vec<u64> {
    vec![13, 21, 42, 87, 100]
}

fn default_epsilon_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 30.0]
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

fn default_epsilon() -> f64 {
    1.0
}

fn default_vat_xi() -> f64 {
    1.0
}

fn default_vat_power_iters() -> usize {
    1
}

fn default_heatmap_examples() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_embed")]
    pub embed_dim: usize,
    #[serde(default = "ModelSection::default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "ModelSection::default_attn")]
    pub attn_dim: usize,
    #[serde(default = "ModelSection::default_score")]
    pub score: ScoreKind,
}

impl ModelSection {
    fn default_embed() -> usize {
        100
    }
    fn default_hidden() -> usize {
        128
    }
    fn default_attn() -> usize {
        64
    }
    fn default_score() -> ScoreKind {
        ScoreKind::Additive
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: Self::default_embed(),
            hidden_dim: Self::default_hidden(),
            attn_dim: Self::default_attn(),
            score: Self::default_score(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "TrainingSection::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainingSection::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainingSection::default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "TrainingSection::default_patience")]
    pub patience: usize,
    #[serde(default = "TrainingSection::default_lambda")]
    pub lambda_adv: f64,
    #[serde(default = "TrainingSection::default_lambda")]
    pub lambda_vat: f64,
    #[serde(default = "TrainingSection::default_min_freq")]
    pub min_freq: usize,
    #[serde(default = "TrainingSection::default_t_max")]
    pub t_max: usize,
}

impl TrainingSection {
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_batch() -> usize {
        32
    }
    fn default_epochs() -> usize {
        30
    }
    fn default_patience() -> usize {
        5
    }
    fn default_lambda() -> f64 {
        1.0
    }
    fn default_min_freq() -> usize {
        2
    }
    fn default_t_max() -> usize {
        64
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: Self::default_lr(),
            batch_size: Self::default_batch(),
            max_epochs: Self::default_epochs(),
            patience: Self::default_patience(),
            lambda_adv: Self::default_lambda(),
            lambda_vat: Self::default_lambda(),
            min_freq: Self::default_min_freq(),
            t_max: Self::default_t_max(),
        }
    }
}

/// One experiment: a corpus, a variant, a seed battery, and output paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    pub variant: Variant,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_vat_xi")]
    pub vat_xi: f64,
    #[serde(default = "default_vat_power_iters")]
    pub vat_power_iters: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epsilon_grid")]
    pub epsilon_grid: Vec<f64>,
    pub output_dir: PathBuf,
    /// How many test examples get rendered into heatmaps.html.
    #[serde(default = "default_heatmap_examples")]
    pub heatmap_examples: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
}

impl ExperimentConfig {
    /// Parse a TOML file and apply `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| {
            CliError::validation(format!("config {}: {e}", path.display()))
        })?;
        for raw in overrides {
            apply_override(&mut value, raw)?;
        }
        let config: ExperimentConfig = value.try_into().map_err(|e| {
            CliError::validation(format!("config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.corpus_dir.is_dir() {
            return Err(CliError::validation(format!(
                "corpus_dir: {} is not a directory",
                self.corpus_dir.display()
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::validation("seeds: at least one seed required"));
        }
        if self.variant != Variant::Vanilla && self.epsilon <= 0.0 {
            return Err(CliError::validation(format!(
                "epsilon: must be > 0 for variant {}, got {}",
                self.variant.as_str(),
                self.epsilon
            )));
        }
        self.settings_for_seed(self.seeds[0])
            .validate()
            .map_err(|e| CliError::validation(e.to_string()))?;
        Ok(())
    }

    /// Grid validation for the sweep command.
    pub fn validate_grid(grid: &[f64]) -> Result<(), CliError> {
        if grid.is_empty() {
            return Err(CliError::validation("epsilon grid: must be nonempty"));
        }
        for (i, &e) in grid.iter().enumerate() {
            if !(e > 0.0) {
                return Err(CliError::validation(format!(
                    "epsilon grid: entry {i} is {e}, must be > 0"
                )));
            }
            if grid[..i].contains(&e) {
                return Err(CliError::validation(format!(
                    "epsilon grid: duplicate value {e}"
                )));
            }
        }
        Ok(())
    }

    /// Core training settings for one seed of this experiment.
    pub fn settings_for_seed(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            score_kind: self.model.score,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            attn_dim: self.model.attn_dim,
            adv: AdvConfig {
                variant: self.variant,
                epsilon: self.epsilon,
                vat_xi: self.vat_xi,
                vat_power_iters: self.vat_power_iters,
            },
            lambda_adv: self.training.lambda_adv,
            lambda_vat: self.training.lambda_vat,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            max_epochs: self.training.max_epochs,
            patience: self.training.patience,
            min_freq: self.training.min_freq,
            t_max: self.training.t_max,
            seed,
            divergence_threshold: 1e3,
        }
    }
}

/// Apply one `key.path=value` override onto the parsed TOML tree. The value
/// side is parsed as TOML and falls back to a plain string.
fn apply_override(root: &mut toml::Value, raw: &str) -> Result<(), CliError> {
    let stripped = raw.strip_prefix("--").unwrap_or(raw);
    let (key, value) = stripped.split_once('=').ok_or_else(|| {
        CliError::validation(format!("override {raw:?} is not of the form key=value"))
    })?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("x = {value}")) {
        Ok(mut table) => table.remove("x").expect("x was just inserted"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            CliError::validation(format!("override {raw:?}: {part} is not a table"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    unreachable!("loop returns on the last component")
}
