//! Layered run configuration: a JSON file plus `--set key=value` overrides.
//! Unknown keys are rejected; every command persists its resolved config and
//! the tool version beside its outputs.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use inkdiff_core::denoiser::ModelConfig;
use inkdiff_core::eval::ClassifierConfig;
use inkdiff_core::glyphs::UniverseParams;

use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Parse a config file, apply dotted-path overrides, deserialize strictly.
pub fn load_config<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))
}

fn apply_override(root: &mut serde_json::Value, item: &str) -> Result<(), CliError> {
    let Some((key, raw)) = item.split_once('=') else {
        return Err(CliError::Config(format!(
            "override `{item}` is not of the form key.path=value"
        )));
    };
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(CliError::Config(format!(
                "override `{key}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Write the resolved config and tool version beside command outputs.
pub fn persist_resolved<T: Serialize>(out_dir: &Path, config: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out_dir.display())))?;
    let resolved = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "config": config,
    });
    let path = out_dir.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&resolved).unwrap())
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDatasetConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub universe: UniverseParams,
}

/// Model hyperparameters exposed to training configs; the writer count and
/// image size come from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub num_stages: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_resolutions: Vec<usize>,
    pub num_heads: usize,
    pub writer_embed_dim: usize,
    pub timestep_embed_dim: usize,
    /// Writer-conditional (writer-dependent) training; when false the writer
    /// embedding table reduces to the null row.
    pub writer_conditional: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        let d = ModelConfig::desk_default(0);
        Self {
            num_stages: d.num_stages,
            base_channels: d.base_channels,
            channel_multipliers: d.channel_multipliers,
            blocks_per_stage: d.blocks_per_stage,
            attention_resolutions: d.attention_resolutions,
            num_heads: d.num_heads,
            writer_embed_dim: d.writer_embed_dim,
            timestep_embed_dim: d.timestep_embed_dim,
            writer_conditional: true,
        }
    }
}

impl ModelParams {
    pub fn to_model_config(&self, image_size: usize, writer_count: usize) -> ModelConfig {
        let writers = if self.writer_conditional { writer_count } else { 0 };
        ModelConfig {
            image_size,
            num_stages: self.num_stages,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            blocks_per_stage: self.blocks_per_stage,
            attention_resolutions: self.attention_resolutions.clone(),
            num_heads: self.num_heads,
            writer_count: writers,
            writer_embed_dim: self.writer_embed_dim,
            timestep_embed_dim: self.timestep_embed_dim,
            null_writer_index: writers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingParams {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_prob: f64,
    pub num_diffusion_steps: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 1e-4,
            dropout_prob: 0.1,
            num_diffusion_steps: 1000,
            checkpoint_every: 500,
            log_every: 25,
            train_fraction: 0.75,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub training: TrainingParams,
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub categories: Vec<usize>,
    #[serde(default)]
    pub writer: Option<usize>,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_count() -> usize {
    8
}

fn default_inference_steps() -> usize {
    50
}

fn default_seed() -> u64 {
    17
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateConfig {
    pub checkpoint: PathBuf,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub categories: Vec<usize>,
    pub writer_i: usize,
    pub writer_j: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WriterModeParam {
    Null,
    PerWriter,
    Interpolated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_writer_mode")]
    pub writer_mode: WriterModeParam,
    #[serde(default = "default_lambda")]
    pub interpolation_lambda: f64,
    #[serde(default = "default_spc")]
    pub samples_per_unseen: usize,
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Replace the generator by real held-out unseen images (harness check).
    #[serde(default)]
    pub self_check: bool,
}

fn default_writer_mode() -> WriterModeParam {
    WriterModeParam::PerWriter
}

fn default_lambda() -> f64 {
    0.5
}

fn default_spc() -> usize {
    64
}

fn default_train_fraction() -> f64 {
    0.75
}
