//! Model/train configuration with toy and paper-scale presets, plus a flat
//! key = value config file loader. Every key has a default; CLI flags
//! override file values.

use crate::error::{DehazeError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Code embedding dim d.
    pub embed_dim: usize,
    /// Encoder/decoder channel widths at full and half resolution.
    pub base_channels: usize,
    pub mid_channels: usize,
    /// Transformer trunk: width, heads, window size.
    pub trunk_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub predictor_depth: usize,
    pub critic_depth: usize,
    /// Channel width of the frozen perceptual feature net.
    pub feat_channels: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            codebook_size: 128,
            embed_dim: 32,
            base_channels: 16,
            mid_channels: 32,
            trunk_dim: 32,
            heads: 4,
            window: 4,
            predictor_depth: 2,
            critic_depth: 2,
            feat_channels: 16,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            codebook_size: 1024,
            embed_dim: 256,
            base_channels: 64,
            mid_channels: 128,
            trunk_dim: 256,
            heads: 8,
            window: 8,
            predictor_depth: 24,
            critic_depth: 12,
            feat_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.embed_dim < 1 {
            return Err(DehazeError::Config("codebook_size >= 2, embed_dim >= 1".into()));
        }
        if self.trunk_dim % self.heads != 0 {
            return Err(DehazeError::Config("trunk_dim must divide by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vqgan,
    Predictor,
    Critic,
}

impl std::str::FromStr for Stage {
    type Err = DehazeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqgan" => Ok(Stage::Vqgan),
            "predictor" => Ok(Stage::Predictor),
            "critic" => Ok(Stage::Critic),
            other => Err(DehazeError::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta_commit: f64,
    pub lambda_g: f64,
    pub lambda_adv: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Steps a code may go unmatched before revival.
    pub dead_code_steps: u64,
}

impl TrainConfig {
    pub fn toy(stage: Stage) -> Self {
        let max_steps = match stage {
            Stage::Vqgan => 2000,
            Stage::Predictor => 1000,
            Stage::Critic => 300,
        };
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_steps,
            beta_commit: 0.25,
            lambda_g: 0.1,
            lambda_adv: 0.1,
            temperature: 2.0,
            seed: 0,
            dead_code_steps: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(DehazeError::Config("positive learning rate and batch size".into()));
        }
        if self.temperature <= 0.0 {
            return Err(DehazeError::Config("temperature must be > 0".into()));
        }
        if self.beta_commit < 0.0 || self.lambda_g < 0.0 || self.lambda_adv < 0.0 {
            return Err(DehazeError::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Parse a flat `key = value` file ('#' starts a comment). Unknown keys are
/// rejected so typos fail loudly.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DehazeError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Apply a flat config file on top of defaults.
pub fn load_config(
    path: &Path,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    for (k, v) in parse_flat(&text)? {
        apply_key(model, train, &k, &v)?;
    }
    model.validate()?;
    train.validate()
}

pub fn apply_key(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    key: &str,
    value: &str,
) -> Result<()> {
    macro_rules! parse {
        () => {
            value
                .parse()
                .map_err(|_| DehazeError::Config(format!("bad value '{value}' for {key}")))?
        };
    }
    match key {
        "codebook_size" => model.codebook_size = parse!(),
        "embed_dim" => model.embed_dim = parse!(),
        "base_channels" => model.base_channels = parse!(),
        "mid_channels" => model.mid_channels = parse!(),
        "trunk_dim" => model.trunk_dim = parse!(),
        "heads" => model.heads = parse!(),
        "window" => model.window = parse!(),
        "predictor_depth" => model.predictor_depth = parse!(),
        "critic_depth" => model.critic_depth = parse!(),
        "feat_channels" => model.feat_channels = parse!(),
        "learning_rate" => train.learning_rate = parse!(),
        "batch_size" => train.batch_size = parse!(),
        "max_steps" => train.max_steps = parse!(),
        "beta_commit" => train.beta_commit = parse!(),
        "lambda_g" => train.lambda_g = parse!(),
        "lambda_adv" => train.lambda_adv = parse!(),
        "temperature" => train.temperature = parse!(),
        "seed" => train.seed = parse!(),
        "dead_code_steps" => train.dead_code_steps = parse!(),
        other => {
            return Err(DehazeError::Config(format!("unknown config key '{other}'")));
        }
    }
    Ok(())
}
