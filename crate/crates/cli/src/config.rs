//! Run configuration: defaults, TOML file, then command-line flags.

use std::path::Path;

use anyhow::Context;
use flowedit::backbone::ModelConfig;
use flowedit::dataset::Storage;
use flowedit::flow::TrainConfig;
use flowedit::positions::RopeConfig;
use flowedit::sampler::SamplerConfig;
use flowedit::schedule::TimestepDistribution;
use flowedit::toybench::{GenConfig, VOCAB_SIZE};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything a run needs. The top-level `seed` drives data generation,
/// initialization, batching and sampling; section-level seeds are
/// overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                batch_size: 16,
                steps: 12000,
                learning_rate: 3e-3,
                warmup_steps: 200,
                dist: TimestepDistribution::from_alpha(3.0).expect("valid shift"),
                checkpoint_every: 3000,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig { num_steps: 16, guidance_scale: 0.0, ..SamplerConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub examples: usize,
    pub patch: usize,
    pub storage: Storage,
    pub generator: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { examples: 4096, patch: 4, storage: Storage::Raw, generator: GenConfig::recolor() }
    }
}

/// Network shape; latent channels and vocabulary follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub num_heads: usize,
    pub depth_double: usize,
    pub depth_single: usize,
    pub mlp_ratio: f64,
    pub time_embed_dim: usize,
    pub max_text_len: usize,
    pub rope_base: f64,
    /// Rotary dims per `(t, h, w)` axis; derived from the head size when absent.
    pub axis_split: Option<[usize; 3]>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_heads: 2,
            depth_double: 2,
            depth_single: 2,
            mlp_ratio: 4.0,
            time_embed_dim: 64,
            max_text_len: 8,
            rope_base: 10.0,
            axis_split: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, latent_channels: usize) -> Result<ModelConfig, Failure> {
        let mut cfg = ModelConfig::new(
            latent_channels,
            self.model_dim,
            self.num_heads,
            self.depth_double,
            self.depth_single,
            VOCAB_SIZE,
        );
        cfg.mlp_ratio = self.mlp_ratio;
        cfg.time_embed_dim = self.time_embed_dim;
        cfg.max_text_len = self.max_text_len;
        let head_dim = self.model_dim / self.num_heads.max(1);
        cfg.rope = match self.axis_split {
            Some(axis_split) => RopeConfig { head_dim, axis_split, base_freq: self.rope_base },
            None => RopeConfig { base_freq: self.rope_base, ..cfg.rope },
        };
        cfg.validate().map_err(Failure::config)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out single-edit examples.
    pub examples: usize,
    /// Multi-turn drift scripts.
    pub scenes: usize,
    pub turns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { examples: 256, scenes: 64, turns: 5 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Config)?;
        toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(Failure::Config)
    }

    /// Propagates the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<Self, Failure> {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.data.generator.validate().map_err(Failure::config)?;
        self.train.validate().map_err(Failure::config)?;
        self.sampler.validate().map_err(Failure::config)?;
        if self.data.patch == 0 || self.data.examples == 0 {
            return Err(Failure::Config(anyhow::anyhow!("data.patch and data.examples must be >= 1")));
        }
        if self.eval.turns < 2 {
            return Err(Failure::Config(anyhow::anyhow!("eval.turns must be >= 2")));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).context("serializing config").map_err(Failure::Runtime)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default().resolve().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train]\nsteps = 5\n[model]\nmodel_dim = 32\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.model.num_heads, 2);
        assert_eq!(cfg.resolve().unwrap().train.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nstep = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\ndim = 1").is_err());
    }

    #[test]
    fn model_section_builds_valid_config() {
        let cfg = ModelSection::default().build(48).unwrap();
        assert_eq!(cfg.rope.base_freq, 10.0);
        assert_eq!(cfg.rope.head_dim, 32);
        assert!(ModelSection { num_heads: 3, ..ModelSection::default() }.build(48).is_err());
    }
}
