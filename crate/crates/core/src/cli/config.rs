use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::CriticConfig;
use crate::generator::GeneratorConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Model sizes that are not implied by the data. The vocabulary size comes
/// from the dataset's vocabulary and the region count and width from its
/// feature grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Generator word embedding width `M`.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    /// Encoded caption length including the begin and end tokens.
    pub max_len: usize,
    pub critic_embed_dim: usize,
    pub critic_windows: Vec<usize>,
    pub critic_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let c = CriticConfig::default();
        Self {
            embed_dim: g.embed_dim,
            hidden_dim: g.hidden_dim,
            attention_dim: g.attention_dim,
            max_len: g.max_len,
            critic_embed_dim: c.embed_dim,
            critic_windows: c.windows,
            critic_filters: c.filters,
        }
    }
}

/// Everything a run needs besides the command-line subcommand. Every field
/// has a default; paths given on the command line take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        // Dimensions are checked through the derived configs with a
        // placeholder vocabulary and region width.
        self.generator_config(RESERVED_VOCAB, 1).validate()?;
        self.critic_config(RESERVED_VOCAB).validate()
    }

    pub fn generator_config(&self, vocab_size: usize, region_dim: usize) -> GeneratorConfig {
        let m = &self.model;
        GeneratorConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            region_dim,
            hidden_dim: m.hidden_dim,
            attention_dim: m.attention_dim,
            max_len: m.max_len,
        }
    }

    pub fn critic_config(&self, vocab_size: usize) -> CriticConfig {
        let m = &self.model;
        CriticConfig {
            vocab_size,
            embed_dim: m.critic_embed_dim,
            windows: m.critic_windows.clone(),
            filters: m.critic_filters,
            seq_len: m.max_len.saturating_sub(1),
            ..CriticConfig::default()
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

const RESERVED_VOCAB: usize = crate::data::RESERVED.len() + 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_unknown_keys_fail() {
        RunConfig::default().validate().unwrap();
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"lambda2": 0.5}}"#).unwrap();
        assert_eq!(cfg.train.lambda2, 0.5);
        assert_eq!(cfg.train.rollouts, 5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"hidden": 3}}"#).is_err());
    }

    #[test]
    fn windows_longer_than_captions_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.max_len = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
