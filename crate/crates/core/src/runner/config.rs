use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SequenceLimits, SyntheticWorldConfig};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, Regime, Task};
use crate::model::{BehaviorEncoderConfig, MaskMode, ModelConfig, UserEncoderConfig};
use crate::pretrain::PretrainConfig;

/// Identifier of the build that produced an output row.
pub const BUILD_ID: &str = env!("PTUM_BUILD_ID");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Words seen fewer times than this map to UNK.
    pub min_freq: usize,
    pub max_title_len: usize,
    pub max_behaviors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let limits = SequenceLimits::default();
        DataConfig {
            min_freq: 30,
            max_title_len: limits.max_title_len,
            max_behaviors: limits.max_behaviors,
        }
    }
}

impl DataConfig {
    pub fn limits(&self) -> SequenceLimits {
        SequenceLimits {
            max_title_len: self.max_title_len,
            max_behaviors: self.max_behaviors,
        }
    }
}

/// Model architecture; the vocabulary size comes from the vocabulary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub behavior: BehaviorEncoderConfig,
    pub user: UserEncoderConfig,
    pub mask_mode: MaskMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            behavior: m.behavior,
            user: m.user,
            mask_mode: m.mask_mode,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            behavior: self.behavior.clone(),
            user: self.user.clone(),
            mask_mode: self.mask_mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small model and fast settings for a laptop CPU.
    Desk,
    /// The published hyperparameters.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub world: SyntheticWorldConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
    pub regimes: Vec<Regime>,
    /// Label fraction used by the lambda / K sweeps.
    pub sweep_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            world: SyntheticWorldConfig::default(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig {
                lr: 3e-3,
                batch_size: 32,
                epochs: 4,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 30,
                ..FinetuneConfig::default()
            },
            label_fractions: vec![0.2, 0.5, 1.0],
            seeds: (0..5).collect(),
            tasks: vec![Task::Demo, Task::Ctr],
            regimes: Regime::ALL.to_vec(),
            sweep_fraction: 1.0,
        }
    }

    pub fn paper() -> Self {
        ExperimentConfig {
            profile: Profile::Paper,
            model: ModelSection {
                behavior: BehaviorEncoderConfig {
                    word_dim: 300,
                    n_heads: 16,
                    head_dim: 16,
                    attn_query_dim: 200,
                    ..BehaviorEncoderConfig::default()
                },
                user: UserEncoderConfig {
                    n_heads: 16,
                    attn_query_dim: 200,
                    ..UserEncoderConfig::default()
                },
                mask_mode: MaskMode::Replace,
            },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig {
                lr: 1e-4,
                batch_size: 64,
                ..FinetuneConfig::default()
            },
            ..ExperimentConfig::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses TOML. Keys absent from the document take the values of the
    /// selected `profile` (desk when unspecified).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match doc.get("profile") {
            None => Profile::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, doc);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.with_vocab(2).validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.max_title_len == 0 || self.data.max_behaviors == 0 {
            return Err(Error::Config("data limits must be positive".into()));
        }
        if self.data.max_behaviors > self.model.user.max_positions {
            return Err(Error::Config(format!(
                "data.max_behaviors ({}) exceeds model.user.max_positions ({})",
                self.data.max_behaviors, self.model.user.max_positions
            )));
        }
        for &f in self.label_fractions.iter().chain([&self.sweep_fraction]) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("label fractions must be in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_desk_profile() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn partial_sections_keep_profile_defaults() {
        let cfg = ExperimentConfig::from_toml_str("profile = \"paper\"\n[pretrain]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.pretrain.lambda, 0.5);
        assert_eq!(cfg.pretrain.lr, 1e-4);
        assert_eq!(cfg.model.behavior.word_dim, 300);
        assert_eq!(cfg.model.with_vocab(10).embedding_dim(), 256);
    }

    #[test]
    fn round_trips_through_toml() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[pretrain]\nlamda = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("label_fractions = [0.0]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("profile = \"huge\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[pretrain\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.pretrain.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
