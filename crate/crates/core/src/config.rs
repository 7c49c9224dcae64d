//! TOML run configuration shared by the command-line tools.
//!
//! ```toml
//! [paths]
//! train = "data/train.jsonl"
//! prototype = "data/prototype.jsonl"
//!
//! [encoder]
//! d_model = 32
//!
//! [train]
//! variant = "proto-lora"
//! seed = 7
//!
//! [lora]
//! rank = 8
//! alpha = 16.0
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::Variant;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub prototype: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub keyword_rules: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Encoder sizes; the vocabulary size comes from the data and pooling from `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Tokens seen fewer times than this map to `[UNK]`.
    pub min_token_frequency: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            ff_dim: e.ff_dim,
            max_len: e.max_len,
            min_token_frequency: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub lora: Option<LoraConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    /// Reads a config file and anchors its relative paths at the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.anchor(dir);
        }
        Ok(cfg)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.encoder.d_model,
            n_layers: self.encoder.n_layers,
            n_heads: self.encoder.n_heads,
            ff_dim: self.encoder.ff_dim,
            vocab_size: 0,
            max_len: self.encoder.max_len,
            pooling: self.train.pooling,
        }
    }

    /// The training config with adapters resolved for the variant: adapter
    /// variants default to the standard adapter settings when `[lora]` is
    /// absent, full-weight variants reject a `[lora]` section, and
    /// post-hoc prototypes follow whichever was given.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.lora = match cfg.variant {
            Variant::ProtoLora | Variant::LoraFt => Some(self.lora.clone().unwrap_or_default()),
            Variant::PostHocProto => self.lora.clone(),
            Variant::ProtoNoLora | Variant::FullFt | Variant::FrozenProto => {
                if self.lora.is_some() {
                    return Err(Error::Config(format!(
                        "variant {:?} does not use adapters; remove the [lora] section",
                        cfg.variant
                    )));
                }
                None
            }
        };
        cfg.validate()?;
        if let Some(l) = &cfg.lora {
            l.validate(self.encoder.d_model)?;
        }
        // Any positive vocabulary size will do here; the real one comes from the data.
        EncoderConfig {
            vocab_size: 5,
            ..self.encoder_config()
        }
        .validate()?;
        if self.encoder.min_token_frequency == 0 {
            return Err(Error::Config("min_token_frequency must be at least 1".into()));
        }
        Ok(cfg)
    }
}

impl Paths {
    fn anchor(&mut self, dir: &Path) {
        for p in [
            &mut self.train,
            &mut self.prototype,
            &mut self.validation,
            &mut self.test,
            &mut self.unlabeled,
            &mut self.keyword_rules,
            &mut self.checkpoint,
            &mut self.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
