//! Run configuration: one TOML file, overridable by flags and `PROPENC_SEED`.

use std::path::Path;

use propenc::synth::SynthConfig;
use propenc::trainer::TrainConfig;
use propenc::{AlignConfig, EncoderConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "PROPENC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    /// Normalized-token containment plus multiset Jaccard.
    Lexical,
    /// External process speaking line-delimited JSON.
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub threshold: f64,
    /// Program and arguments for `kind = "command"`.
    pub command: Vec<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Lexical,
            threshold: 0.8,
            command: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    /// Propositions fetched per requested group before propagation.
    pub over_retrieval: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 20,
            over_retrieval: propenc::index::DEFAULT_OVER_RETRIEVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the synthetic generator, the split and training.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub oracle: OracleConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            oracle: OracleConfig::default(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`; the seed override is applied either way.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(cfg.resolved())
    }

    /// Copies the top-level seed into the sections that use one.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serializable")
    }

    /// SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}
