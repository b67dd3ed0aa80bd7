//! Run configuration file: every module default in one TOML document.

use std::path::Path;

use meshquery::model::ModelConfig;
use meshquery::session::DEFAULT_GAP_SECONDS;
use meshquery::synth::SynthProfile;
use meshquery::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub ingest: IngestConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suggest: SuggestConfig,
    pub evaluate: EvaluateConfig,
    pub analyze: AnalyzeConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            ingest: IngestConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            suggest: SuggestConfig::default(),
            evaluate: EvaluateConfig::default(),
            analyze: AnalyzeConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub gap_seconds: u64,
    /// Queries submitted this many times or fewer are removed.
    pub min_query_freq: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            gap_seconds: DEFAULT_GAP_SECONDS,
            min_query_freq: 0,
            max_tokens: 128,
            vocab_size: 1000,
            dev_fraction: 0.05,
            test_fraction: 0.15,
            split_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuggestConfig {
    pub width: usize,
    pub k: usize,
    pub max_len: usize,
}

impl Default for SuggestConfig {
    fn default() -> Self {
        SuggestConfig {
            width: 8,
            k: 5,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Mean BPE embedding from a trained model.
    Model,
    /// Exact word match.
    Onehot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub ks: Vec<usize>,
    pub embedder: EmbedderKind,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            ks: vec![1, 3, 5],
            embedder: EmbedderKind::Model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub k: usize,
    /// Lower bounds of session-length buckets for attention profiles.
    pub length_bounds: Vec<usize>,
    /// Lower bounds of last-query click buckets.
    pub click_bounds: Vec<usize>,
    pub contingency_cap: usize,
    pub baseline: String,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            k: 3,
            length_bounds: vec![2, 3, 4, 5],
            click_bounds: vec![0, 1, 2, 3],
            contingency_cap: 5,
            baseline: "mps".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub sessions: usize,
    pub profile: SynthProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            sessions: 1000,
            profile: SynthProfile::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::input(p, e))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = RunConfig::from_toml(
            "version = 1\n[train]\nbatch_size = 4\nmax_steps = 10\n[model]\nmode = \"vanilla\"\n",
        )
        .unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.max_steps, Some(10));
        assert_eq!(c.train.max_epochs, TrainConfig::default().max_epochs);
        assert_eq!(c.model.mode, meshquery::model::Mode::Vanilla);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nbatch = 4\n"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("colour = 1\n"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("version = 2\n"),
            Err(CliError::Usage(_))
        ));
    }
}
