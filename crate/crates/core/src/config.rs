//! Flat run configuration for the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::maa::MaaConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "XLTT_SEED";

/// Every training hyperparameter plus data locations, as one flat table.
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub pivot_unk_rate: f64,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub embed_std: f64,
    pub maa_enabled: bool,
    pub maa_heads: usize,
    pub maa_scaled: bool,
    pub auxiliary_loss: bool,
    pub max_answer_len: usize,

    /// Language tag of the pivot member.
    pub pivot_language: String,
    /// Auxiliary languages as `LANG=PROVIDER`, in member order.
    pub providers: Vec<String>,
    /// Parallel-corpus files to train on.
    pub corpora: Vec<PathBuf>,
    /// Similarity report to take dataset weights from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub uniform_weights: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_train_config(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train_config(t: &TrainConfig) -> Self {
        let m = &t.model;
        RunConfig {
            seed: t.seed,
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            max_grad_norm: t.max_grad_norm,
            pivot_unk_rate: t.pivot_unk_rate,
            hidden: m.encoder.hidden,
            layers: m.encoder.layers,
            heads: m.encoder.heads,
            max_len: m.encoder.max_len,
            embed_std: m.encoder.embed_std,
            maa_enabled: m.maa.enabled,
            maa_heads: m.maa.heads,
            maa_scaled: m.maa.scaled,
            auxiliary_loss: m.auxiliary_loss,
            max_answer_len: m.max_answer_len,
            pivot_language: "en".into(),
            providers: Vec::new(),
            corpora: Vec::new(),
            weights: None,
            uniform_weights: false,
            out_dir: PathBuf::from("run"),
        }
    }

    /// Training config for a vocabulary and auxiliary count known only
    /// once the corpora are read.
    pub fn train_config(&self, vocab_size: usize, auxiliaries: usize) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            max_grad_norm: self.max_grad_norm,
            pivot_unk_rate: self.pivot_unk_rate,
            model: ModelConfig {
                encoder: EncoderConfig {
                    hidden: self.hidden,
                    layers: self.layers,
                    heads: self.heads,
                    max_len: self.max_len,
                    vocab_size,
                    embed_std: self.embed_std,
                },
                maa: MaaConfig {
                    heads: self.maa_heads,
                    scaled: self.maa_scaled,
                    enabled: self.maa_enabled,
                },
                auxiliaries,
                auxiliary_loss: self.auxiliary_loss,
                max_answer_len: self.max_answer_len,
            },
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        RunConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `XLTT_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Writes the resolved config as `resolved-config.toml` under `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join("resolved-config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_training_defaults() {
        let t = RunConfig::default().train_config(10, 2);
        let mut expected = TrainConfig::default();
        expected.model.encoder.vocab_size = 10;
        assert_eq!(t, expected);
    }

    #[test]
    fn echo_reparses_identically() {
        let mut c = RunConfig::default();
        c.lr0 = 3e-3;
        c.max_grad_norm = Some(1.0);
        c.providers = vec!["xa=cipher:11".into()];
        c.corpora = vec!["a.jsonl".into(), "b.jsonl".into()];
        c.weights = Some("w.json".into());
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, "echo").unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml().unwrap(), "echo").unwrap(), d);
    }

    #[test]
    fn partial_files_and_unknown_keys() {
        let c = RunConfig::from_toml("lr0 = 0.001\nlayers = 1\n", "x").unwrap();
        assert_eq!((c.lr0, c.layers, c.hidden), (0.001, 1, 32));
        let err = RunConfig::from_toml("learning_rate = 0.1\n", "x.toml").unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "x.toml"), "{err}");
    }
}
