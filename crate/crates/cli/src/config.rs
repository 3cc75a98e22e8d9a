//! Run configuration: a JSON file, flags on top.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use cogtran::model::{ModelConfig, SizePreset};
use cogtran::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

/// Optional changes to a task's preset training configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub size: SizePreset,
    /// explicit architecture; wins over `size`
    pub model: Option<ModelConfig>,
    pub train: TrainOverrides,
    pub data: Option<PathBuf>,
    /// extra corpus for pre-training
    pub reflex_data: Option<PathBuf>,
    pub proto_language: Option<String>,
    pub test_proportion: Option<f64>,
    pub folds: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "reflex".into(),
            size: SizePreset::Tiny,
            model: None,
            train: TrainOverrides::default(),
            data: None,
            reflex_data: None,
            proto_language: None,
            test_proportion: None,
            folds: 10,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Architecture with a placeholder vocabulary size.
    pub fn model_config(&self) -> ModelConfig {
        self.model.unwrap_or_else(|| ModelConfig::preset(self.size, 0))
    }

    pub fn train_config(&self, base: TrainConfig) -> TrainConfig {
        let o = &self.train;
        TrainConfig {
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            epochs: o.epochs.unwrap_or(base.epochs),
            weight_decay: o.weight_decay.unwrap_or(base.weight_decay),
            max_grad_norm: o.max_grad_norm.unwrap_or(base.max_grad_norm),
            seed: self.seed,
        }
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::usage("--data is required (flag or config file)"))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::usage("--out is required (flag or config file)"))
    }
}

/// Flags mirroring [`RunConfig`]; set flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// reflex, proto or pretrain
    #[arg(long)]
    pub task: Option<String>,
    /// model size preset: tiny or small
    #[arg(long)]
    pub size: Option<SizePreset>,
    /// wordlist file or directory of wordlists
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// additional reflex corpus used for pre-training
    #[arg(long)]
    pub reflex_data: Option<PathBuf>,
    /// column holding the proto-language (default: a column named Proto*)
    #[arg(long)]
    pub proto_lang: Option<String>,
    /// fraction of cognate sets held out for testing
    #[arg(long)]
    pub test_prop: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag {
                    c.$($field).+ = v.clone().into();
                })*
            };
        }
        take!(
            task => task,
            size => size,
            data => data,
            reflex_data => reflex_data,
            proto_lang => proto_language,
            test_prop => test_proportion,
            folds => folds,
            seed => seed,
            out => out,
            lr => train.learning_rate,
            batch_size => train.batch_size,
            epochs => train.epochs,
            weight_decay => train.weight_decay,
            max_grad_norm => train.max_grad_norm,
        );
        if let Some(p) = c.test_proportion {
            if !(p > 0.0 && p < 1.0) {
                return Err(CliError::usage(format!("--test-prop must lie strictly between 0 and 1, got {p}")));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"task": "proto", "seed": 3, "train": {"epochs": 5, "batch_size": 8}}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            seed: Some(9),
            lr: Some(0.01),
            ..RunArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.task, "proto");
        assert_eq!(c.seed, 9);
        let t = c.train_config(TrainConfig::proto());
        assert_eq!((t.epochs, t.batch_size, t.learning_rate, t.seed), (5, 8, 0.01, 9));
        assert_eq!(t.weight_decay, TrainConfig::proto().weight_decay);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_proportions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"tsak": "proto"}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        let args = RunArgs {
            test_prop: Some(1.5),
            ..RunArgs::default()
        };
        assert!(matches!(args.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn size_presets() {
        let c = RunConfig {
            size: SizePreset::Small,
            ..RunConfig::default()
        };
        assert_eq!(c.model_config(), ModelConfig::small(0));
    }
}
