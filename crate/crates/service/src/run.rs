//! File-driven training runs for the command line.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use empathy_core::backbone::BackboneBundle;
use empathy_core::corpus::{build_all_examples, load_corpus, Split, TrainingExample};
use empathy_core::trainer::{Trainer, TrainingConfig, TrainingReport};
use serde::{Deserialize, Serialize};

/// Where the initial weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// Pretrained checkpoint directory (config.json, model.safetensors, tokenizer).
    Checkpoint(PathBuf),
    /// Randomly initialized small model with a vocabulary fitted on the training text.
    Tiny { layers: usize, width: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Directory holding `train.csv`, `valid.csv` and `test.csv`.
    pub data_dir: PathBuf,
    pub init: ModelInit,
    #[serde(default)]
    pub max_context_turns: Option<usize>,
    /// Caps the number of training and validation examples, for smoke runs.
    #[serde(default)]
    pub limit_examples: Option<usize>,
    /// Continue from the latest checkpoint under `training.checkpoint_dir` if present.
    #[serde(default)]
    pub resume: bool,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data_dir);
        rebase(&mut cfg.training.checkpoint_dir);
        if let ModelInit::Checkpoint(p) = &mut cfg.init {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn examples(&self, split: Split) -> Result<Vec<TrainingExample>> {
        let conversations = load_corpus(&self.data_dir, split)?;
        let mut examples = build_all_examples(&conversations, self.max_context_turns);
        if let Some(limit) = self.limit_examples {
            examples.truncate(limit);
        }
        Ok(examples)
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainingReport> {
    let train = cfg.examples(Split::Train)?;
    let valid = cfg.examples(Split::Valid)?;
    tracing::info!(train = train.len(), valid = valid.len(), "loaded examples");
    let can_resume = cfg.resume && empathy_core::trainer::latest_checkpoint(&cfg.training.checkpoint_dir)?.is_some();
    let mut trainer = if can_resume {
        let mut t = Trainer::resume(&cfg.training.checkpoint_dir)?;
        let c = t.config_mut();
        c.max_steps = cfg.training.max_steps;
        c.max_epochs = cfg.training.max_epochs;
        tracing::info!(step = t.step(), "resuming");
        t
    } else {
        let bundle = match &cfg.init {
            ModelInit::Checkpoint(dir) => BackboneBundle::load(dir)?,
            ModelInit::Tiny { layers, width, seed } => BackboneBundle::tiny(&train, *layers, *width, *seed)?,
        };
        Trainer::new(bundle, cfg.training.clone())?
    };
    Ok(trainer.run(&train, &valid)?)
}
