//! Finetuning loop: seeded epoch shuffling, AdamW with gradient clipping,
//! periodic validation perplexity, early stopping and resumable checkpoints.

mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, AdamWParams};

use crate::backbone::{BackboneBundle, TokenizedExample};
use crate::corpus::TrainingExample;
use crate::error::{Error, IoContext, Result};
use crate::metrics::perplexity;
use crate::objectives::{combine, empathy_loss, lm_loss, sentiment_loss, LossBreakdown, LossWeights};

pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "trainer_state.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.json";

fn default_lr() -> f64 {
    2e-5
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    4
}
fn default_max_epochs() -> usize {
    10
}
fn default_eval_every() -> usize {
    1000
}
fn default_patience() -> Option<usize> {
    Some(3)
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}
fn default_eval_batch_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Validation and checkpoint interval in optimizer steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Evaluations without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Keep every checkpoint instead of only the best and the latest.
    #[serde(default)]
    pub keep_all_checkpoints: bool,
}

impl TrainingConfig {
    pub fn new(checkpoint_dir: impl Into<PathBuf>) -> Self {
        TrainingConfig {
            weights: LossWeights::default(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            eval_every: default_eval_every(),
            seed: 0,
            checkpoint_dir: checkpoint_dir.into(),
            max_steps: None,
            patience: default_patience(),
            grad_clip: default_grad_clip(),
            eval_batch_size: default_eval_batch_size(),
            keep_all_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn optimizer_params(&self) -> AdamWParams {
        AdamWParams {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWParams::default()
        }
    }
}

/// One optimizer step as written to the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_lm: f64,
    pub l_sent: f64,
    pub l_sim: f64,
    pub total: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ppl: Option<f64>,
}

impl StepLog {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_lm: self.l_lm,
            l_sent: self.l_sent,
            l_sim: self.l_sim,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub val_ppl: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_ppl: Option<f64>,
    pub stopped_early: bool,
    pub final_step: usize,
}

/// Loop position and bookkeeping needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub epoch: usize,
    /// Example order of the current epoch; empty before the first epoch.
    pub order: Vec<usize>,
    /// Next batch within `order`.
    pub cursor: usize,
    pub rng: ChaCha8Rng,
    pub best_val_ppl: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub evals_since_best: usize,
}

impl TrainerState {
    fn new(seed: u64) -> Self {
        TrainerState {
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_val_ppl: None,
            best_checkpoint: None,
            evals_since_best: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    config: TrainingConfig,
    optimizer: AdamWParams,
    optimizer_steps: u64,
    state: TrainerState,
}

#[derive(Debug, Serialize, Deserialize)]
struct BestFile {
    step: usize,
    val_ppl: f64,
    checkpoint: PathBuf,
}

pub struct Trainer {
    config: TrainingConfig,
    bundle: BackboneBundle,
    optimizer: AdamW,
    state: TrainerState,
}

impl Trainer {
    pub fn new(mut bundle: BackboneBundle, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        bundle.record_loss_weights(config.weights);
        Ok(Trainer {
            optimizer: AdamW::new(config.optimizer_params()),
            state: TrainerState::new(config.seed),
            config,
            bundle,
        })
    }

    /// Restores a run from a checkpoint directory, or from the latest
    /// checkpoint under a run directory.
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let dir = resolve_checkpoint(path.as_ref())?;
        let state_path = dir.join(STATE_FILE);
        let file: StateFile = serde_json::from_slice(&fs::read(&state_path).with_path(&state_path)?)?;
        let bundle = BackboneBundle::load(&dir)?;
        let optimizer = AdamW::load(&dir.join(OPTIMIZER_FILE), file.optimizer, file.optimizer_steps)?;
        file.config.validate()?;
        Ok(Trainer {
            config: file.config,
            bundle,
            optimizer,
            state: file.state,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Mutable access for changing the stopping budget after a resume.
    pub fn config_mut(&mut self) -> &mut TrainingConfig {
        &mut self.config
    }

    pub fn bundle(&self) -> &BackboneBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> BackboneBundle {
        self.bundle
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    /// Computes the loss on one batch, backpropagates and updates.
    pub fn train_step(&mut self, items: &[&TokenizedExample]) -> Result<StepLog> {
        let step = self.state.step + 1;
        let batch = self.bundle.collate(items)?;
        let out = self.bundle.forward(&batch)?;
        let l_lm = lm_loss(&out.token_logits, &batch.target_ids, &batch.target_mask)?;
        let l_sent = sentiment_loss(&out.sentiment_logits, &batch.labels)?;
        let l_sim = empathy_loss(&out.context_features, &out.response_features)?;
        let combined = combine(&l_lm, &l_sent, &l_sim, &self.config.weights).map_err(|e| match e {
            Error::NonFiniteLoss { l_lm, l_sent, l_sim, .. } => Error::NonFiniteLoss {
                step,
                l_lm,
                l_sent,
                l_sim,
            },
            other => other,
        })?;
        let grads = combined.total.backward()?;
        let grad_norm = self.optimizer.step(self.bundle.params(), &grads, self.config.grad_clip)?;
        self.state.step = step;
        let b = combined.breakdown;
        Ok(StepLog {
            step,
            epoch: self.state.epoch,
            l_lm: b.l_lm,
            l_sent: b.l_sent,
            l_sim: b.l_sim,
            total: b.total,
            grad_norm,
            val_ppl: None,
        })
    }

    /// Advances to the next batch, starting a new shuffled epoch when the
    /// current one is exhausted. Returns `None` once `max_epochs` are done.
    fn next_batch(&mut self, n: usize) -> Option<Vec<usize>> {
        let bs = self.config.batch_size;
        if self.state.order.is_empty() || self.state.cursor * bs >= self.state.order.len() {
            if !self.state.order.is_empty() {
                self.state.epoch += 1;
            }
            if self.state.epoch >= self.config.max_epochs {
                return None;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.state.rng);
            self.state.order = order;
            self.state.cursor = 0;
        }
        let start = self.state.cursor * bs;
        let end = (start + bs).min(self.state.order.len());
        self.state.cursor += 1;
        Some(self.state.order[start..end].to_vec())
    }

    /// Runs until `max_epochs`, `max_steps` or early stopping. Validation
    /// perplexity is measured every `eval_every` steps and after the final
    /// step; each measurement writes a checkpoint.
    pub fn run(&mut self, train: &[TrainingExample], valid: &[TrainingExample]) -> Result<TrainingReport> {
        self.config.validate()?;
        let mut report = TrainingReport {
            best_checkpoint: self.state.best_checkpoint.clone(),
            best_val_ppl: self.state.best_val_ppl,
            final_step: self.state.step,
            ..TrainingReport::default()
        };
        if self.config.max_epochs == 0 {
            return Ok(report);
        }
        if train.is_empty() || valid.is_empty() {
            return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
        }
        if !self.state.order.is_empty() && self.state.order.len() != train.len() {
            return Err(Error::InvalidInput(format!(
                "resumed run expects {} training examples, got {}",
                self.state.order.len(),
                train.len()
            )));
        }
        let tokenized = train
            .iter()
            .map(|e| self.bundle.tokenize_example(e))
            .collect::<Result<Vec<_>>>()?;
        let dir = self.config.checkpoint_dir.clone();
        fs::create_dir_all(&dir).with_path(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let mut log = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .with_path(&log_path)?,
        );

        loop {
            if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let Some(indices) = self.next_batch(tokenized.len()) else {
                break;
            };
            let items: Vec<&TokenizedExample> = indices.iter().map(|&i| &tokenized[i]).collect();
            let mut entry = self.train_step(&items)?;
            let mut stop = false;
            if self.state.step % self.config.eval_every == 0 || self.exhausted() {
                let eval = self.evaluate_and_checkpoint(valid)?;
                entry.val_ppl = Some(eval.val_ppl);
                report.evals.push(eval);
                stop = self.patience_exhausted();
            }
            write_log_line(&mut log, &log_path, &entry)?;
            report.steps.push(entry);
            if stop {
                report.stopped_early = true;
                break;
            }
        }
        log.flush().with_path(&log_path)?;
        report.best_checkpoint = self.state.best_checkpoint.clone();
        report.best_val_ppl = self.state.best_val_ppl;
        report.final_step = self.state.step;
        tracing::info!(
            step = report.final_step,
            best_val_ppl = ?report.best_val_ppl,
            "training finished"
        );
        Ok(report)
    }

    /// True when no further step will be taken by `run`.
    fn exhausted(&self) -> bool {
        let budget_spent = self.config.max_steps.is_some_and(|m| self.state.step >= m);
        let last_epoch_done = self.state.cursor * self.config.batch_size >= self.state.order.len()
            && self.state.epoch + 1 >= self.config.max_epochs;
        budget_spent || last_epoch_done
    }

    fn patience_exhausted(&self) -> bool {
        self.config
            .patience
            .is_some_and(|p| self.state.evals_since_best >= p)
    }

    fn evaluate_and_checkpoint(&mut self, valid: &[TrainingExample]) -> Result<EvalLog> {
        let val_ppl = perplexity(&self.bundle, valid, self.config.eval_batch_size)?;
        let step = self.state.step;
        let improved = self.state.best_val_ppl.is_none_or(|best| val_ppl < best);
        let path = self.config.checkpoint_dir.join(checkpoint_name(step));
        if improved {
            self.state.best_val_ppl = Some(val_ppl);
            self.state.best_checkpoint = Some(path.clone());
            self.state.evals_since_best = 0;
        } else {
            self.state.evals_since_best += 1;
        }
        self.save_checkpoint(&path)?;
        if improved {
            let best = BestFile {
                step,
                val_ppl,
                checkpoint: path.clone(),
            };
            let best_path = self.config.checkpoint_dir.join(BEST_FILE);
            fs::write(&best_path, serde_json::to_vec_pretty(&best)?).with_path(&best_path)?;
        }
        if !self.config.keep_all_checkpoints {
            self.prune_checkpoints(&path)?;
        }
        tracing::info!(step, val_ppl, improved, "validation");
        Ok(EvalLog {
            step,
            val_ppl,
            checkpoint: path,
        })
    }

    /// Writes model, optimizer and loop state into `path`, atomically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let parent = path.parent().unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let tmp = parent.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).with_path(&tmp)?;
        }
        self.bundle.save(&tmp)?;
        self.optimizer.save(&tmp.join(OPTIMIZER_FILE))?;
        let state = StateFile {
            config: self.config.clone(),
            optimizer: *self.optimizer.hyper_params(),
            optimizer_steps: self.optimizer.step_count(),
            state: self.state.clone(),
        };
        let state_path = tmp.join(STATE_FILE);
        fs::write(&state_path, serde_json::to_vec_pretty(&state)?).with_path(&state_path)?;
        if path.exists() {
            fs::remove_dir_all(path).with_path(path)?;
        }
        fs::rename(&tmp, path).with_path(path)?;
        Ok(())
    }

    fn prune_checkpoints(&self, latest: &Path) -> Result<()> {
        let best = self.state.best_checkpoint.as_deref();
        for candidate in checkpoint_dirs(&self.config.checkpoint_dir)? {
            if candidate != latest && Some(candidate.as_path()) != best {
                fs::remove_dir_all(&candidate).with_path(&candidate)?;
            }
        }
        Ok(())
    }
}

fn write_log_line<T: Serialize>(log: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *log, value)?;
    log.write_all(b"\n").with_path(path)?;
    log.flush().with_path(path)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:08}")
}

fn checkpoint_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    if !run_dir.is_dir() {
        return Ok(dirs);
    }
    for entry in fs::read_dir(run_dir).with_path(run_dir)? {
        let path = entry.with_path(run_dir)?.path();
        let is_ckpt = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("step-"));
        if is_ckpt && path.join(STATE_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    checkpoint_dirs(path)?.pop().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "no resumable checkpoint found".into(),
    })
}

/// Most recent complete checkpoint under a run directory, if any.
pub fn latest_checkpoint(run_dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    Ok(checkpoint_dirs(run_dir.as_ref())?.pop())
}

/// Best checkpoint recorded under a run directory, if any.
pub fn best_checkpoint(run_dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let path = run_dir.as_ref().join(BEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let best: BestFile = serde_json::from_slice(&fs::read(&path).with_path(&path)?)?;
    Ok(Some(best.checkpoint))
}

/// Trains `bundle` on `train`, selecting by validation perplexity.
pub fn finetune(
    bundle: BackboneBundle,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: TrainingConfig,
) -> Result<(BackboneBundle, TrainingReport)> {
    let mut trainer = Trainer::new(bundle, config)?;
    let report = trainer.run(train, valid)?;
    Ok((trainer.into_bundle(), report))
}
