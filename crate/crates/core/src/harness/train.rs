use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::early_stop::EarlyStopping;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::SplitSet;
use crate::model::gpnn::derive_seed;
use crate::model::{argmax_rows, ForwardOptions, Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub split_id: usize,
    /// 1-based epoch whose parameters were restored; 0 when no epoch finished.
    pub best_epoch: usize,
    pub train_curve: Vec<EpochRecord>,
    pub val_loss: Option<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub config: ModelConfig,
    pub wall_time_s: f64,
    /// Diagnostic when the run diverged.
    pub aborted: Option<String>,
}

impl RunResult {
    pub fn last_epoch(&self) -> usize {
        self.train_curve.last().map_or(0, |r| r.epoch)
    }

    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        RunResult {
            wall_time_s: 0.0,
            ..self.clone()
        } == RunResult {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize], subset: &[usize]) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let hits = subset.iter().filter(|&&i| predictions[i] == labels[i]).count();
    hits as f64 / subset.len() as f64
}

/// Validation/test statistics of a set of evaluation-mode logits.
fn evaluate(logits: &Tensor, labels: &[usize], subset: &[usize]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let loss = tape.cross_entropy(l, labels, subset)?;
    let acc = accuracy(&argmax_rows(logits), labels, subset);
    Ok((tape.value(loss).data()[0], acc))
}

struct EpochLog(BufWriter<File>);

impl EpochLog {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EpochLog(BufWriter::new(file)))
    }

    fn write(&mut self, split_id: usize, rec: &EpochRecord, path: &Path) -> Result<()> {
        let line = serde_json::json!({
            "split_id": split_id,
            "epoch": rec.epoch,
            "loss": rec.loss,
            "val_loss": rec.val_loss,
            "val_acc": rec.val_acc,
        });
        writeln!(self.0, "{line}")
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place on `split` with Adam and early stopping, restoring
/// the best checkpoint at the end. The loss only ever reads labels of
/// training nodes.
///
/// Divergence (a non-finite value anywhere in a pass) ends the run early and
/// is reported through [`RunResult::aborted`] rather than as an error.
pub fn train_model(
    model: &mut Model,
    labels: &[usize],
    split: &SplitSet,
    log_path: Option<&Path>,
) -> Result<RunResult> {
    let start = Instant::now();
    let cfg = model.config.clone();
    split.validate(labels.len())?;
    let mut log = log_path.map(EpochLog::open).transpose()?;

    let adam = AdamConfig::new(cfg.learning_rate, cfg.weight_decay);
    let mut state = AdamState::new(&model.params.values());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut curve = Vec::new();
    let mut aborted = None;

    for epoch in 1..=cfg.epochs {
        let mut step = || -> Result<EpochRecord> {
            let seed = derive_seed(cfg.seed, &[split.split_id as u64, epoch as u64]);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape)?;
            let out = model.forward_bound(&mut tape, &bound, true, seed, ForwardOptions::default())?;
            let loss = tape.cross_entropy(out.logits, labels, &split.train)?;
            tape.backward(loss)?;
            let grads = model.params.gradients(&tape, &bound)?;
            let loss = tape.value(loss).data()[0];
            drop(tape);
            let grads: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut model.params.values_mut(), &grads, &mut state, &adam)?;
            let (val_loss, val_acc) = evaluate(&model.logits()?, labels, &split.val)?;
            Ok(EpochRecord {
                epoch,
                loss,
                val_loss,
                val_acc,
            })
        };
        let rec = match step() {
            Ok(rec) => rec,
            Err(Error::NonFinite(site)) => {
                aborted = Some(format!("non-finite value in {site} at epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };
        curve.push(rec);
        if let Some(log) = log.as_mut() {
            log.write(split.split_id, &rec, log_path.unwrap())?;
        }
        let (checkpoint, stop) = stopper.observe(epoch, rec.val_loss, rec.val_acc);
        if checkpoint {
            best_params = model.params.clone();
        }
        if stop {
            break;
        }
    }

    model.params = best_params;
    let (test_accuracy, val_loss, val_accuracy) = if stopper.best_epoch().is_some() {
        let logits = model.logits()?;
        let (_, test_acc) = evaluate(&logits, labels, &split.test)?;
        (
            test_acc,
            stopper.best_val_loss(),
            stopper.best_val_accuracy().unwrap_or(0.0),
        )
    } else {
        (0.0, None, 0.0)
    };
    if let Some(reason) = &aborted {
        log::warn!("split {}: run aborted: {reason}", split.split_id);
    }
    Ok(RunResult {
        split_id: split.split_id,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        train_curve: curve,
        val_loss,
        val_accuracy,
        test_accuracy,
        config: cfg,
        wall_time_s: start.elapsed().as_secs_f64(),
        aborted,
    })
}

/// Builds a fresh model for `g` and trains it on one split.
pub fn train_one_split(g: &crate::graph::Graph, split: &SplitSet, cfg: &ModelConfig) -> Result<RunResult> {
    Ok(train_split_model(g, split, cfg, None)?.1)
}

/// Like [`train_one_split`] but also hands back the trained model. The
/// initialization matches the one used by the protocol for this split.
pub fn train_split_model(
    g: &crate::graph::Graph,
    split: &SplitSet,
    cfg: &ModelConfig,
    log_path: Option<&Path>,
) -> Result<(Model, RunResult)> {
    let mut model = Model::new(g, cfg)?;
    model.reinitialize(derive_seed(cfg.seed, &[split.split_id as u64]));
    let run = train_model(&mut model, g.labels(), split, log_path)?;
    Ok((model, run))
}
