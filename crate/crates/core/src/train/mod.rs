//! Optimization loop, per-timestep evaluation and full-field prediction.
//!
//! Training draws one patch per training field per epoch in a seeded order,
//! runs forward/backward in `f32`, steps Adam, decays the learning rate on
//! validation plateaus and keeps the parameters of the epoch with the lowest
//! validation loss.

mod data;
mod eval;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use data::{
    center_sample, epoch_order, model_inputs, parallel_map, represent, sample_seed, training_sample, worker_count,
};
pub use eval::{
    evaluate, field_predictions, predict_batch, predict_field, EvalScope, Evaluation, MetricsReport, MetricsRow,
    Tiling,
};
pub use optim::{Adam, AdamConfig, BestTracker, PlateauScheduler};

use crate::dataset::{FieldSequence, SamplingStrategy, SequenceSample, TaskKind};
use crate::error::{Error, Result};
use crate::loss::{sequence_with_grad, LossConfig, Overlap};
use crate::nn::checkpoint::OptimizerState;
use crate::nn::{Graph, Mode, ParameterStore, Scalar, Tensor, Var, BN_MOMENTUM};
use crate::raster::InputRepresentation;
use crate::zoo::{rasters_to_tensor, Model, ModelConfig};

/// File names written into a training output directory.
pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ndck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub task: TaskKind,
    pub strategy: SamplingStrategy,
    pub repr: InputRepresentation,
    pub loss: LossConfig,
    /// Random flips, rotation and shift of every training patch.
    pub augment: bool,
    pub seed: u64,
    /// Sample-preparation threads; `None` reads `NDS_NUM_WORKERS`.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 2,
            max_epochs: 200,
            plateau_patience: 10,
            plateau_factor: 10.0,
            task: TaskKind::Detection,
            strategy: SamplingStrategy::default(),
            repr: InputRepresentation::Rgb,
            loss: LossConfig::default(),
            augment: true,
            seed: 0,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("train: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.plateau_patience < 1 {
            return bad("plateau_patience must be >= 1".into());
        }
        if !(self.plateau_factor > 1.0 && self.plateau_factor.is_finite()) {
            return bad(format!("plateau_factor must be > 1, got {}", self.plateau_factor));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        self.adam.validate()?;
        self.strategy.validate()?;
        self.loss.validate()
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(worker_count)
    }

    /// Fails unless `model` reads the channel count this configuration
    /// produces.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        self.check_model_config(model.config())
    }

    /// Flight channels the model reads must match the input representation.
    pub fn check_model_config(&self, model: &ModelConfig) -> Result<()> {
        let want = model.flight_channels();
        if want != self.repr.channels() {
            return Err(Error::Config(format!(
                "model expects {want} channels per flight but representation {:?} has {}",
                self.repr,
                self.repr.channels()
            )));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters at the best epoch.
    pub best: ParameterStore<f32>,
    pub optimizer: OptimizerState,
    /// Path of the best checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Mean over the batch of each sample's training objective (mean focal +
/// dice over the model's outputs, plus the same over supervised
/// intermediates) and the seed gradients for `outputs`.
fn batch_objective<T: Scalar>(
    g: &Graph<'_, T>,
    masks: &[Var],
    aux: &[Var],
    batch: &[SequenceSample],
    cfg: &LossConfig,
) -> (f64, Vec<(Var, Tensor<T>)>) {
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut seeds = Vec::new();
    for group in [masks, aux] {
        if group.is_empty() {
            continue;
        }
        let values: Vec<Vec<f64>> = group.iter().map(|&v| g.value(v).to_f64()).collect();
        let per = values[0].len() / batch.len();
        let mut grads: Vec<Vec<T>> = group.iter().map(|&v| Vec::with_capacity(g.value(v).len())).collect();
        for (s, sample) in batch.iter().enumerate() {
            let preds: Vec<&[f64]> = values.iter().map(|v| &v[s * per..(s + 1) * per]).collect();
            let (loss, sg) = sequence_with_grad(&preds, sample.target.values(), cfg);
            total += loss / n;
            for (dst, sg) in grads.iter_mut().zip(sg) {
                dst.extend(sg.into_iter().map(|x| T::of(x / n)));
            }
        }
        for (&v, gr) in group.iter().zip(grads) {
            seeds.push((v, Tensor::new(g.shape(v), gr)));
        }
    }
    (total, seeds)
}

fn batch_tensors<T: Scalar>(g: &mut Graph<'_, T>, model: &Model, batch: &[SequenceSample]) -> Result<Vec<Var>> {
    let arch = model.arch();
    let per_sample: Vec<Vec<_>> = batch.iter().map(|s| model_inputs(arch, s)).collect();
    (0..arch.input_count())
        .map(|t| {
            let col: Vec<_> = per_sample.iter().map(|s| s[t]).collect();
            Ok(g.input(rasters_to_tensor(&col)?))
        })
        .collect()
}

/// One optimization step on `batch`. Returns the batch loss before the
/// update; a non-finite loss leaves the parameters untouched.
pub fn train_step(
    model: &Model,
    store: &mut ParameterStore<f32>,
    adam: &mut Adam<f32>,
    batch: &[SequenceSample],
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let (loss, grads, stats) = {
        let mut g = Graph::new(store, Mode::Train);
        let inputs = batch_tensors(&mut g, model, batch)?;
        let out = model.forward(&mut g, &inputs)?;
        let (loss, seeds) = batch_objective(&g, &out.masks, &out.aux, batch, loss_cfg);
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = g.backward(&seeds)?;
        (loss, grads, g.running_stat_updates().to_vec())
    };
    store.zero_grad();
    store.accumulate(&grads);
    adam.step(store, lr);
    store.apply_running_stats(&stats, BN_MOMENTUM as f32);
    Ok(loss)
}

/// Validation summary over deterministic samples: mean loss over outputs,
/// and IOU/F1 of the most recent output with pixel counts pooled over all
/// samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScores {
    pub loss: f64,
    pub iou: f64,
    pub f1: f64,
}

pub fn validate_samples(
    model: &Model,
    store: &ParameterStore<f32>,
    samples: &[SequenceSample],
    cfg: &TrainConfig,
) -> Result<ValidationScores> {
    let mut loss = 0.0;
    let mut pooled = Overlap::default();
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let preds = predict_batch(model, store, chunk)?;
        for (sample, masks) in chunk.iter().zip(&preds) {
            let values: Vec<&[f64]> = masks.iter().map(|m| m.values()).collect();
            loss += sequence_with_grad(&values, sample.target.values(), &cfg.loss).0;
            let last = masks.last().expect("at least one output");
            let o = Overlap::count(last.values(), sample.target.values(), cfg.loss.eval_threshold);
            pooled.intersection += o.intersection;
            pooled.predicted += o.predicted;
            pooled.actual += o.actual;
        }
    }
    Ok(ValidationScores {
        loss: loss / samples.len().max(1) as f64,
        iou: pooled.iou(),
        f1: pooled.f1(),
    })
}

fn provenance_of(batch: &[SequenceSample]) -> String {
    batch
        .iter()
        .map(|s| format!("{}@({},{})", s.provenance.field_id, s.provenance.row, s.provenance.col))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains `store` in place. With `out_dir`, the history is appended to
/// [`HISTORY_FILE`] after every epoch and the best parameters (with optimizer
/// state) are written to [`BEST_CHECKPOINT`] whenever validation improves.
/// `observer` sees every epoch record as it is produced.
pub fn train(
    model: &Model,
    store: &mut ParameterStore<f32>,
    train_set: &[FieldSequence],
    val_set: &[FieldSequence],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation(format!(
            "training needs non-empty train and validation splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let workers = cfg.workers();
    let val_samples = parallel_map(val_set.len(), workers, |i| center_sample(&val_set[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut history_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(HISTORY_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let checkpoint = out_dir.map(|d| d.join(BEST_CHECKPOINT));
    let mut adam = Adam::new(cfg.adam, store);
    let mut schedule = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut tracker = BestTracker::default();
    let mut best = store.clone();
    let mut best_optimizer = adam.state();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    // Samples are prepared a few batches at a time to bound memory.
    let group = cfg.batch_size * 8;
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batch_index = 0;
        for (g, fields) in order.chunks(group).enumerate() {
            let samples = parallel_map(fields.len(), workers, |k| {
                let position = g * group + k;
                training_sample(&train_set[fields[k]], cfg, sample_seed(cfg.seed, epoch, position))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            for batch in samples.chunks(cfg.batch_size) {
                let loss = train_step(model, store, &mut adam, batch, &cfg.loss, lr)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_index,
                        provenance: provenance_of(batch),
                    });
                }
                loss_sum += loss * batch.len() as f64;
                batch_index += 1;
            }
        }
        let val = validate_samples(model, store, &val_samples, cfg)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
                provenance: format!("validation over {} center patches", val_samples.len()),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_iou: val.iou,
            val_f1: val.f1,
            lr,
        };
        if let Some((w, path)) = history_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if tracker.observe(epoch, val.loss) {
            best = store.clone();
            best_optimizer = adam.state();
            if let Some(path) = &checkpoint {
                model.to_checkpoint(&best, Some(best_optimizer.clone())).save(path)?;
            }
        }
        schedule.observe(val.loss);
        observer(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        history,
        best_epoch: tracker.best_epoch().expect("at least one epoch"),
        best_val_loss: tracker.best_loss().expect("at least one epoch"),
        best,
        optimizer: best_optimizer,
        checkpoint,
    })
}
