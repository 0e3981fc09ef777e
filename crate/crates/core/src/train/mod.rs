//! Optimization protocol: AdamW, warmup + cosine schedule, epoch loop with
//! validation-based checkpoint selection, and evaluation metrics.

mod metrics;
mod optim;
mod schedule;

pub use metrics::{
    accuracy, argmax_rows, auroc, average_precision, compute_metrics, f1_macro, mae, MetricName,
    Metrics,
};
pub use optim::{adamw_step, clip_grad_norm, AdamW};
pub use schedule::lr_at;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{bail, Result};
use crate::graph::{BatchLabels, Dataset};
use crate::model::{loss, Model};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graphs per batch during evaluation. Fixed so that evaluation results do
/// not depend on the training batch size.
pub const EVAL_BATCH_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_metric: MetricName,
    pub selection: Selection,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.warmup_epochs > self.epochs {
            bail!(
                Config,
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs,
                self.epochs
            );
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning_rate must be positive, got {}", self.learning_rate);
        }
        if self.weight_decay < 0.0 {
            bail!(Config, "weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.learning_rate, self.warmup_epochs, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    /// Model state after the epoch with the best validation metric.
    pub best: Model<S>,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub val_metric: f64,
    pub test_metric: f64,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Builds batches over `indices` in order and predicts them concurrently.
/// Returns the stacked outputs and matching labels.
pub fn predict_split<S: Scalar>(
    model: &Model<S>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Tensor<f64>, BatchLabels)> {
    if indices.is_empty() {
        bail!(Dataset, "cannot evaluate an empty split");
    }
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|c| {
            let batch = data.batch(c)?;
            Ok((model.predict(&batch)?.output.cast::<f64>(), batch.labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<Tensor<f64>> = parts.iter().map(|p| p.0.clone()).collect();
    let mut labels = parts[0].1.clone();
    for (_, l) in &parts[1..] {
        match (&mut labels, l) {
            (BatchLabels::Regression { values, .. }, BatchLabels::Regression { values: v, .. })
            | (BatchLabels::MultiLabel { values, .. }, BatchLabels::MultiLabel { values: v, .. }) => {
                values.extend_from_slice(v)
            }
            (BatchLabels::Classes(a), BatchLabels::Classes(b))
            | (BatchLabels::NodeClasses(a), BatchLabels::NodeClasses(b)) => a.extend_from_slice(b),
            _ => bail!(Schema, "inconsistent labels across batches"),
        }
    }
    Ok((Tensor::vstack(&outputs)?, labels))
}

/// Loss and metrics of `model` on the given graphs, in eval mode.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Metrics> {
    let (out, labels) = predict_split(model, data, indices, batch_size)?;
    let mut m = compute_metrics(&out, &labels, data.schema.task)?;
    let tape = Tape::<f64>::new();
    m.loss = loss(tape.constant(out), &labels)?.value().item();
    Ok(m)
}

/// One optimizer step on one batch; returns the batch loss.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset,
    indices: &[usize],
    lr: f64,
    opt: &AdamW,
    grad_clip: Option<f64>,
    rng: &mut RngState,
) -> Result<f64> {
    let batch = data.batch(indices)?;
    let tape = Tape::new();
    let bound = model.store.bind(&tape, true);
    let out = model.forward(&tape, &bound, &batch, Mode::Train, rng)?;
    let l = loss(out, &batch.labels)?;
    let value = l.value().item().to_f64_lossy();
    let grads = tape.backward(l)?;
    model.store.load_grads(&bound, &grads);
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut model.store, c);
    }
    adamw_step(&mut model.store, lr, opt)?;
    Ok(value)
}

fn better(sel: Selection, candidate: f64, best: f64) -> bool {
    match sel {
        Selection::Max => candidate > best,
        Selection::Min => candidate < best,
    }
}

/// Runs the epoch loop. `on_epoch` sees every log row as it is produced.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    for (name, split) in [
        ("train", &data.splits.train),
        ("val", &data.splits.val),
        ("test", &data.splits.test),
    ] {
        if split.is_empty() {
            bail!(Dataset, "the {name} split is empty");
        }
    }
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let metric = cfg.eval_metric;
    let score = |m: &Model<S>, split: &[usize]| -> Result<f64> {
        evaluate(m, data, split, EVAL_BATCH_SIZE)?.get(metric)
    };

    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_val = match cfg.selection {
        Selection::Max => f64::NEG_INFINITY,
        Selection::Min => f64::INFINITY,
    };
    let mut best_test = f64::NAN;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = RngState::derived(cfg.seed, epoch as u64);
        let mut order = data.splits.train.clone();
        rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let l = train_step(&mut model, data, chunk, lr, &opt, cfg.grad_clip, &mut rng)?;
            total += l * chunk.len() as f64;
            count += chunk.len();
        }
        let val = score(&model, &data.splits.val)?;
        let test = score(&model, &data.splits.test)?;
        let row = EpochLog {
            epoch,
            lr,
            train_loss: total / count as f64,
            val_metric: val,
            test_metric: test,
        };
        on_epoch(&row);
        log.push(row);
        if best_epoch.is_none() || better(cfg.selection, val, best_val) {
            best = model.clone();
            best_epoch = Some(epoch);
            best_val = val;
            best_test = test;
        }
    }
    if best_epoch.is_none() {
        best_val = score(&best, &data.splits.val)?;
        best_test = score(&best, &data.splits.test)?;
    }
    let steps = model.store.step;
    Ok(TrainOutcome {
        best,
        best_epoch,
        val_metric: best_val,
        test_metric: best_test,
        log,
        steps,
    })
}
