use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::FeatureSet;
use super::PipelineError;
use crate::models::Model;
use crate::tensor_nn::{softmax_cross_entropy, AdamConfig, AdamState, Layer, Mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
}

/// Per-epoch mean training loss and, when an eval set is given, accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub loss_curve: Vec<f64>,
    pub eval_accuracy: Vec<f64>,
}

/// Batch loss: `(logits, row indices into the training set) -> (loss, dL/dlogits)`.
pub type LossFn<'a> = dyn FnMut(&Tensor, &[usize]) -> Result<(f64, Tensor), PipelineError> + 'a;

/// Adam over shuffled mini-batches. A non-finite loss aborts the run.
pub fn fit_with(
    model: &mut Model,
    train: &FeatureSet,
    opts: &TrainOptions,
    eval: Option<&FeatureSet>,
    loss_fn: &mut LossFn<'_>,
) -> Result<History, PipelineError> {
    let mut history = History::default();
    if opts.epochs == 0 {
        return Ok(history);
    }
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(opts.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(opts.batch_size) {
            for p in model.params_mut() {
                p.zero_grad();
            }
            let x = train.batch(idx);
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = loss_fn(&logits, idx)?;
            if !loss.is_finite() {
                return Err(PipelineError::Numeric(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            total += loss * idx.len() as f64;
            model.backward(&grad)?;
            adam.step(&mut model.params_mut())?;
        }
        history.loss_curve.push(total / train.len() as f64);
        if let Some(ev) = eval {
            history.eval_accuracy.push(accuracy(model, ev)?);
        }
    }
    Ok(history)
}

/// Cross-entropy training.
pub fn fit(
    model: &mut Model,
    train: &FeatureSet,
    opts: &TrainOptions,
    eval: Option<&FeatureSet>,
) -> Result<History, PipelineError> {
    let mut ce = |logits: &Tensor, idx: &[usize]| {
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        Ok(softmax_cross_entropy(logits, &labels)?)
    };
    fit_with(model, train, opts, eval, &mut ce)
}

const EVAL_BATCH: usize = 32;

/// Eval-mode logits for every row, in order.
pub fn logits_all(model: &Model, set: &FeatureSet) -> Result<Tensor, PipelineError> {
    let k = model.n_classes();
    let mut out = Vec::with_capacity(set.len() * k);
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        out.extend_from_slice(model.logits(&set.batch(idx))?.data());
    }
    Ok(Tensor::new(&[set.len(), k], out)?)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(model: &Model, set: &FeatureSet) -> Result<Vec<usize>, PipelineError> {
    let k = model.n_classes();
    Ok(logits_all(model, set)?.data().chunks(k).map(argmax).collect())
}

pub fn accuracy(model: &Model, set: &FeatureSet) -> Result<f64, PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let pred = predictions(model, set)?;
    let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / set.len() as f64)
}
