use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::linalg::Scalar;
use super::net::{Batch, Grads, Mode};
use super::{Classifier, Model};
use crate::binviz::InputTensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// One velocity tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        OptimizerState {
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Classical momentum: `v = m*v - lr*g; w += v`.
    pub fn apply(&mut self, model: &mut Model<T>, grads: &Grads<T>) {
        let lr = T::of(model.config.hyper.learning_rate);
        let m = T::of(model.config.hyper.momentum);
        for ((w, v), g) in model.params_mut().into_iter().zip(&mut self.velocity).zip(&grads.tensors) {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = m * *v - lr * *g;
                *w += *v;
            }
        }
    }
}

/// Forward in training mode, backward, one momentum update. Returns the
/// batch loss. A non-finite loss (or parameters) aborts with
/// `NonFiniteLoss`.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &Batch<T>,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    let trace = model.forward(batch, Mode::Train(rng))?;
    let loss = trace.loss(labels);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let (grads, _) = model.backward(&trace, labels)?;
    opt.apply(model, &grads);
    if !model.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch whose weights were kept (1-based; 0 when untrained).
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_accuracy\n");
        for e in &self.epochs {
            let v = e.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{}\n", e.epoch, e.loss, v));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: History,
}

fn accuracy(model: &Model<f32>, inputs: &[InputTensor], labels: &[usize]) -> Result<f64> {
    let preds = predict(model, inputs)?;
    let hits = preds.iter().zip(labels).filter(|((c, _), y)| c == *y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Mini-batch SGD with momentum over `epochs` shuffled passes. With a
/// validation set and `patience`, stops once validation accuracy has not
/// improved for that many epochs and keeps the best weights.
pub fn train(
    mut model: Model<f32>,
    inputs: &[InputTensor],
    labels: &[usize],
    val: Option<(&[InputTensor], &[usize])>,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyList);
    }
    let c = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::ShapeMismatch(format!("label {bad} >= {c} classes")));
    }
    let side = model.config.input_side;
    let bs = model.config.hyper.batch_size;
    let patience = model.config.hyper.patience;
    let mut shuffle_rng = rng::stream(seed, "train/shuffle");
    let mut drop_rng = rng::stream(seed, "train/dropout");
    let mut opt = OptimizerState::new(&model);
    let mut history = History::default();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let xs: Vec<InputTensor> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::from_inputs(&xs, side)?;
            let loss = match train_step(&mut model, &mut opt, &batch, &ys, &mut drop_rng) {
                Err(Error::NonFiniteLoss(_)) => return Err(Error::NonFiniteLoss(epoch)),
                r => r?,
            };
            total += loss * chunk.len() as f64;
        }
        let val_accuracy = match val {
            Some((vx, vy)) if !vx.is_empty() => Some(accuracy(&model, vx, vy)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: total / inputs.len() as f64,
            val_accuracy,
        });
        history.best_epoch = epoch;
        if let (Some(p), Some(acc)) = (patience, val_accuracy) {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    history.stopped_early = epoch < epochs;
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        history.best_epoch = history
            .epochs
            .iter()
            .filter(|e| e.val_accuracy.is_some())
            .fold((0, f64::NEG_INFINITY), |(be, ba), e| {
                let a = e.val_accuracy.unwrap_or(0.0);
                if a > ba {
                    (e.epoch, a)
                } else {
                    (be, ba)
                }
            })
            .0;
        model = m;
    }
    Ok(TrainOutcome { model, history })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class and probability vector for each input.
pub fn predict<M: Classifier + ?Sized>(model: &M, inputs: &[InputTensor]) -> Result<Vec<(usize, Vec<f64>)>> {
    Ok(model
        .predict_proba(inputs)?
        .into_iter()
        .map(|p| (argmax(&p), p))
        .collect())
}
