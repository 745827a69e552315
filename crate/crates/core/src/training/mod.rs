//! Surrogate-gradient training through time.

mod backward;
mod data;

pub use backward::{
    attention_backward, backward, block_backward, depthwise3x3_backward, linear_affine_backward,
    pruned_block_backward, BlockCarries,
};
pub use data::{Dataset, SyntheticSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, ModelWeights, NoopObserver, Pruning, RunOptions, SpikingTransformer};
use crate::numerics::Rng;
use crate::pruning::{PruneSchedule, ScorerConfig};

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = z.ln() + m - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    (value, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fine-tuning rate; defaults to a tenth of `learning_rate`.
    pub finetune_learning_rate: Option<f64>,
    pub finetune_epochs: usize,
    pub prune_during_training: bool,
    pub schedule: Option<PruneSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            finetune_learning_rate: None,
            finetune_epochs: 5,
            prune_during_training: false,
            schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if let Some(lr) = self.finetune_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config("train.finetune_learning_rate", "must be finite and >= 0"));
            }
        }
        if self.prune_during_training && self.schedule.is_none() {
            return Err(Error::config("train.schedule", "prune_during_training needs a schedule"));
        }
        Ok(())
    }

    pub fn finetune_rate(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(0.1 * self.learning_rate)
    }
}

/// SGD with heavy-ball momentum: `v = μ v + g`, `w -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ModelWeights,
}

impl Sgd {
    pub fn new(weights: &ModelWeights, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: weights.zeros_like(),
        }
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grad: &ModelWeights) {
        let mu = self.momentum;
        let lr = self.learning_rate;
        for ((w, v), g) in weights
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grad.tensors())
        {
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,eval_acc\n");
    for r in rows {
        let e = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.epoch, r.train_loss, r.train_acc, e));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
    pub predictions: Vec<usize>,
}

/// Accuracy over a dataset, samples evaluated in parallel.
pub fn evaluate(model: &SpikingTransformer, data: &Dataset, pruning: Option<Pruning<'_>>) -> Result<EvalReport> {
    let predictions: Vec<usize> = data
        .images
        .par_iter()
        .map(|img| model.predict(img, pruning))
        .collect::<Result<_>>()?;
    let mut per_class = vec![(0, 0); data.num_classes.max(model.config.num_classes)];
    let mut correct = 0;
    for (p, &l) in predictions.iter().zip(&data.labels) {
        per_class[l].1 += 1;
        if *p == l {
            per_class[l].0 += 1;
            correct += 1;
        }
    }
    let total = data.len();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class,
        predictions,
    })
}

/// Loss, correctness and gradient for one sample.
pub fn sample_gradient(
    model: &SpikingTransformer,
    image: &crate::numerics::Tensor,
    label: usize,
    pruning: Option<Pruning<'_>>,
) -> Result<(f64, bool, ModelWeights)> {
    let opts = RunOptions {
        pruning,
        trace: true,
        ..Default::default()
    };
    let out = model.run(image, &opts, &mut NoopObserver)?;
    let (l, g) = loss(&out.logits, label);
    let grad = backward(model, out.trace.as_ref(), &g)?;
    Ok((l, argmax(&out.logits) == label, grad))
}

fn fit(
    mut model: SpikingTransformer,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    learning_rate: f64,
    epochs: usize,
    pruning: Option<Pruning<'_>>,
) -> Result<(SpikingTransformer, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("data", "training set is empty"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Sgd::new(&model.weights, learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, bool, ModelWeights)> = batch
                .par_iter()
                .map(|&i| sample_gradient(&model, &data.images[i], data.labels[i], pruning))
                .collect::<Result<_>>()?;
            let mut grad = model.weights.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for (l, ok, g) in &per_sample {
                loss_sum += l;
                correct += *ok as usize;
                grad.axpy(inv, g);
            }
            opt.step(&mut model.weights, &grad);
            if !model.weights.is_finite() {
                return Err(Error::Internal(format!("weights diverged in epoch {epoch}")));
            }
        }
        let eval_acc = match eval {
            Some(e) => Some(evaluate(&model, e, pruning)?.accuracy),
            None => None,
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            eval_acc,
        });
    }
    Ok((model, history))
}

/// Trains for `cfg.epochs` at `cfg.learning_rate`. Pruned training uses
/// `cfg.schedule` with `scorer`.
pub fn train(
    model: SpikingTransformer,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    scorer: &ScorerConfig,
) -> Result<(SpikingTransformer, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let pruning = match (&cfg.schedule, cfg.prune_during_training) {
        (Some(schedule), true) => Some(Pruning { scorer, schedule }),
        _ => None,
    };
    fit(model, data, eval, cfg, cfg.learning_rate, cfg.epochs, pruning)
}

/// Trains with the pruned forward at the reduced fine-tuning rate for
/// `cfg.finetune_epochs`.
pub fn finetune_pruned(
    model: SpikingTransformer,
    data: &Dataset,
    eval: Option<&Dataset>,
    schedule: &PruneSchedule,
    scorer: &ScorerConfig,
    cfg: &TrainConfig,
) -> Result<(SpikingTransformer, Vec<EpochMetrics>)> {
    schedule.check_blocks(model.config.num_blocks)?;
    let pruning = Some(Pruning { scorer, schedule });
    fit(model, data, eval, cfg, cfg.finetune_rate(), cfg.finetune_epochs, pruning)
}
