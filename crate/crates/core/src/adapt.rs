//! Two-stage adaptation.
//!
//! Stage 1 zeroes every temporal output projection, freezes everything except
//! the temporal attention blocks, their layer norms and the task head, and
//! trains with a linear learning-rate warmup. Stage 2 attaches low-rank
//! adapters to the frozen linear layers and trains them jointly with the
//! stage-1 set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::parallel::map_batch;
use crate::params::ParamId;
use crate::rng::SeededRng;
use crate::tape::{GradBuffer, Tape};
use crate::tensor::Tensor;

/// The set of trainable parameter paths; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: Vec<String>,
}

impl FreezeMask {
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        model.params.set_trainable_paths(&self.trainable)
    }
}

/// Temporal attention parameters, their pre-attention layer norms, and the
/// task head.
pub fn stage1_trainable_paths(model: &Model) -> Vec<String> {
    let mut paths = Vec::new();
    for m in model.config.temporal_blocks() {
        for name in ["ln.gain", "ln.bias", "wq", "wk", "wv", "wo"] {
            paths.push(format!("blocks.{m}.temporal.{name}"));
        }
    }
    paths.push("head.weight".to_string());
    paths.push("head.bias".to_string());
    paths
}

/// Zeroes every temporal output projection and applies the stage-1 freeze
/// mask, after which the encoder output equals the temporal-disabled output.
pub fn init_stage1(model: &mut Model) -> Result<FreezeMask> {
    for m in model.config.temporal_blocks() {
        let id = model.params.id(&format!("blocks.{m}.temporal.wo"))?;
        model.params.get_mut(id).value.data_mut().fill(0.0);
    }
    let mask = FreezeMask {
        trainable: stage1_trainable_paths(model),
    };
    mask.apply(model)?;
    Ok(mask)
}

/// Stage-2 mask: the stage-1 set plus every adapter parameter.
pub fn stage2_mask(model: &Model, stage1: &FreezeMask) -> FreezeMask {
    let mut trainable = stage1.trainable.clone();
    for adapter in &model.adapters {
        trainable.push(adapter.a_path());
        trainable.push(adapter.b_path());
    }
    FreezeMask { trainable }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub stage: u8,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global-norm clip; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_grad_clip() -> f64 {
    1.0
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// lr at 1-indexed step k: base_lr * min(1, k/warmup); strictly positive
    /// from the first step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with bias correction; state exists only for trainable parameters.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(schedule: &TrainingSchedule, n_params: usize) -> Self {
        Adam {
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            eps: schedule.adam_eps,
            t: 0,
            moments: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..model.params.len() {
            let p = model.params.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            let (m, v) = self.moments[i]
                .get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let grad: Vec<f64> = p.gradient.data().to_vec();
            let value = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..value.len() {
                let gj = grad[j];
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One record per training step, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

/// Mean loss and mean gradient over a batch. Per-item gradients are computed
/// independently (in parallel) and reduced in index order, so the result does
/// not depend on thread count.
pub fn batch_gradients(model: &Model, batch: &[&(Tensor, usize)]) -> Result<(f64, GradBuffer)> {
    let per_item: Vec<Result<(f64, GradBuffer)>> = map_batch(batch, |item| {
        let (clip, label) = *item;
        let mut tape = Tape::new();
        let logits = model.logits_tape(&mut tape, clip)?;
        let loss = tape.cross_entropy(logits, Arc::new(vec![*label]))?;
        let grads = tape.backward(loss, model.params.len())?;
        Ok((tape.value(loss).data()[0], grads))
    });
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_item.into_iter();
    let (first_loss, mut total) = iter.next().expect("non-empty batch")?;
    let mut loss_sum = first_loss;
    total.scale(scale);
    for item in iter {
        let (loss, grads) = item?;
        loss_sum += loss;
        total.add_scaled(&grads, scale);
    }
    Ok((loss_sum * scale, total))
}

/// Argmax class prediction; ties resolve to the lowest index.
pub fn predict_one(model: &Model, clip: &Tensor) -> Result<usize> {
    let logits = model.class_logits(clip)?;
    let row = logits.row(0);
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn predict_batch(model: &Model, clips: &[Tensor]) -> Result<Vec<usize>> {
    let outs: Vec<Result<usize>> = map_batch(clips, |clip| predict_one(model, clip));
    outs.into_iter().collect()
}

pub fn accuracy(model: &Model, data: &[(Tensor, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let outs: Vec<Result<bool>> =
        map_batch(data, |(clip, label)| Ok(predict_one(model, clip)? == *label));
    let mut hits = 0;
    for o in outs {
        if o? {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Runs minibatch steps on the trainable parameters only. `eval_every = 0`
/// disables mid-run evaluation; the final step always evaluates when a
/// validation set is present. `on_step` sees each record plus the updated
/// model (for logging and periodic checkpoints); its errors abort the run.
pub fn train(
    model: &mut Model,
    train_set: &[(Tensor, usize)],
    val_set: &[(Tensor, usize)],
    schedule: &TrainingSchedule,
    mask: &FreezeMask,
    eval_every: usize,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    mask.apply(model)?;
    let mut adam = Adam::new(schedule, model.params.len());
    let mut shuffle_rng = SeededRng::derive(schedule.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(schedule.total_steps);

    for step in 1..=schedule.total_steps {
        let mut batch = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.batch_size {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }

        let (loss, mut grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {step} (stage {}, seed {})",
                schedule.stage, schedule.seed
            )));
        }
        if schedule.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > schedule.grad_clip {
                grads.scale(schedule.grad_clip / norm);
            }
        }
        model.params.zero_gradients();
        grads.apply_to(&mut model.params);
        let lr = schedule.lr_at(step);
        adam.step(model, lr);

        let want_eval = !val_set.is_empty()
            && ((eval_every > 0 && step % eval_every == 0) || step == schedule.total_steps);
        let eval_acc = if want_eval {
            Some(accuracy(model, val_set)?)
        } else {
            None
        };
        let record = StepRecord {
            step,
            stage: schedule.stage,
            lr,
            loss,
            eval_acc,
        };
        on_step(&record, model)?;
        log.push(record);
    }
    Ok(log)
}
