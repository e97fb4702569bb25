//! Minibatch Adam training on the alignment loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{sample_context_batch, ContextCatalog, SamplingConfig, Utterance};
use crate::error::{config, Error, Result};
use crate::model::CattModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Share of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}


impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(config("epochs and batch_size must be positive"));
        }
        if !(t.peak_lr > 0.0) || !(0.0..=1.0).contains(&t.warmup_fraction) || !(t.clip_norm > 0.0) {
            return Err(config("peak_lr and clip_norm must be positive, warmup_fraction in [0, 1]"));
        }
        if t.sampling.k == 0 {
            return Err(config("sampling.k must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then `peak * sqrt(warmup / step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total_steps as f64 * warmup_fraction).round() as usize).max(1);
        Self { peak, warmup }
    }

    /// Learning rate of 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1);
        if s <= self.warmup {
            self.peak * s as f64 / self.warmup as f64
        } else {
            self.peak * (self.warmup as f64 / s as f64).sqrt()
        }
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(model: &CattModel, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut CattModel, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = model.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = model.store.get_mut(id).data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Mean utterance loss of the batch.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,loss,lr,grad_norm\n");
    for s in log {
        out.push_str(&format!("{},{},{},{},{}\n", s.step, s.epoch, s.loss, s.lr, s.grad_norm));
    }
    out
}

/// Trains `model` in place. Batches are drawn from a per-epoch shuffle,
/// context batches are re-sampled for every utterance at every step, and
/// per-utterance gradients are summed in batch order.
pub fn train(
    model: &mut CattModel,
    data: &[&Utterance],
    catalog: &ContextCatalog,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(config("training set is empty"));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.peak_lr, steps_per_epoch * cfg.epochs, cfg.warmup_fraction);
    let mut adam = Adam::new(model, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uses_context = model.cfg.variant.uses_context();
    let mut log = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = schedule.lr(step);
            let mut total: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0;
            for &i in batch {
                let utt = data[i];
                let context = if uses_context {
                    let relevant = catalog.relevant_to(&utt.transcript);
                    sample_context_batch(&relevant, catalog, &cfg.sampling, &mut rng)?
                } else {
                    Vec::new()
                };
                let (loss, grads) = match model.loss_and_grads(&utt.frames, &utt.tokens, &context) {
                    Ok(r) => r,
                    Err(Error::NonFinite { .. }) => (f64::NAN, Vec::new()),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        loss,
                        lr,
                        grad_norm: f64::NAN,
                    });
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let n = batch.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            let loss = loss_sum / n;
            if !grad_norm.is_finite() {
                return Err(Error::Diverged { step, loss, lr, grad_norm });
            }
            adam.step(model, &grads, lr);
            let entry = StepLog {
                step,
                epoch,
                loss,
                lr,
                grad_norm,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}
