//! Epoch loop, evaluation and checkpoint glue.

use alchemy_core::codec::PAD;
use alchemy_core::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::ops::argmax;
use crate::optim::{clip_grad_norm, AdamW, OptimizerConfig, ScheduleUnit};
use crate::schedule::lr_schedule;
use crate::transformer::Transformer;
use crate::ModelError;

const SHUFFLE_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;

/// One training or evaluation sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Content tokens; leading padding is dropped on construction.
    pub tokens: Vec<u8>,
    pub label: usize,
}

impl Example {
    pub fn new(tokens: &[u8], label: usize) -> Self {
        let start = tokens.iter().position(|&t| t != PAD).unwrap_or(tokens.len().saturating_sub(1));
        Self {
            tokens: tokens[start..].to_vec(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub index: usize,
    pub predicted: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Completed epochs after this one.
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// In-step predictions indexed like the training data.
    pub train_predictions: Vec<usize>,
}

/// Argmax of the final-position logits, dropout disabled.
pub fn evaluate(model: &Transformer, examples: &[Example]) -> Result<Vec<Prediction>, ModelError> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let logits = model.final_logits(&ex.tokens)?;
            Ok(Prediction {
                index,
                predicted: argmax(&logits),
                target: ex.label,
            })
        })
        .collect()
}

/// Mean cross-entropy at the final position, dropout disabled.
pub fn mean_loss(model: &Transformer, examples: &[Example]) -> Result<f64, ModelError> {
    Ok(evaluate_with_loss(model, examples)?.1)
}

/// Predictions and mean final-position cross-entropy in one pass.
pub fn evaluate_with_loss(model: &Transformer, examples: &[Example]) -> Result<(Vec<Prediction>, f64), ModelError> {
    let mut scratch = Vec::new();
    let mut total = 0.0;
    let mut out = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let logits = model.final_logits(&ex.tokens)?;
        if ex.label >= logits.len() {
            return Err(ModelError::LabelOutOfRange(ex.label));
        }
        scratch.resize(logits.len(), 0.0);
        total += crate::ops::cross_entropy(&logits, ex.label, &mut scratch, 1.0);
        out.push(Prediction {
            index,
            predicted: argmax(&logits),
            target: ex.label,
        });
    }
    Ok((out, total / examples.len().max(1) as f64))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: Transformer,
    opt: AdamW,
    cfg: OptimizerConfig,
    seed: u64,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(model: Transformer, cfg: OptimizerConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let opt = AdamW::new(model.num_params(), model.segments());
        Ok(Self {
            model,
            opt,
            cfg,
            seed,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ModelError> {
        let h = ckpt.header;
        let mut model = Transformer::new(h.model, 0)?;
        model.set_params(ckpt.params)?;
        let mut t = Self::new(model, h.optimizer, h.seed)?;
        t.opt.restore(ckpt.adam_m, ckpt.adam_v, h.adam_t)?;
        t.epoch = h.epoch;
        t.step = h.step;
        Ok(t)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            header: CheckpointHeader {
                model: self.model.config().clone(),
                optimizer: self.cfg.clone(),
                epoch: self.epoch,
                step: self.step,
                seed: self.seed,
                adam_t: self.opt.t,
                n_params: self.model.num_params(),
            },
            params: self.model.params().to_vec(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.cfg.batch_size) as u64
    }

    /// Learning rate for the next optimizer step.
    pub fn learning_rate(&self, n_train: usize) -> Result<f64, ModelError> {
        let (pos, total) = match self.cfg.schedule_unit {
            ScheduleUnit::Epoch => (self.epoch as u64, self.cfg.epochs as u64),
            ScheduleUnit::Step => (self.step, self.cfg.epochs as u64 * self.steps_per_epoch(n_train)),
        };
        lr_schedule(self.cfg.learning_rate, &self.cfg.scheduler, pos.min(total), total)
    }

    /// One pass over `data` in a seeded order.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochStats, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[SHUFFLE_STREAM, self.epoch as u64])));
        let epoch_lr = self.learning_rate(data.len())?;
        let mut predictions = vec![0usize; data.len()];
        let mut grad = vec![0.0f32; self.model.num_params()];
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(self.cfg.batch_size) {
            let lr = self.learning_rate(data.len())?;
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for (i, &idx) in batch.iter().enumerate() {
                let ex = &data[idx];
                let dropout_seed = derive_seed(self.seed, &[DROPOUT_STREAM, self.step, i as u64]);
                let (loss, logits) = self.model.loss_and_grad(&ex.tokens, ex.label, Some(dropout_seed), scale, &mut grad)?;
                predictions[idx] = argmax(&logits);
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Divergence {
                    epoch: self.epoch,
                    step: self.step,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            if let Some(c) = self.cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            self.opt.step(self.model.params_mut(), &grad, lr, &self.cfg);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            step: self.step,
            learning_rate: epoch_lr,
            train_loss: loss_sum / data.len() as f64,
            train_predictions: predictions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            max_seq_len: 12,
            ..Default::default()
        }
    }

    fn data() -> Vec<Example> {
        (0..10u8)
            .map(|i| Example::new(&[PAD, PAD, i % 5, 13 + i % 6, 20], (i as usize * 7) % 108))
            .collect()
    }

    #[test]
    fn example_strips_leading_padding() {
        let e = Example::new(&[PAD, PAD, 3, PAD, 20], 4);
        assert_eq!(e.tokens, vec![3, PAD, 20]);
        assert_eq!(Example::new(&[PAD, PAD], 0).tokens, vec![PAD]);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = OptimizerConfig {
            batch_size: 4,
            epochs: 3,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::new(Transformer::new(tiny(), 5).unwrap(), cfg.clone(), 9).unwrap();
            let stats: Vec<_> = (0..3).map(|_| t.train_epoch(&data()).unwrap()).collect();
            (stats, t.model().params().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a[2].step, 9);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let cfg = OptimizerConfig {
            batch_size: 3,
            epochs: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut full = Trainer::new(Transformer::new(tiny(), 1).unwrap(), cfg.clone(), 2).unwrap();
        let mut part = full.clone();
        for _ in 0..4 {
            full.train_epoch(&data()).unwrap();
        }
        for _ in 0..2 {
            part.train_epoch(&data()).unwrap();
        }
        let bytes = part.checkpoint("h").to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        for _ in 0..2 {
            resumed.train_epoch(&data()).unwrap();
        }
        assert_eq!(resumed.model().params(), full.model().params());
        assert_eq!(evaluate(resumed.model(), &data()).unwrap(), evaluate(full.model(), &data()).unwrap());
    }

    #[test]
    fn epoch_unit_schedule() {
        let cfg = OptimizerConfig {
            batch_size: 4,
            epochs: 2,
            learning_rate: 1e-3,
            scheduler: crate::schedule::Scheduler::MultiStep {
                milestones: vec![1],
                gamma: 0.5,
            },
            ..Default::default()
        };
        let mut t = Trainer::new(Transformer::new(tiny(), 0).unwrap(), cfg, 0).unwrap();
        assert_eq!(t.train_epoch(&data()).unwrap().learning_rate, 1e-3);
        assert_eq!(t.train_epoch(&data()).unwrap().learning_rate, 5e-4);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = OptimizerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let mut model = Transformer::new(tiny(), 0).unwrap();
        let r = model.segment("head.b").unwrap();
        model.params_mut()[r.start] = f32::NAN;
        let mut t = Trainer::new(model, cfg, 0).unwrap();
        assert!(matches!(t.train_epoch(&data()), Err(ModelError::Divergence { .. })));
    }
}
