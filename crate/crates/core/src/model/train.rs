use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Model, ModelParams};
use crate::error::{QdstError, Result};
use crate::pattern::SequenceLayout;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sigmoid cross-entropy of a single score against a 0/1 label.
    #[default]
    PointwiseBce,
    /// `-log softmax` of the positive score against one negative.
    PairwiseSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            loss_kind: LossKind::PointwiseBce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(QdstError::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(QdstError::invalid(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(QdstError::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum TrainExample {
    Pointwise { layout: SequenceLayout, label: f64 },
    Pairwise { positive: SequenceLayout, negative: SequenceLayout },
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and `dloss/dscore` for a labelled score.
pub fn pointwise_loss(score: f64, label: f64) -> (f64, f64) {
    (softplus(score) - label * score, sigmoid(score) - label)
}

/// Loss and gradients `(dloss/dpos, dloss/dneg)`.
pub fn pairwise_loss(positive: f64, negative: f64) -> (f64, f64, f64) {
    let margin = negative - positive;
    let s = sigmoid(margin);
    (softplus(margin), -s, s)
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first_moment: ModelParams<T>,
    pub second_moment: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            first_moment: ModelParams::zeros(&model.config),
            second_moment: ModelParams::zeros(&model.config),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let lr_t = T::lit(cfg.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let eps = T::lit(cfg.adam_eps);
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let params_t = params.tensors_mut();
        let grads_t = grads.tensors();
        let m_t = self.first_moment.tensors_mut();
        let v_t = self.second_moment.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params_t.into_iter().zip(grads_t).zip(m_t).zip(v_t) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean loss over the batch, measured before the update.
    pub loss: f64,
    pub step: u64,
}

impl<T: Real> Model<T> {
    /// One Adam step on the mean loss of `batch`.
    pub fn train_step(
        &mut self,
        batch: &[TrainExample],
        optimizer: &mut AdamState<T>,
        config: &TrainConfig,
        rng: &mut dyn RngCore,
    ) -> Result<StepReport> {
        config.validate()?;
        if batch.is_empty() {
            return Err(QdstError::invalid("training batch is empty"));
        }
        let mut grads = ModelParams::zeros(&self.config);
        let mut total = 0.0;
        let inv = T::lit(1.0 / batch.len() as f64);
        for (idx, example) in batch.iter().enumerate() {
            match (example, config.loss_kind) {
                (TrainExample::Pointwise { layout, label }, LossKind::PointwiseBce) => {
                    let (score, cache) = self.forward_for_training(layout, Some(rng))?;
                    let (loss, d) = pointwise_loss(score.as_f64(), *label);
                    check_finite(loss, idx, &[score.as_f64()])?;
                    total += loss;
                    self.backward(&cache, T::lit(d) * inv, &mut grads)?;
                }
                (TrainExample::Pairwise { positive, negative }, LossKind::PairwiseSoftmax) => {
                    let (sp, cache_p) = self.forward_for_training(positive, Some(rng))?;
                    let (sn, cache_n) = self.forward_for_training(negative, Some(rng))?;
                    let (loss, dp, dn) = pairwise_loss(sp.as_f64(), sn.as_f64());
                    check_finite(loss, idx, &[sp.as_f64(), sn.as_f64()])?;
                    total += loss;
                    self.backward(&cache_p, T::lit(dp) * inv, &mut grads)?;
                    self.backward(&cache_n, T::lit(dn) * inv, &mut grads)?;
                }
                (_, kind) => {
                    return Err(QdstError::invalid(format!(
                        "example {idx} does not match loss kind {kind:?}"
                    )))
                }
            }
        }
        if !grads.is_finite() {
            return Err(QdstError::NumericalError(format!(
                "non-finite gradient at optimizer step {}",
                optimizer.step + 1
            )));
        }
        optimizer.apply(&mut self.params, &grads, config);
        Ok(StepReport {
            loss: total / batch.len() as f64,
            step: optimizer.step,
        })
    }
}

fn check_finite(loss: f64, idx: usize, scores: &[f64]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(QdstError::NumericalError(format!(
            "loss {loss} for batch example {idx} (scores {scores:?})"
        )))
    }
}
