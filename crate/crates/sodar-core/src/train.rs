//! Desk-scale training: Adam updates over batched scene gradients. Per-scene
//! gradients may be computed in parallel; the final reduction runs in batch
//! order, so training is deterministic for a fixed seed and thread count has
//! no effect on results.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::model::{assign_labels, LabelAssignment, ToyModel};
use crate::par;
use crate::scene::Scene;
use crate::tape::Tape;
use crate::tensor::GridTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay_factor` once, at this step.
    pub lr_decay_step: Option<usize>,
    pub lr_decay_factor: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 400,
            batch: 8,
            lr: 3e-3,
            lr_decay_step: Some(320),
            lr_decay_factor: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay_step {
            Some(s) if step >= s => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }
}

/// Adam with bias correction. A zero gradient on a fresh state leaves the
/// parameters untouched.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<GridTensor>,
    v: Vec<GridTensor>,
}

impl AdamState {
    pub fn new(model: &ToyModel) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: model
                .params
                .iter()
                .map(|p| GridTensor::zeros(p.value.shape().to_vec()))
                .collect(),
            v: model
                .params
                .iter()
                .map(|p| GridTensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &[GridTensor], lr: f64) {
        assert_eq!(grads.len(), model.params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, grad) in grads.iter().enumerate() {
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let p = model.params[pi].value.data_mut();
            for ((mi, vi), (pi_val, gi)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.iter_mut().zip(grad.data()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi_val -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEntry {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    /// Mean Dice over positive cells, before weighting; 0 for batches with
    /// no positives.
    pub mask: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEntry {
    pub epoch: usize,
    pub step: usize,
    pub val_ap: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepEntry>,
    pub epochs: Vec<EpochEntry>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,lr,total,cls,mask\n");
        for e in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, e.lr, e.total, e.cls, e.mask
            ));
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,step,val_ap\n");
        for e in &self.epochs {
            match e.val_ap {
                Some(ap) => out.push_str(&format!("{},{},{}\n", e.epoch, e.step, ap)),
                None => out.push_str(&format!("{},{},\n", e.epoch, e.step)),
            }
        }
        out
    }

    pub fn final_mask_dice(&self) -> Option<f64> {
        self.steps.last().map(|e| e.mask)
    }
}

struct SceneGrads {
    total: f64,
    cls: f64,
    mask: f64,
    grads: Vec<Option<GridTensor>>,
}

fn scene_gradients(
    model: &ToyModel,
    scene: &Scene,
    assignment: &LabelAssignment,
    loss_cfg: &LossConfig,
) -> Result<SceneGrads> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &scene.image)?;
    let breakdown = total_loss(&mut tape, model, &out, assignment, loss_cfg)?;
    let total = tape.value(breakdown.total).data()[0];
    let cls = tape.value(breakdown.cls_term).data()[0];
    let mask = breakdown
        .mask_term
        .map(|m| tape.value(m).data()[0])
        .unwrap_or(0.0);
    let mut grads = tape.backward(breakdown.total)?;
    let per_param = out
        .param_vars
        .iter()
        .map(|&v| grads.take(v))
        .collect();
    Ok(SceneGrads {
        total,
        cls,
        mask,
        grads: per_param,
    })
}

/// Runs `cfg.steps` Adam steps over shuffled batches. `val_hook` is invoked
/// at every epoch boundary (one pass over the dataset) and once at the end,
/// typically to compute a validation AP. Aborts with a diagnostic when the
/// loss stops being finite.
pub fn train<F>(
    model: &mut ToyModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut val_hook: Option<F>,
) -> Result<TrainLog>
where
    F: FnMut(&ToyModel) -> Result<f64>,
{
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let assignments: Vec<LabelAssignment> = scenes
        .iter()
        .map(|s| assign_labels(s, &model.cfg))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let mut adam = AdamState::new(model);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        let mut epoch_rolled = false;
        for _ in 0..cfg.batch.min(scenes.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                epoch_rolled = true;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        if epoch_rolled && step > 0 {
            epoch += 1;
            let val_ap = match val_hook.as_mut() {
                Some(hook) => Some(hook(model)?),
                None => None,
            };
            log.epochs.push(EpochEntry {
                epoch,
                step,
                val_ap,
            });
        }

        let results = {
            let model_ref: &ToyModel = model;
            par::map_indexed(batch.len(), |bi| {
                let si = batch[bi];
                scene_gradients(model_ref, &scenes[si], &assignments[si], &cfg.loss)
            })
        };

        let mut total = 0.0;
        let mut cls = 0.0;
        let mut mask = 0.0;
        let mut grads: Vec<GridTensor> = model
            .params
            .iter()
            .map(|p| GridTensor::zeros(p.value.shape().to_vec()))
            .collect();
        let n = batch.len() as f64;
        for r in results {
            let r = r?;
            total += r.total;
            cls += r.cls;
            mask += r.mask;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v / n;
                    }
                }
            }
        }
        total /= n;
        cls /= n;
        mask /= n;
        if !total.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became non-finite at step {step} (total={total})"
            )));
        }

        let lr = cfg.lr_at(step);
        adam.step(model, &grads, lr);
        log.steps.push(StepEntry {
            step,
            lr,
            total,
            cls,
            mask,
        });
    }

    if let Some(hook) = val_hook.as_mut() {
        let val_ap = Some(hook(model)?);
        log.epochs.push(EpochEntry {
            epoch: epoch + 1,
            step: cfg.steps,
            val_ap,
        });
    }
    Ok(log)
}
