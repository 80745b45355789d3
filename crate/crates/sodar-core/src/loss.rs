//! Training losses: Dice on the per-cell masks plus focal (or BCE)
//! classification. Mask representations receive no direct supervision unless
//! the two-stage variant is enabled — their gradient arrives solely through
//! the aggregation path.

use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, LabelAssignment, ToyModel};
use crate::tape::{Tape, Var};
use crate::tensor::GridTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClsLoss {
    Focal { gamma: f64, alpha: f64 },
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the mask term.
    pub mask_weight: f64,
    pub cls: ClsLoss,
    pub dice_eps: f64,
    /// Adds direct Dice supervision on the mask representations.
    pub two_stage: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mask_weight: 3.0,
            cls: ClsLoss::Focal {
                gamma: 2.0,
                alpha: 0.25,
            },
            dice_eps: 1e-6,
            two_stage: false,
        }
    }
}

/// Scalar Dice loss on a plain map (no tape). `1 - 2*sum(p*g) /
/// (sum(p^2) + sum(g^2) + eps)`.
pub fn dice_loss(pred: &GridTensor, target: &GridTensor, eps: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut s_pg = 0.0;
    let mut s_pp = 0.0;
    let mut s_gg = 0.0;
    for (p, g) in pred.data().iter().zip(target.data()) {
        s_pg += p * g;
        s_pp += p * p;
        s_gg += g * g;
    }
    Ok(1.0 - 2.0 * s_pg / (s_pp + s_gg + eps))
}

pub struct LossBreakdown {
    pub total: Var,
    pub cls_term: Var,
    /// Mean Dice over positive cells (unweighted); absent without positives.
    pub mask_term: Option<Var>,
    pub two_stage_term: Option<Var>,
    /// Raw aggregated logit maps, one per positive cell, in positive order.
    pub head_outputs: Vec<Var>,
}

/// Builds the full training loss for one scene on the tape.
pub fn total_loss(
    tape: &mut Tape,
    model: &ToyModel,
    out: &ForwardOutputs,
    assignment: &LabelAssignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let n_pos = assignment.positives.len();
    let divisor = (n_pos + 1) as f64;

    // classification targets per level
    let mut cls_terms = Vec::with_capacity(out.levels.len());
    for (l, level) in out.levels.iter().enumerate() {
        let g = level.grid.cls;
        let c = model.cfg.classes;
        let mut targets = GridTensor::zeros(vec![c, g, g]);
        for p in assignment.positives.iter().filter(|p| p.level == l) {
            let class_id = assignment.instance_classes[p.instance];
            targets.set(&[class_id, p.i, p.j], 1.0);
        }
        let term = match cfg.cls {
            ClsLoss::Focal { gamma, alpha } => {
                tape.focal_loss(level.cls_logits, &targets, gamma, alpha, divisor)?
            }
            ClsLoss::Bce => tape.bce_loss(level.cls_logits, &targets, divisor)?,
        };
        cls_terms.push((term, 1.0));
    }
    let cls_term = tape.add_weighted(&cls_terms)?;

    let mut head_outputs = Vec::new();
    let mut dice_terms = Vec::new();
    let mut two_stage_dices = Vec::new();
    for l in 0..out.levels.len() {
        let positives: Vec<_> = assignment
            .positives
            .iter()
            .filter(|p| p.level == l)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let cells: Vec<(usize, usize)> = positives.iter().map(|p| (p.i, p.j)).collect();
        let logits = model.mask_logits_for_cells(tape, out, l, &cells)?;
        for (p, &logit) in positives.iter().zip(&logits) {
            head_outputs.push(logit);
            let pred = tape.sigmoid(logit)?;
            let target = &assignment.target_masks[p.instance];
            dice_terms.push(tape.dice_loss(pred, target, cfg.dice_eps)?);
        }
        if cfg.two_stage {
            let level = &out.levels[l];
            let gm = level.reps.grid;
            let hw = level.reps.h * level.reps.w;
            for p in &positives {
                let (mi, mj) = crate::geometry::interp_index(p.i, p.j, level.grid.cls, gm);
                let rep = tape.slice_reshape(
                    level.reps.var,
                    (mi * gm + mj) * hw,
                    vec![level.reps.h, level.reps.w],
                )?;
                let pred = tape.sigmoid(rep)?;
                let target = &assignment.target_masks[p.instance];
                two_stage_dices.push(tape.dice_loss(pred, target, cfg.dice_eps)?);
            }
        }
    }

    let mask_term = if dice_terms.is_empty() {
        None
    } else {
        Some(tape.mean_scalars(&dice_terms)?)
    };
    let two_stage_term = if two_stage_dices.is_empty() {
        None
    } else {
        Some(tape.mean_scalars(&two_stage_dices)?)
    };

    let mut terms = vec![(cls_term, 1.0)];
    if let Some(m) = mask_term {
        terms.push((m, cfg.mask_weight));
    }
    if let Some(t) = two_stage_term {
        terms.push((t, cfg.mask_weight));
    }
    let total = tape.add_weighted(&terms)?;
    Ok(LossBreakdown {
        total,
        cls_term,
        mask_term,
        two_stage_term,
        head_outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_of_exact_binary_prediction_is_near_zero() {
        let t = GridTensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = dice_loss(&t, &t, 1e-6).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn dice_of_all_zero_prediction_on_nonempty_target_is_one() {
        let p = GridTensor::zeros(vec![2, 2]);
        let t = GridTensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = dice_loss(&p, &t, 1e-6).unwrap();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_of_uniform_half_on_half_target_is_one_third() {
        // target covers n of 2n pixels, prediction is 0.5 everywhere:
        // 1 - 2*(0.5n) / (0.25*2n + n) = 1 - n / 1.5n = 1/3
        let n = 8;
        let p = GridTensor::full(vec![2 * n], 0.5);
        let mut t = GridTensor::zeros(vec![2 * n]);
        for i in 0..n {
            t.data_mut()[i] = 1.0;
        }
        let loss = dice_loss(&p, &t, 1e-6).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-6, "{loss}");
    }
}
