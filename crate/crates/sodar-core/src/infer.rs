//! End-to-end inference: forward pass, per-cell aggregation of the cells
//! that clear the score filter, decoding, NMS, optional mask voting, and
//! dataset-level evaluation.

use crate::error::Result;
use crate::eval::{evaluate, EvalDet, EvalGt, EvalReport};
use crate::mask::BinaryMask;
use crate::model::ToyModel;
use crate::par;
use crate::postprocess::{decode, mask_nms, CellMask, Detection, PostprocessConfig};
use crate::scene::Scene;
use crate::tape::Tape;
use crate::tensor::GridTensor;
use crate::voting::{grid_search_tau, vote, VoteCandidate, VoteConfig, VoteScheme};

/// Per-scene inference result. `candidates` are all decoded masks above the
/// score filter (the voting pool); `kept` are the NMS survivors.
#[derive(Debug, Clone)]
pub struct SceneInference {
    pub kept: Vec<Detection>,
    pub candidates: Vec<Detection>,
}

/// Runs the model on one image and post-processes to final detections.
pub fn run_inference(
    model: &ToyModel,
    image: &GridTensor,
    post: &PostprocessConfig,
) -> Result<SceneInference> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image)?;

    let mut cls_grids = Vec::with_capacity(out.levels.len());
    let mut cell_masks = Vec::new();
    for (l, level) in out.levels.iter().enumerate() {
        let scores = tape.value(level.cls_scores).clone();
        let g = level.grid.cls;
        let c = scores.shape()[0];
        let mut cells = Vec::new();
        for i in 0..g {
            for j in 0..g {
                let best = (0..c)
                    .map(|ci| scores.at(&[ci, i, j]))
                    .fold(f64::NEG_INFINITY, f64::max);
                if best >= post.score_threshold {
                    cells.push((i, j));
                }
            }
        }
        let logits = model.mask_logits_for_cells(&mut tape, &out, l, &cells)?;
        for (&(i, j), &var) in cells.iter().zip(&logits) {
            cell_masks.push(CellMask {
                level: l,
                i,
                j,
                logits: tape.value(var).clone(),
            });
        }
        cls_grids.push(scores);
    }

    let candidates = decode(
        &cls_grids,
        &cell_masks,
        post,
        model.cfg.img_h,
        model.cfg.img_w,
    )?;
    let outcome = mask_nms(&candidates, post)?;
    Ok(SceneInference {
        kept: outcome.kept,
        candidates,
    })
}

/// Inference over many scenes (parallel across scenes).
pub fn infer_scenes(
    model: &ToyModel,
    scenes: &[Scene],
    post: &PostprocessConfig,
) -> Result<Vec<SceneInference>> {
    par::map_indexed(scenes.len(), |i| run_inference(model, &scenes[i].image, post))
        .into_iter()
        .collect()
}

fn gts_of(scenes: &[Scene]) -> Vec<EvalGt> {
    let mut gts = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for inst in &s.instances {
            gts.push(EvalGt {
                scene: si,
                class_id: inst.class_id,
                mask: inst.mask.clone(),
            });
        }
    }
    gts
}

fn dets_of(infs: &[SceneInference]) -> Vec<EvalDet> {
    let mut dets = Vec::new();
    for (si, inf) in infs.iter().enumerate() {
        for d in &inf.kept {
            dets.push(EvalDet {
                scene: si,
                class_id: d.class_id,
                score: d.score,
                mask: d.mask.clone(),
                tiebreak: d.source,
            });
        }
    }
    dets
}

/// Evaluates cached inferences against scene ground truth.
pub fn eval_inferences(infs: &[SceneInference], scenes: &[Scene]) -> EvalReport {
    evaluate(&dets_of(infs), &gts_of(scenes))
}

pub fn evaluate_model(
    model: &ToyModel,
    scenes: &[Scene],
    post: &PostprocessConfig,
) -> Result<EvalReport> {
    let infs = infer_scenes(model, scenes, post)?;
    Ok(eval_inferences(&infs, scenes))
}

/// Applies voting to each kept detection of one scene: the pool is every
/// same-class candidate (the kept mask included). A detection whose voted
/// mask would binarize to empty keeps its original masks.
pub fn apply_voting(
    inf: &SceneInference,
    cfg: &VoteConfig,
    mask_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(inf.kept.len());
    for d in &inf.kept {
        let kept = VoteCandidate {
            soft: &d.soft_mask,
            mask: &d.mask,
            score: d.score,
        };
        let pool: Vec<VoteCandidate> = inf
            .candidates
            .iter()
            .filter(|c| c.class_id == d.class_id)
            .map(|c| VoteCandidate {
                soft: &c.soft_mask,
                mask: &c.mask,
                score: c.score,
            })
            .collect();
        let voted_soft = vote(&kept, &pool, cfg)?;
        let voted_mask = BinaryMask::from_soft(&voted_soft, mask_threshold)?;
        let mut nd = d.clone();
        if !voted_mask.is_empty_mask() {
            nd.soft_mask = voted_soft;
            nd.mask = voted_mask;
        }
        out.push(nd);
    }
    Ok(out)
}

/// Evaluates cached inferences with a voting scheme applied to every scene.
pub fn eval_with_voting(
    infs: &[SceneInference],
    scenes: &[Scene],
    cfg: &VoteConfig,
    mask_threshold: f64,
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    for (si, inf) in infs.iter().enumerate() {
        for d in apply_voting(inf, cfg, mask_threshold)? {
            dets.push(EvalDet {
                scene: si,
                class_id: d.class_id,
                score: d.score,
                mask: d.mask,
                tiebreak: d.source,
            });
        }
    }
    Ok(evaluate(&dets, &gts_of(scenes)))
}

/// Result of a voting grid search: winning config, best AP, and the
/// per-threshold table.
#[derive(Debug, Clone)]
pub struct VotingSearch {
    pub config: VoteConfig,
    pub best_ap: f64,
    pub table: Vec<(f64, f64)>,
}

/// Grid search over the voting IoU threshold using validation AP.
pub fn search_voting(
    infs: &[SceneInference],
    scenes: &[Scene],
    scheme: VoteScheme,
    mask_threshold: f64,
) -> Result<VotingSearch> {
    let (config, table) = grid_search_tau(scheme, |cfg| {
        eval_with_voting(infs, scenes, cfg, mask_threshold).map(|r| r.ap)
    })?;
    let best_ap = table
        .iter()
        .find(|(tau, _)| *tau == config.tau)
        .map(|(_, ap)| *ap)
        .unwrap_or(0.0);
    Ok(VotingSearch {
        config,
        best_ap,
        table,
    })
}
