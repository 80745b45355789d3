//! Mask voting baselines: post-hoc averaging of overlapping candidate masks,
//! either plain, score-weighted, or IoU-weighted. Voting operates on soft
//! (sigmoid) masks; similarity for the inclusion threshold is mask IoU on the
//! binarized versions.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::GridTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteScheme {
    Average,
    ScoreWeighted,
    IouWeighted,
}

impl VoteScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(VoteScheme::Average),
            "score" | "score-weighted" => Ok(VoteScheme::ScoreWeighted),
            "iou" | "iou-weighted" => Ok(VoteScheme::IouWeighted),
            other => Err(Error::invalid(format!("unknown voting scheme {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VoteScheme::Average => "average",
            VoteScheme::ScoreWeighted => "score",
            VoteScheme::IouWeighted => "iou",
        }
    }

    pub const ALL: [VoteScheme; 3] = [
        VoteScheme::Average,
        VoteScheme::ScoreWeighted,
        VoteScheme::IouWeighted,
    ];
}

#[derive(Debug, Clone, Copy)]
pub struct VoteConfig {
    pub scheme: VoteScheme,
    /// Candidates must reach this IoU with the kept mask to participate.
    pub tau: f64,
}

impl VoteConfig {
    pub fn new(scheme: VoteScheme, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!(
                "voting IoU threshold must lie strictly in (0, 1), got {tau}"
            )));
        }
        Ok(Self { scheme, tau })
    }
}

/// Mask IoU: `|a ∩ b| / |a ∪ b|`, 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.iou(b)
}

/// A voting participant: soft mask, its binarized form, and its score.
#[derive(Debug, Clone)]
pub struct VoteCandidate<'a> {
    pub soft: &'a GridTensor,
    pub mask: &'a BinaryMask,
    pub score: f64,
}

/// Replaces a kept soft mask with the (weighted) average of all candidates
/// whose binary IoU with the kept mask reaches `tau`. Weights are normalized
/// to sum to one; an empty post-threshold candidate set returns the kept
/// mask unchanged.
pub fn vote(
    kept: &VoteCandidate,
    candidates: &[VoteCandidate],
    cfg: &VoteConfig,
) -> Result<GridTensor> {
    let mut selected: Vec<(&VoteCandidate, f64)> = Vec::new();
    for cand in candidates {
        if cand.soft.shape() != kept.soft.shape() {
            return Err(Error::shape(
                "vote",
                format!("{:?} vs {:?}", cand.soft.shape(), kept.soft.shape()),
            ));
        }
        let iou = mask_iou(cand.mask, kept.mask)?;
        if iou >= cfg.tau {
            let weight = match cfg.scheme {
                VoteScheme::Average => 1.0,
                VoteScheme::ScoreWeighted => cand.score,
                VoteScheme::IouWeighted => iou,
            };
            selected.push((cand, weight));
        }
    }
    if selected.is_empty() {
        return Ok(kept.soft.clone());
    }
    let total: f64 = selected.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Ok(kept.soft.clone());
    }
    let n = kept.soft.len();
    let mut acc = vec![0.0; n];
    for (cand, w) in &selected {
        for (a, v) in acc.iter_mut().zip(cand.soft.data()) {
            *a += w * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    GridTensor::new(kept.soft.shape().to_vec(), acc)
}

/// IoU thresholds probed by the grid search.
pub const TAU_GRID: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Grid search over [`TAU_GRID`]: `eval_ap` maps a voting config to a
/// validation AP. Highest AP wins; ties go to the smaller threshold.
/// Returns the winning config and the full `(tau, ap)` table.
pub fn grid_search_tau<F>(scheme: VoteScheme, mut eval_ap: F) -> Result<(VoteConfig, Vec<(f64, f64)>)>
where
    F: FnMut(&VoteConfig) -> Result<f64>,
{
    let mut table = Vec::with_capacity(TAU_GRID.len());
    let mut best: Option<(VoteConfig, f64)> = None;
    for &tau in &TAU_GRID {
        let cfg = VoteConfig::new(scheme, tau)?;
        let ap = eval_ap(&cfg)?;
        table.push((tau, ap));
        let better = match &best {
            None => true,
            Some((_, best_ap)) => ap > *best_ap,
        };
        if better {
            best = Some((cfg, ap));
        }
    }
    Ok((best.expect("TAU_GRID is non-empty").0, table))
}
