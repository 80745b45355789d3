//! COCO-style mask AP: greedy score-descending matching against unmatched
//! same-class ground truth, 101-point interpolated precision-recall, mean
//! over classes present in the ground truth.

use std::collections::BTreeMap;

use crate::mask::BinaryMask;

/// A detection prepared for evaluation.
#[derive(Debug, Clone)]
pub struct EvalDet {
    pub scene: usize,
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
    /// Deterministic tie-break for equal scores: source (level, i, j).
    pub tiebreak: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct EvalGt {
    pub scene: usize,
    pub class_id: usize,
    pub mask: BinaryMask,
}

/// The ten COCO thresholds `.50:.05:.95`.
pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean over [`COCO_THRESHOLDS`] of the class-mean AP.
    pub ap: f64,
    pub ap50: f64,
    pub ap60: f64,
    pub ap70: f64,
    pub ap75: f64,
    pub ap80: f64,
    pub ap90: f64,
    /// Class-mean AP at 0.5 per class id.
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub n_detections: usize,
    pub n_ground_truth: usize,
}

impl EvalReport {
    /// CSV with one `metric,value` row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("ap,{}\n", self.ap));
        out.push_str(&format!("ap50,{}\n", self.ap50));
        out.push_str(&format!("ap60,{}\n", self.ap60));
        out.push_str(&format!("ap70,{}\n", self.ap70));
        out.push_str(&format!("ap75,{}\n", self.ap75));
        out.push_str(&format!("ap80,{}\n", self.ap80));
        out.push_str(&format!("ap90,{}\n", self.ap90));
        for (c, ap) in &self.per_class_ap50 {
            out.push_str(&format!("ap50_class_{c},{ap}\n"));
        }
        out.push_str(&format!("detections,{}\n", self.n_detections));
        out.push_str(&format!("ground_truth,{}\n", self.n_ground_truth));
        out
    }
}

fn sorted_class_dets<'a>(dets: &'a [EvalDet], class_id: usize) -> Vec<&'a EvalDet> {
    let mut v: Vec<&EvalDet> = dets.iter().filter(|d| d.class_id == class_id).collect();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.scene, a.tiebreak).cmp(&(b.scene, b.tiebreak)))
    });
    v
}

/// True/false-positive flags for one class at one IoU threshold, in match
/// order, plus the class ground-truth count. Greedy: every detection takes
/// the highest-IoU unmatched ground truth of its scene, if that IoU reaches
/// the threshold.
fn match_class(dets: &[EvalDet], gts: &[EvalGt], class_id: usize, thresh: f64) -> (Vec<bool>, usize) {
    let class_dets = sorted_class_dets(dets, class_id);
    let gt_idx: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class_id == class_id)
        .map(|(i, _)| i)
        .collect();
    let n_gt = gt_idx.len();
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(class_dets.len());
    for det in class_dets {
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_idx {
            if matched[gi] || gts[gi].scene != det.scene {
                continue;
            }
            let iou = det.mask.iou(&gts[gi].mask).unwrap_or(0.0);
            if iou >= thresh {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    (flags, n_gt)
}

/// 101-point interpolated AP from ordered true-positive flags.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = flags.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at any recall >= r
    let mut envelope = prec.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0usize;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while k < n && rec[k] + 1e-12 < r {
            k += 1;
        }
        if k < n {
            total += envelope[k];
        }
    }
    total / 101.0
}

/// Class-mean AP at one IoU threshold; `None` when no class has any ground
/// truth. Detections for classes with no ground truth anywhere are excluded
/// from the mean.
pub fn average_precision(dets: &[EvalDet], gts: &[EvalGt], thresh: f64) -> Option<f64> {
    let per_class = per_class_ap(dets, gts, thresh);
    if per_class.is_empty() {
        return None;
    }
    Some(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// AP per class (classes present in the ground truth only).
pub fn per_class_ap(dets: &[EvalDet], gts: &[EvalGt], thresh: f64) -> BTreeMap<usize, f64> {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let (flags, n_gt) = match_class(dets, gts, c, thresh);
            (c, ap_from_flags(&flags, n_gt))
        })
        .collect()
}

/// Full evaluation over the COCO threshold ladder.
pub fn evaluate(dets: &[EvalDet], gts: &[EvalGt]) -> EvalReport {
    let at = |t: f64| average_precision(dets, gts, t).unwrap_or(0.0);
    let ap = COCO_THRESHOLDS.iter().map(|&t| at(t)).sum::<f64>() / COCO_THRESHOLDS.len() as f64;
    EvalReport {
        ap,
        ap50: at(0.5),
        ap60: at(0.6),
        ap70: at(0.7),
        ap75: at(0.75),
        ap80: at(0.8),
        ap90: at(0.9),
        per_class_ap50: per_class_ap(dets, gts, 0.5),
        n_detections: dets.len(),
        n_ground_truth: gts.len(),
    }
}
