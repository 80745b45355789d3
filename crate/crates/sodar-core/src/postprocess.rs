//! From per-cell class scores and aggregated logit maps to final detections:
//! score filtering, sigmoid, bilinear upsampling to image size, binarization,
//! and greedy class-aware mask NMS.

use std::io::Write;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::GridTensor;

/// One final instance.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// Binarized mask at image resolution.
    pub mask: BinaryMask,
    /// Sigmoid probabilities at image resolution.
    pub soft_mask: GridTensor,
    /// Provenance: (level, i, j) of the classification cell.
    pub source: (usize, usize, usize),
}

/// An aggregated (pre-sigmoid) mask for one classification cell.
#[derive(Debug, Clone)]
pub struct CellMask {
    pub level: usize,
    pub i: usize,
    pub j: usize,
    /// `[H, W]` raw logits.
    pub logits: GridTensor,
}

#[derive(Debug, Clone, Copy)]
pub struct PostprocessConfig {
    /// Minimum best-class score for a cell to emit a candidate.
    pub score_threshold: f64,
    /// Binarization threshold on sigmoid probabilities.
    pub mask_threshold: f64,
    /// Same-class candidates with IoU above this are suppressed.
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            mask_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Bilinear upsampling of an `[h, w]` map to `[oh, ow]` (half-pixel-center
/// convention, clamped at borders).
pub fn bilinear_upsample(map: &GridTensor, oh: usize, ow: usize) -> Result<GridTensor> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("need [H, W], got {s:?}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let d = map.data();
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v = (1.0 - fy) * (1.0 - fx) * d[y0 * w + x0]
                + (1.0 - fy) * fx * d[y0 * w + x1]
                + fy * (1.0 - fx) * d[y1 * w + x0]
                + fy * fx * d[y1 * w + x1];
            out[oy * ow + ox] = v;
        }
    }
    GridTensor::new(vec![oh, ow], out)
}

fn sigmoid_map(map: &GridTensor) -> GridTensor {
    let data = map
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    GridTensor::new(map.shape().to_vec(), data).unwrap()
}

/// Emits one candidate per cell whose best class score reaches the threshold:
/// sigmoid on the logits, bilinear upsample to `img_h` x `img_w`, binarize.
/// Candidates with empty binary masks are dropped.
pub fn decode(
    cls_grids: &[GridTensor],
    cell_masks: &[CellMask],
    cfg: &PostprocessConfig,
    img_h: usize,
    img_w: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for cm in cell_masks {
        let cls = cls_grids.get(cm.level).ok_or_else(|| {
            Error::invalid(format!("cell mask references missing level {}", cm.level))
        })?;
        let s = cls.shape();
        if s.len() != 3 {
            return Err(Error::shape(
                "decode",
                format!("cls grid must be [C, G, G], got {s:?}"),
            ));
        }
        let (c, g) = (s[0], s[1]);
        if cm.i >= g || cm.j >= g {
            return Err(Error::invalid(format!(
                "cell ({}, {}) outside {g}x{g} grid",
                cm.i, cm.j
            )));
        }
        let mut best_class = 0;
        let mut best_score = f64::NEG_INFINITY;
        for ci in 0..c {
            let v = cls.at(&[ci, cm.i, cm.j]);
            if v > best_score {
                best_score = v;
                best_class = ci;
            }
        }
        if best_score < cfg.score_threshold {
            continue;
        }
        let soft_small = sigmoid_map(&cm.logits);
        let soft = bilinear_upsample(&soft_small, img_h, img_w)?;
        let mask = BinaryMask::from_soft(&soft, cfg.mask_threshold)?;
        if mask.is_empty_mask() {
            continue;
        }
        out.push(Detection {
            class_id: best_class,
            score: best_score,
            mask,
            soft_mask: soft,
            source: (cm.level, cm.i, cm.j),
        });
    }
    Ok(out)
}

/// Result of greedy NMS: survivors plus the suppressed candidates (kept
/// around as voting material).
#[derive(Debug, Clone)]
pub struct NmsOutcome {
    pub kept: Vec<Detection>,
    pub suppressed: Vec<Detection>,
}

/// Greedy class-aware mask NMS: highest score first (ties broken by lower
/// `(level, i, j)`), suppressing same-class candidates whose mask IoU
/// exceeds `nms_iou`. At most `max_detections` survivors.
pub fn mask_nms(candidates: &[Detection], cfg: &PostprocessConfig) -> Result<NmsOutcome> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| candidates[a].source.cmp(&candidates[b].source))
    });
    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed: Vec<Detection> = Vec::new();
    for &idx in &order {
        let cand = &candidates[idx];
        let mut surv = kept.len() < cfg.max_detections;
        if surv {
            for k in &kept {
                if k.class_id == cand.class_id && k.mask.iou(&cand.mask)? > cfg.nms_iou {
                    surv = false;
                    break;
                }
            }
        }
        if surv {
            kept.push(cand.clone());
        } else {
            suppressed.push(cand.clone());
        }
    }
    Ok(NmsOutcome { kept, suppressed })
}

/// Line-oriented detection dump: `class score h w rle-counts...` with the
/// RLE scheme documented in [`crate::mask`].
pub fn write_detections<W: Write>(w: &mut W, detections: &[Detection]) -> Result<()> {
    for d in detections {
        let counts: Vec<String> = d.mask.rle_encode().iter().map(|c| c.to_string()).collect();
        writeln!(
            w,
            "{} {} {} {} {}",
            d.class_id,
            d.score,
            d.mask.height(),
            d.mask.width(),
            counts.join(" ")
        )?;
    }
    Ok(())
}
