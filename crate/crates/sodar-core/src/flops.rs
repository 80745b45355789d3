//! Closed-form multiply-accumulate counts for the mask head: the cost of
//! generating mask representations (proportional to the squared mask grid
//! resolution) plus the cost of aggregating one stack per classification
//! cell.

use crate::aggregation::AggArchitecture;
use crate::geometry::{GridConfig, NeighborScheme};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelFlops {
    pub level: usize,
    pub g_cls: usize,
    pub g_mask: usize,
    /// MACs of the final convolution that emits one channel per mask cell.
    pub rep_macs: u64,
    /// MACs of running the aggregation network over every classification cell.
    pub agg_macs: u64,
    /// `(g_mask / g_cls)^2`: the representation cost relative to an
    /// uninterpolated head at the same classification resolution.
    pub rep_ratio: f64,
}

impl LevelFlops {
    pub fn total(&self) -> u64 {
        self.rep_macs + self.agg_macs
    }
}

/// Per-level mask-head cost for `h` x `w` output maps. `mask_feat_channels`
/// is the input width of the final representation-producing convolution
/// (a 1x1 layer, so its cost is `feat * G'^2 * h * w`).
pub fn flops_mask_head(
    cfg: &GridConfig,
    arch: &AggArchitecture,
    h: usize,
    w: usize,
    scheme: NeighborScheme,
    mask_feat_channels: usize,
) -> Vec<LevelFlops> {
    let _ = scheme; // input width already baked into `arch`
    let hw = (h * w) as u64;
    let agg_per_cell: u64 = arch.layer_specs().iter().map(|s| s.macs(h, w)).sum();
    cfg.levels
        .iter()
        .enumerate()
        .map(|(level, l)| {
            let rep_macs = mask_feat_channels as u64 * (l.mask * l.mask) as u64 * hw;
            let agg_macs = (l.cls * l.cls) as u64 * agg_per_cell;
            LevelFlops {
                level,
                g_cls: l.cls,
                g_mask: l.mask,
                rep_macs,
                agg_macs,
                rep_ratio: (l.mask * l.mask) as f64 / (l.cls * l.cls) as f64,
            }
        })
        .collect()
}

/// CSV table with one row per level.
pub fn flops_csv(levels: &[LevelFlops]) -> String {
    let mut out = String::from("level,g_cls,g_mask,rep_macs,agg_macs,total_macs,rep_ratio\n");
    for l in levels {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.level,
            l.g_cls,
            l.g_mask,
            l.rep_macs,
            l.agg_macs,
            l.total(),
            l.rep_ratio
        ));
    }
    out
}
