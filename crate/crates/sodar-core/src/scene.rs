//! Synthetic scene generation: a desk-scale stand-in for a real segmentation
//! dataset. Scenes hold colored disks, rectangles and triangles on a dark
//! background; later-drawn shapes occlude earlier ones and only the visible
//! (disjoint) part of each instance is kept as ground truth.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::par;
use crate::tensor::GridTensor;

pub const SHAPE_CLASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct Instance {
    /// 0 = disk, 1 = rectangle, 2 = triangle.
    pub class_id: usize,
    /// Visible (occlusion-resolved) pixels at image resolution.
    pub mask: BinaryMask,
    pub z_order: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    /// `[3, H, W]` RGB image in `[0, 1]`.
    pub image: GridTensor,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn full_shape_mask(rng: &mut ChaCha8Rng, class_id: usize, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    let scale = h.min(w) as f64;
    let margin = (0.12 * scale).max(3.0);
    let cx = rng.gen_range(margin..w as f64 - margin);
    let cy = rng.gen_range(margin..h as f64 - margin);
    match class_id {
        0 => {
            let r = rng.gen_range(0.08 * scale..0.2 * scale);
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        m.set(y, x, true);
                    }
                }
            }
        }
        1 => {
            let hw = rng.gen_range(0.07 * scale..0.18 * scale);
            let hh = rng.gen_range(0.07 * scale..0.18 * scale);
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx).abs();
                    let dy = (y as f64 + 0.5 - cy).abs();
                    if dx <= hw && dy <= hh {
                        m.set(y, x, true);
                    }
                }
            }
        }
        _ => {
            // three vertices around the center, resampled until non-degenerate
            loop {
                let r = rng.gen_range(0.1 * scale..0.24 * scale);
                let mut pts = [(0.0f64, 0.0f64); 3];
                for p in pts.iter_mut() {
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let rad = rng.gen_range(0.5 * r..r);
                    *p = (cx + rad * ang.cos(), cy + rad * ang.sin());
                }
                let area2 = ((pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1)
                    - (pts[2].0 - pts[0].0) * (pts[1].1 - pts[0].1))
                    .abs();
                if area2 < 0.02 * scale * scale {
                    continue;
                }
                let sign = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
                    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
                };
                for y in 0..h {
                    for x in 0..w {
                        let p = (x as f64 + 0.5, y as f64 + 0.5);
                        let d0 = sign(pts[0], pts[1], p);
                        let d1 = sign(pts[1], pts[2], p);
                        let d2 = sign(pts[2], pts[0], p);
                        let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                        let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                        if !(neg && pos) {
                            m.set(y, x, true);
                        }
                    }
                }
                break;
            }
        }
    }
    m
}

/// Minimum visible pixels per instance, and the same requirement after a 2x
/// area downsample so every target survives at mask-head resolution.
const MIN_VISIBLE: usize = 16;
const MIN_VISIBLE_HALF: usize = 4;

fn try_generate(seed: u64, h: usize, w: usize, max_objects: usize) -> Option<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_objects);
    let full: Vec<(usize, BinaryMask)> = (0..n)
        .map(|_| {
            let class_id = rng.gen_range(0..SHAPE_CLASSES);
            let m = full_shape_mask(&mut rng, class_id, h, w);
            (class_id, m)
        })
        .collect();

    // visibility: later z-order occludes earlier
    let mut visible: Vec<BinaryMask> = full.iter().map(|(_, m)| m.clone()).collect();
    for k in 0..n {
        for later in k + 1..n {
            for (v, occ) in visible[k].pixels_mut().iter_mut().zip(full[later].1.pixels()) {
                if *occ {
                    *v = false;
                }
            }
        }
    }

    for v in &visible {
        if v.area() < MIN_VISIBLE {
            return None;
        }
        if v.downsample2().ok()?.area() < MIN_VISIBLE_HALF {
            return None;
        }
    }

    // render: dark background, one flat color per instance, drawn in z order
    let bg: [f64; 3] = [
        rng.gen_range(0.0..0.15),
        rng.gen_range(0.0..0.15),
        rng.gen_range(0.0..0.15),
    ];
    let mut image = GridTensor::zeros(vec![3, h, w]);
    for c in 0..3 {
        image.data_mut()[c * h * w..(c + 1) * h * w].fill(bg[c]);
    }
    for (_, m) in &full {
        let color: [f64; 3] = [
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
        ];
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    for c in 0..3 {
                        image.data_mut()[c * h * w + y * w + x] = color[c];
                    }
                }
            }
        }
    }

    let instances = full
        .into_iter()
        .zip(visible)
        .enumerate()
        .map(|(z, ((class_id, _), mask))| Instance {
            class_id,
            mask,
            z_order: z,
        })
        .collect();

    Some(Scene {
        seed,
        image,
        instances,
    })
}

/// Generates one scene deterministically from its seed. Retries with derived
/// seeds until the visibility invariants hold.
pub fn generate_scene(seed: u64, h: usize, w: usize, max_objects: usize) -> Scene {
    let mut attempt_seed = seed;
    loop {
        if let Some(s) = try_generate(attempt_seed, h, w, max_objects) {
            return Scene { seed, ..s };
        }
        attempt_seed = splitmix64(attempt_seed);
    }
}

/// Deterministic scene list; scene `i` derives its seed from `(seed, i)` so
/// generation parallelizes without changing results.
pub fn generate_scenes(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    max_objects: usize,
) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    if max_objects == 0 {
        return Err(Error::invalid("max objects must be at least 1"));
    }
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!(
            "scene size {h}x{w} too small, need at least 16x16"
        )));
    }
    Ok(par::map_indexed(count, |i| {
        generate_scene(splitmix64(seed ^ (i as u64).wrapping_mul(0xA24BAED4963EE407)), h, w, max_objects)
    }))
}

/// Writes `scene_%05d.gtf` + `scene_%05d.rle` pairs into `dir`.
pub fn save_scenes(scenes: &[Scene], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        s.image.save_gtf(&dir.join(format!("scene_{i:05}.gtf")))?;
        let mut side = String::new();
        side.push_str(&format!(
            "{} {} {} {}\n",
            s.height(),
            s.width(),
            s.instances.len(),
            s.seed
        ));
        for inst in &s.instances {
            let counts: Vec<String> = inst
                .mask
                .rle_encode()
                .iter()
                .map(|c| c.to_string())
                .collect();
            side.push_str(&format!(
                "{} {} {}\n",
                inst.class_id,
                inst.z_order,
                counts.join(" ")
            ));
        }
        std::fs::write(dir.join(format!("scene_{i:05}.rle")), side)?;
    }
    Ok(())
}

/// Loads every `scene_*.gtf` + sidecar pair from `dir`, in index order.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut indices: Vec<usize> = std::fs::read_dir(dir)?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let idx = name
                .strip_prefix("scene_")?
                .strip_suffix(".gtf")?
                .parse()
                .ok()?;
            Some(idx)
        })
        .collect();
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::invalid(format!(
            "no scene files found in {}",
            dir.display()
        )));
    }
    let mut scenes = Vec::with_capacity(indices.len());
    for i in indices {
        let image = GridTensor::load_gtf(&dir.join(format!("scene_{i:05}.gtf")))?;
        let side = std::fs::read_to_string(dir.join(format!("scene_{i:05}.rle")))?;
        let mut lines = side.lines();
        let header = lines.next().ok_or(Error::Malformed {
            what: "scene sidecar",
            detail: "missing header".into(),
        })?;
        let head: Vec<u64> = header
            .split_whitespace()
            .map(|t| t.parse().unwrap_or(0))
            .collect();
        if head.len() != 4 {
            return Err(Error::Malformed {
                what: "scene sidecar",
                detail: format!("bad header {header:?}"),
            });
        }
        let (h, w, n, seed) = (head[0] as usize, head[1] as usize, head[2] as usize, head[3]);
        let mut instances = Vec::with_capacity(n);
        for line in lines.take(n) {
            let mut toks = line.split_whitespace();
            let class_id: usize = toks.next().and_then(|t| t.parse().ok()).ok_or(
                Error::Malformed {
                    what: "scene sidecar",
                    detail: "missing class id".into(),
                },
            )?;
            let z_order: usize = toks.next().and_then(|t| t.parse().ok()).ok_or(
                Error::Malformed {
                    what: "scene sidecar",
                    detail: "missing z order".into(),
                },
            )?;
            let counts: Vec<usize> = toks.map(|t| t.parse().unwrap_or(0)).collect();
            instances.push(Instance {
                class_id,
                mask: BinaryMask::rle_decode(h, w, &counts)?,
                z_order,
            });
        }
        scenes.push(Scene {
            seed,
            image,
            instances,
        });
    }
    Ok(scenes)
}
