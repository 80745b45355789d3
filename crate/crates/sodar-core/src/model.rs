//! A small fully-convolutional network producing, per level, classification
//! scores, raw mask representations, and (in dynamic mode) per-cell
//! aggregation parameters, plus a shared bottom-up context feature.
//!
//! Layout for a `[3, H, W]` image (dims divisible by 4):
//! three conv+ReLU encoder blocks of widths 8/16/16 with 2x average pooling
//! between them; mask heads read the stride-2 stage (so mask maps are
//! `H/2 x W/2`), classification and parameter heads read the stride-4 stage
//! resized to the grid resolution. The mask head input carries two extra
//! normalized-coordinate channels so per-cell representations can be
//! location-aware.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregation::{
    aggregate_cells, aggregate_static, build_stack, AggArchitecture, ContextFeature, ContextMode,
    DynamicParams,
};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::geometry::{interp_index, GridConfig, LevelGrid, MaskRepGrid, NeighborScheme};
use crate::scene::Scene;
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, GridTensor};

/// How final per-cell masks are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// No aggregation: the mask representation of the mapped cell is the
    /// prediction, supervised directly.
    Baseline,
    /// Aggregation with one learned parameter vector shared by all cells.
    Static,
    /// Aggregation with per-cell predicted parameters.
    Dynamic,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(HeadMode::Baseline),
            "static" => Ok(HeadMode::Static),
            "dynamic" => Ok(HeadMode::Dynamic),
            other => Err(Error::invalid(format!("unknown head mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Baseline => "baseline",
            HeadMode::Static => "static",
            HeadMode::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub grids: GridConfig,
    pub scheme: NeighborScheme,
    pub ctx_mode: ContextMode,
    pub ctx_channels: usize,
    pub agg_hidden: usize,
    pub agg_layers: usize,
    pub agg_kernel: usize,
    pub head: HeadMode,
    pub deform: bool,
    /// Scale factor of the positive center region relative to box extent.
    pub center_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: crate::scene::SHAPE_CLASSES,
            img_h: 64,
            img_w: 64,
            grids: GridConfig::single(8, 8).unwrap(),
            scheme: NeighborScheme::Four,
            ctx_mode: ContextMode::With,
            ctx_channels: 16,
            agg_hidden: 4,
            agg_layers: 3,
            agg_kernel: 3,
            head: HeadMode::Dynamic,
            deform: false,
            center_factor: 0.2,
        }
    }
}

const ENC1_W: usize = 8;
const ENC2_W: usize = 16;
const ENC3_W: usize = 16;
const MASK_FEAT: usize = 16;
const CLS_FEAT: usize = 16;
const PARAM_FEAT: usize = 32;

impl ModelConfig {
    pub fn mask_h(&self) -> usize {
        self.img_h / 2
    }

    pub fn mask_w(&self) -> usize {
        self.img_w / 2
    }

    /// Whether the context head exists at all.
    pub fn uses_ctx(&self) -> bool {
        self.head != HeadMode::Baseline && self.ctx_mode != ContextMode::Without
    }

    pub fn arch(&self) -> AggArchitecture {
        let width = AggArchitecture::input_width(self.scheme, self.ctx_mode, self.ctx_channels);
        AggArchitecture::new(width, self.agg_hidden, self.agg_layers, self.agg_kernel).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_h % 4 != 0 || self.img_w % 4 != 0 {
            return Err(Error::invalid(format!(
                "image dims must be divisible by 4, got {}x{}",
                self.img_h, self.img_w
            )));
        }
        if self.classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if self.ctx_mode == ContextMode::Only && self.head == HeadMode::Baseline {
            return Err(Error::invalid("baseline head cannot use context-only mode"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("classes", self.classes);
        kv.set("img_h", self.img_h);
        kv.set("img_w", self.img_w);
        let grids: Vec<String> = self
            .grids
            .levels
            .iter()
            .map(|l| format!("{}:{}", l.cls, l.mask))
            .collect();
        kv.set("grids", grids.join(","));
        kv.set("scheme", self.scheme.name());
        kv.set("ctx_mode", self.ctx_mode.name());
        kv.set("ctx_channels", self.ctx_channels);
        kv.set("agg_hidden", self.agg_hidden);
        kv.set("agg_layers", self.agg_layers);
        kv.set("agg_kernel", self.agg_kernel);
        kv.set("head", self.head.name());
        kv.set("deform", self.deform);
        kv.set("center_factor", self.center_factor);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let grids = match kv.raw("grids") {
            None => d.grids.clone(),
            Some(text) => parse_grids(text)?,
        };
        let cfg = ModelConfig {
            classes: kv.get_or("classes", d.classes)?,
            img_h: kv.get_or("img_h", d.img_h)?,
            img_w: kv.get_or("img_w", d.img_w)?,
            grids,
            scheme: match kv.raw("scheme") {
                Some(s) => NeighborScheme::parse(s)?,
                None => d.scheme,
            },
            ctx_mode: match kv.raw("ctx_mode") {
                Some(s) => ContextMode::parse(s)?,
                None => d.ctx_mode,
            },
            ctx_channels: kv.get_or("ctx_channels", d.ctx_channels)?,
            agg_hidden: kv.get_or("agg_hidden", d.agg_hidden)?,
            agg_layers: kv.get_or("agg_layers", d.agg_layers)?,
            agg_kernel: kv.get_or("agg_kernel", d.agg_kernel)?,
            head: match kv.raw("head") {
                Some(s) => HeadMode::parse(s)?,
                None => d.head,
            },
            deform: kv.get_bool_or("deform", d.deform)?,
            center_factor: kv.get_or("center_factor", d.center_factor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `"40:40,36:36"` or preset names `standard`, `plus-cls`,
/// `minus-mask`, or a single `"8"` / `"8:8"`.
pub fn parse_grids(text: &str) -> Result<GridConfig> {
    match text {
        "standard" => return Ok(GridConfig::standard()),
        "plus-cls" => return Ok(GridConfig::plus_cls()),
        "minus-mask" => return Ok(GridConfig::minus_mask()),
        _ => {}
    }
    let mut levels = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let (cls, mask) = match part.split_once(':') {
            Some((c, m)) => (c, m),
            None => (part, part),
        };
        let cls: usize = cls.parse().map_err(|_| Error::Malformed {
            what: "grid spec",
            detail: format!("bad resolution {part:?}"),
        })?;
        let mask: usize = mask.parse().map_err(|_| Error::Malformed {
            what: "grid spec",
            detail: format!("bad resolution {part:?}"),
        })?;
        levels.push(LevelGrid { cls, mask });
    }
    GridConfig::new(levels)
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub value: GridTensor,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub params: Vec<NamedParam>,
}

pub struct LevelOutputs {
    pub grid: LevelGrid,
    pub cls_logits: Var,
    pub cls_scores: Var,
    pub reps: MaskRepGrid,
    pub dynamic: Option<DynamicParams>,
}

pub struct ForwardOutputs {
    pub levels: Vec<LevelOutputs>,
    pub ctx: Option<ContextFeature>,
    pub shared_theta: Option<Var>,
    /// Leaf vars aligned with `ToyModel::params`, for gradient extraction.
    pub param_vars: Vec<Var>,
}

struct ParamInit<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<NamedParam>,
}

impl<'a> ParamInit<'a> {
    fn conv(&mut self, name: &str, spec: ConvSpec, weight_std: f64, bias: f64) {
        let n: usize = spec.weight_shape().iter().product();
        let dist = Normal::new(0.0, weight_std).unwrap();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.params.push(NamedParam {
            name: format!("{name}_w"),
            value: GridTensor::new(spec.weight_shape(), w).unwrap(),
        });
        self.params.push(NamedParam {
            name: format!("{name}_b"),
            value: GridTensor::full(vec![spec.out_channels], bias),
        });
    }

    fn kaiming(&mut self, name: &str, spec: ConvSpec) {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        self.conv(name, spec, (2.0 / fan_in).sqrt(), 0.0);
    }
}

/// Packed per-layer Kaiming weights with zero biases for the aggregation net.
fn packed_kaiming_theta(arch: &AggArchitecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut theta = Vec::with_capacity(arch.d_dim());
    for spec in arch.layer_specs() {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let wn = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel;
        theta.extend((0..wn).map(|_| dist.sample(rng)));
        theta.extend(std::iter::repeat(0.0).take(spec.out_channels));
    }
    theta
}

impl ToyModel {
    /// Fresh model with seed-deterministic initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit {
            rng: &mut rng,
            params: Vec::new(),
        };

        init.kaiming("enc1", ConvSpec::new(3, ENC1_W, 3)?);
        init.kaiming("enc2", ConvSpec::new(ENC1_W, ENC2_W, 3)?);
        init.kaiming("enc3", ConvSpec::new(ENC2_W, ENC3_W, 3)?);

        if cfg.uses_ctx() {
            init.kaiming("ctx_lat1", ConvSpec::new(ENC1_W, cfg.ctx_channels, 1)?);
            init.kaiming("ctx_lat2", ConvSpec::new(ENC2_W, cfg.ctx_channels, 1)?);
            init.kaiming("ctx_lat3", ConvSpec::new(ENC3_W, cfg.ctx_channels, 1)?);
            init.kaiming("ctx_fuse", ConvSpec::new(cfg.ctx_channels, cfg.ctx_channels, 1)?);
        }

        let arch = cfg.arch();
        let d = arch.d_dim();
        let p = cfg.scheme.offset_dim();
        for (l, level) in cfg.grids.levels.iter().enumerate() {
            init.kaiming(&format!("l{l}_cls_a"), ConvSpec::new(ENC3_W, CLS_FEAT, 3)?);
            // negative bias starts class scores low, matching the sparse grid
            init.conv(
                &format!("l{l}_cls_b"),
                ConvSpec::new(CLS_FEAT, cfg.classes, 1)?,
                0.01,
                -2.0,
            );
            init.kaiming(
                &format!("l{l}_mask_a"),
                ConvSpec::new(ENC2_W + 2, MASK_FEAT, 3)?,
            );
            init.conv(
                &format!("l{l}_mask_b"),
                ConvSpec::new(MASK_FEAT, level.mask * level.mask, 1)?,
                0.05,
                0.0,
            );
            if cfg.head == HeadMode::Dynamic {
                init.kaiming(&format!("l{l}_param_a"), ConvSpec::new(ENC3_W, PARAM_FEAT, 3)?);
                let out = d + if cfg.deform { p } else { 0 };
                init.conv(
                    &format!("l{l}_param_b"),
                    ConvSpec::new(PARAM_FEAT, out, 1)?,
                    0.01,
                    0.0,
                );
                // bias the theta channels with a packed Kaiming vector: the
                // predicted nets then start as one sane shared net plus small
                // per-cell deviations, and the offset channels (zeroed below)
                // start sampling at the nominal neighbor cells
                let last = init.params.len() - 1;
                let packed = packed_kaiming_theta(&arch, init.rng);
                init.params[last].value.data_mut()[..d].copy_from_slice(&packed);
                if cfg.deform {
                    let w = &mut init.params[last - 1].value;
                    let per_ch = PARAM_FEAT;
                    for ch in d..out {
                        let start = ch * per_ch;
                        w.data_mut()[start..start + per_ch].fill(0.0);
                    }
                }
            }
        }

        if cfg.head == HeadMode::Static {
            init.params.push(NamedParam {
                name: "shared_theta".into(),
                value: GridTensor::new(vec![d], packed_kaiming_theta(&arch, init.rng))?,
            });
        }

        Ok(Self {
            cfg,
            params: init.params,
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn leaf_conv(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        name: &str,
        x: Var,
        kernel: usize,
    ) -> Result<Var> {
        let wi = self
            .param_index(&format!("{name}_w"))
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}_w")))?;
        let bi = self
            .param_index(&format!("{name}_b"))
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}_b")))?;
        let ws = self.params[wi].value.shape();
        let spec = ConvSpec::new(ws[1], ws[0], kernel)?;
        tape.conv2d(x, vars[wi], vars[bi], spec)
    }

    /// Runs the full network, recording on `tape`.
    pub fn forward(&self, tape: &mut Tape, image: &GridTensor) -> Result<ForwardOutputs> {
        let cfg = &self.cfg;
        if image.shape() != [3, cfg.img_h, cfg.img_w] {
            return Err(Error::shape(
                "ToyModel::forward",
                format!(
                    "image must be [3, {}, {}], got {:?}",
                    cfg.img_h,
                    cfg.img_w,
                    image.shape()
                ),
            ));
        }
        cfg.validate()?;

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let vars = &param_vars;

        let x0 = tape.leaf(image.clone());
        let e1 = {
            let c = self.leaf_conv(tape, vars, "enc1", x0, 3)?;
            tape.relu(c)?
        };
        let p1 = tape.avg_pool2(e1)?;
        let e2 = {
            let c = self.leaf_conv(tape, vars, "enc2", p1, 3)?;
            tape.relu(c)?
        };
        let p2 = tape.avg_pool2(e2)?;
        let e3 = {
            let c = self.leaf_conv(tape, vars, "enc3", p2, 3)?;
            tape.relu(c)?
        };

        let (mh, mw) = (cfg.mask_h(), cfg.mask_w());

        let ctx = if cfg.uses_ctx() {
            let s1 = tape.avg_pool2(e1)?;
            let c1 = self.leaf_conv(tape, vars, "ctx_lat1", s1, 1)?;
            let c2 = self.leaf_conv(tape, vars, "ctx_lat2", e2, 1)?;
            let c3r = self.leaf_conv(tape, vars, "ctx_lat3", e3, 1)?;
            let c3 = tape.resize_nearest(c3r, mh, mw)?;
            let s = tape.add(c1, c2)?;
            let s = tape.add(s, c3)?;
            let fused = self.leaf_conv(tape, vars, "ctx_fuse", s, 1)?;
            Some(ContextFeature::new(tape, fused)?)
        } else {
            None
        };

        // normalized coordinate channels for the mask head
        let coords = {
            let mut t = GridTensor::zeros(vec![2, mh, mw]);
            for y in 0..mh {
                for x in 0..mw {
                    let yn = 2.0 * (y as f64 + 0.5) / mh as f64 - 1.0;
                    let xn = 2.0 * (x as f64 + 0.5) / mw as f64 - 1.0;
                    t.set(&[0, y, x], yn);
                    t.set(&[1, y, x], xn);
                }
            }
            tape.leaf(t)
        };

        let arch = cfg.arch();
        let d = arch.d_dim();
        let p = cfg.scheme.offset_dim();
        let mut levels = Vec::with_capacity(cfg.grids.levels.len());
        for (l, level) in cfg.grids.levels.iter().enumerate() {
            let g = level.cls;
            let cls_in = tape.resize_nearest(e3, g, g)?;
            let ca = self.leaf_conv(tape, vars, &format!("l{l}_cls_a"), cls_in, 3)?;
            let ca = tape.relu(ca)?;
            let cls_logits = self.leaf_conv(tape, vars, &format!("l{l}_cls_b"), ca, 1)?;
            let cls_scores = tape.sigmoid(cls_logits)?;

            let mask_in = tape.concat_channels(&[e2, coords])?;
            let ma = self.leaf_conv(tape, vars, &format!("l{l}_mask_a"), mask_in, 3)?;
            let ma = tape.relu(ma)?;
            let rep_var = self.leaf_conv(tape, vars, &format!("l{l}_mask_b"), ma, 1)?;
            let reps = MaskRepGrid::new(tape, rep_var, level.mask)?;

            let dynamic = if cfg.head == HeadMode::Dynamic {
                let pin = tape.resize_nearest(e3, g, g)?;
                let pa = self.leaf_conv(tape, vars, &format!("l{l}_param_a"), pin, 3)?;
                let pa = tape.relu(pa)?;
                let pvec = self.leaf_conv(tape, vars, &format!("l{l}_param_b"), pa, 1)?;
                let theta_chw = tape.slice_reshape(pvec, 0, vec![d, g, g])?;
                let theta = tape.permute_chw_to_hwc(theta_chw)?;
                let offsets = if cfg.deform {
                    let off_chw = tape.slice_reshape(pvec, d * g * g, vec![p, g, g])?;
                    Some(tape.permute_chw_to_hwc(off_chw)?)
                } else {
                    None
                };
                Some(DynamicParams::new(tape, theta, offsets, g, d)?)
            } else {
                None
            };

            levels.push(LevelOutputs {
                grid: *level,
                cls_logits,
                cls_scores,
                reps,
                dynamic,
            });
        }

        let shared_theta = if cfg.head == HeadMode::Static {
            let i = self
                .param_index("shared_theta")
                .ok_or_else(|| Error::invalid("missing shared_theta parameter"))?;
            Some(vars[i])
        } else {
            None
        };

        Ok(ForwardOutputs {
            levels,
            ctx,
            shared_theta,
            param_vars,
        })
    }

    /// Raw logit map (pre-sigmoid, `[H, W]`) of each requested classification
    /// cell, per the configured head mode. Dynamic cells run as one batched
    /// grouped convolution.
    pub fn mask_logits_for_cells(
        &self,
        tape: &mut Tape,
        out: &ForwardOutputs,
        level_idx: usize,
        cells: &[(usize, usize)],
    ) -> Result<Vec<Var>> {
        let level = &out.levels[level_idx];
        let ctx = out.ctx.as_ref();
        let arch = self.cfg.arch();
        let g = level.grid.cls;
        match self.cfg.head {
            HeadMode::Baseline => {
                let gm = level.reps.grid;
                let hw = level.reps.h * level.reps.w;
                cells
                    .iter()
                    .map(|&(i, j)| {
                        let (mi, mj) = interp_index(i, j, g, gm);
                        tape.slice_reshape(
                            level.reps.var,
                            (mi * gm + mj) * hw,
                            vec![level.reps.h, level.reps.w],
                        )
                    })
                    .collect()
            }
            HeadMode::Static => {
                let theta = out
                    .shared_theta
                    .ok_or_else(|| Error::invalid("static head without shared parameters"))?;
                cells
                    .iter()
                    .map(|&(i, j)| {
                        let stack = build_stack(
                            tape,
                            &level.reps,
                            i,
                            j,
                            self.cfg.scheme,
                            g,
                            ctx,
                            self.cfg.ctx_mode,
                            None,
                        )?;
                        aggregate_static(tape, stack, theta, &arch)
                    })
                    .collect()
            }
            HeadMode::Dynamic => {
                let params = level
                    .dynamic
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dynamic head without predicted parameters"))?;
                aggregate_cells(
                    tape,
                    &level.reps,
                    params,
                    ctx,
                    cells,
                    self.cfg.scheme,
                    self.cfg.ctx_mode,
                    &arch,
                )
            }
        }
    }

    /// Writes `config.txt`, `manifest.txt` and one GTF file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.cfg.to_kv().to_text())?;
        let mut manifest = String::new();
        for p in &self.params {
            let file = format!("{}.gtf", p.name);
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{}\t{}\t{}\n", p.name, file, dims.join("x")));
            p.value.save_gtf(&dir.join(file))?;
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_text = std::fs::read_to_string(dir.join("config.txt"))?;
        let cfg = ModelConfig::from_kv(&KvConfig::parse(&cfg_text)?)?;
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut params = Vec::new();
        for line in manifest.lines() {
            let mut toks = line.split('\t');
            let name = toks.next().ok_or(Error::Malformed {
                what: "checkpoint manifest",
                detail: "missing name".into(),
            })?;
            let file = toks.next().ok_or(Error::Malformed {
                what: "checkpoint manifest",
                detail: format!("missing file for {name}"),
            })?;
            let dims = toks.next().ok_or(Error::Malformed {
                what: "checkpoint manifest",
                detail: format!("missing shape for {name}"),
            })?;
            let value = GridTensor::load_gtf(&dir.join(file))?;
            let expect: Vec<usize> = dims.split('x').map(|d| d.parse().unwrap_or(0)).collect();
            if value.shape() != expect {
                return Err(Error::Malformed {
                    what: "checkpoint manifest",
                    detail: format!(
                        "{name}: manifest says {expect:?} but file holds {:?}",
                        value.shape()
                    ),
                });
            }
            params.push(NamedParam {
                name: name.to_string(),
                value,
            });
        }
        Ok(Self { cfg, params })
    }
}

/// One positive classification cell and the instance it owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositiveCell {
    pub level: usize,
    pub i: usize,
    pub j: usize,
    pub instance: usize,
}

#[derive(Debug, Clone)]
pub struct LabelAssignment {
    /// Sorted by (level, i, j); each cell maps to exactly one instance.
    pub positives: Vec<PositiveCell>,
    /// Per-instance target mask at mask-head resolution.
    pub target_masks: Vec<GridTensor>,
    /// Per-instance class id.
    pub instance_classes: Vec<usize>,
}

/// Level index by object scale: level `l` of `L` has nominal scale
/// `img_min / 2^(L-1-l)` (finest level first), with cut points at the
/// geometric midpoints of adjacent scales.
pub fn assign_level(sqrt_area: f64, n_levels: usize, img_min: usize) -> usize {
    for l in 0..n_levels - 1 {
        let nominal = img_min as f64 / (1 << (n_levels - 1 - l)) as f64;
        let cut = nominal * std::f64::consts::SQRT_2;
        if sqrt_area <= cut {
            return l;
        }
    }
    n_levels - 1
}

/// Positive cells per the center-region rule: a cell is positive for an
/// instance when its center falls inside the instance's scaled center region
/// (the mass-center cell is always included). Contended cells go to the
/// instance with the smaller visible area.
pub fn assign_labels(scene: &Scene, cfg: &ModelConfig) -> LabelAssignment {
    let (img_h, img_w) = (scene.height(), scene.width());
    let img_min = img_h.min(img_w);
    let n_levels = cfg.grids.levels.len();

    let mut claims: Vec<(PositiveCell, usize)> = Vec::new(); // (cell, area)
    let mut targets = Vec::with_capacity(scene.instances.len());
    let mut instance_classes = Vec::with_capacity(scene.instances.len());
    for (k, inst) in scene.instances.iter().enumerate() {
        let area = inst.mask.area();
        instance_classes.push(inst.class_id);
        targets.push(
            inst.mask
                .downsample2()
                .expect("image dims divisible by 4")
                .to_tensor(),
        );
        if area == 0 {
            continue;
        }
        let (mut cy, mut cx) = (0.0f64, 0.0f64);
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for y in 0..img_h {
            for x in 0..img_w {
                if inst.mask.get(y, x) {
                    cy += y as f64 + 0.5;
                    cx += x as f64 + 0.5;
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        cy /= area as f64;
        cx /= area as f64;
        let bh = (y1 - y0 + 1) as f64;
        let bw = (x1 - x0 + 1) as f64;
        let level = assign_level((area as f64).sqrt(), n_levels, img_min);
        let g = cfg.grids.levels[level].cls;

        let half_h = 0.5 * cfg.center_factor * bh;
        let half_w = 0.5 * cfg.center_factor * bw;
        let cell_of = |py: f64, px: f64| -> (usize, usize) {
            let i = ((py / img_h as f64) * g as f64).floor() as isize;
            let j = ((px / img_w as f64) * g as f64).floor() as isize;
            (
                i.clamp(0, g as isize - 1) as usize,
                j.clamp(0, g as isize - 1) as usize,
            )
        };
        let mut cells = vec![cell_of(cy, cx)];
        for i in 0..g {
            let py = (i as f64 + 0.5) * img_h as f64 / g as f64;
            if (py - cy).abs() > half_h {
                continue;
            }
            for j in 0..g {
                let px = (j as f64 + 0.5) * img_w as f64 / g as f64;
                if (px - cx).abs() <= half_w {
                    cells.push((i, j));
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();
        for (i, j) in cells {
            claims.push((
                PositiveCell {
                    level,
                    i,
                    j,
                    instance: k,
                },
                area,
            ));
        }
    }

    // resolve contended cells: smaller area wins, earlier instance on ties
    claims.sort_by_key(|(c, area)| (c.level, c.i, c.j, *area, c.instance));
    let mut positives: Vec<PositiveCell> = Vec::new();
    for (cell, _) in claims {
        if let Some(last) = positives.last() {
            if (last.level, last.i, last.j) == (cell.level, cell.i, cell.j) {
                continue;
            }
        }
        positives.push(cell);
    }

    LabelAssignment {
        positives,
        target_masks: targets,
        instance_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use crate::scene::Instance;

    #[test]
    fn forward_shapes_match_the_declared_architecture() {
        let cfg = ModelConfig {
            deform: true,
            ..Default::default()
        };
        let model = ToyModel::new(cfg, 1).unwrap();
        let image = GridTensor::zeros(vec![3, 64, 64]);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &image).unwrap();
        assert_eq!(out.levels.len(), 1);
        let l = &out.levels[0];
        assert_eq!(tape.shape(l.cls_scores), &[3, 8, 8]);
        assert_eq!(tape.shape(l.reps.var), &[64, 32, 32]);
        let dynp = l.dynamic.as_ref().unwrap();
        assert_eq!(tape.shape(dynp.theta), &[8, 8, 945]);
        assert_eq!(tape.shape(dynp.offsets.unwrap()), &[8, 8, 10]);
        assert_eq!(tape.shape(out.ctx.unwrap().var), &[16, 32, 32]);
    }

    #[test]
    fn zeroed_model_gives_half_scores_and_bias_reps() {
        let mut model = ToyModel::new(ModelConfig::default(), 1).unwrap();
        for p in &mut model.params {
            let n = p.value.len();
            p.value = GridTensor::zeros(p.value.shape().to_vec());
            assert_eq!(p.value.len(), n);
        }
        let image = GridTensor::full(vec![3, 64, 64], 0.3);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &image).unwrap();
        let l = &out.levels[0];
        assert!(tape
            .value(l.cls_scores)
            .data()
            .iter()
            .all(|&v| v == 0.5));
        assert!(tape.value(l.reps.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyModel::new(ModelConfig::default(), 3).unwrap();
        let image = GridTensor::full(vec![3, 64, 64], 0.25);
        let run = || {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &image).unwrap();
            tape.value(out.levels[0].reps.var).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let cfg = ModelConfig {
            img_h: 62,
            img_w: 64,
            ..Default::default()
        };
        assert!(ToyModel::new(cfg, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::new(ModelConfig::default(), 5).unwrap();
        model.save(dir.path()).unwrap();
        let back = ToyModel::load(dir.path()).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-6, "{}: {x} vs {y}", a.name);
            }
        }
    }

    fn scene_with_masks(masks: Vec<(usize, BinaryMask)>) -> Scene {
        let h = masks[0].1.height();
        let w = masks[0].1.width();
        Scene {
            seed: 0,
            image: GridTensor::zeros(vec![3, h, w]),
            instances: masks
                .into_iter()
                .enumerate()
                .map(|(z, (class_id, mask))| Instance {
                    class_id,
                    mask,
                    z_order: z,
                })
                .collect(),
        }
    }

    fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r * r {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn centered_object_claims_the_center_cell() {
        let scene = scene_with_masks(vec![(0, disk_mask(64, 64, 32.0, 32.0, 10.0))]);
        let cfg = ModelConfig::default();
        let a = assign_labels(&scene, &cfg);
        assert!(!a.positives.is_empty());
        for p in &a.positives {
            assert_eq!(p.instance, 0);
            // G=8 on 64px: center region around pixel 32 stays in cells 3..=4
            assert!((3..=4).contains(&p.i), "row {}", p.i);
            assert!((3..=4).contains(&p.j), "col {}", p.j);
        }
    }

    #[test]
    fn empty_scene_has_no_positives() {
        let scene = Scene {
            seed: 0,
            image: GridTensor::zeros(vec![3, 64, 64]),
            instances: vec![],
        };
        let a = assign_labels(&scene, &ModelConfig::default());
        assert!(a.positives.is_empty());
        assert!(a.target_masks.is_empty());
    }

    #[test]
    fn contended_cell_goes_to_the_smaller_instance() {
        // concentric disks: both mass centers land in cell (4, 4); the small
        // one is drawn later (on top) so both visible masks stay nonempty
        let big = disk_mask(64, 64, 34.0, 34.0, 16.0);
        let small = disk_mask(64, 64, 34.0, 34.0, 5.0);
        let mut big_visible = big.clone();
        for (v, occ) in big_visible
            .pixels_mut()
            .iter_mut()
            .zip(small.pixels())
        {
            if *occ {
                *v = false;
            }
        }
        let scene = scene_with_masks(vec![(0, big_visible.clone()), (1, small.clone())]);
        let a = assign_labels(&scene, &ModelConfig::default());
        // the small instance's centroid cell: grid 8 over 64px -> cell 4,4
        let owner: Vec<&PositiveCell> = a
            .positives
            .iter()
            .filter(|p| p.i == 4 && p.j == 4)
            .collect();
        assert_eq!(owner.len(), 1);
        assert_eq!(
            owner[0].instance, 1,
            "smaller instance wins the contended cell"
        );
        // enumerate: the rule picks the smaller area for every contended cell
        assert!(small.area() < big_visible.area());
    }

    #[test]
    fn level_assignment_sends_small_objects_to_fine_levels() {
        // three levels on a 64px image: nominal scales 16, 32, 64
        assert_eq!(assign_level(10.0, 3, 64), 0);
        assert_eq!(assign_level(30.0, 3, 64), 1);
        assert_eq!(assign_level(60.0, 3, 64), 2);
        assert_eq!(assign_level(10.0, 1, 64), 0);
    }
}
