//! Reverse-mode differentiation over a recorded op tape.
//!
//! This is not a general autodiff system: the op set is exactly what the
//! segmentation head needs (convolutions, pointwise nonlinearities, channel
//! concatenation, grid gathers, pooling/resizing, and fused loss heads).
//! Every op stores its inputs by [`Var`] index; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates adjoints.
//!
//! All forward kernels use fixed summation orders, so results are
//! bit-identical across runs and across thread counts.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ConvSpec, GridTensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Grouped cross-correlation; `groups == 1` is a plain convolution.
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
        spec: ConvSpec,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    /// Concatenation along axis 0; inputs share all trailing extents.
    Concat0 {
        xs: Vec<Var>,
    },
    AvgPool2 {
        x: Var,
    },
    /// Nearest-neighbor resize of a `[C, H, W]` map.
    ResizeNearest {
        x: Var,
    },
    /// `[C, H, W]` -> `[H, W, C]`.
    PermuteChwToHwc {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    /// Flat sub-range of a tensor viewed under a new shape.
    SliceReshape {
        x: Var,
        start: usize,
    },
    /// Stack of grid-cell maps; out-of-grid cells contribute zero maps.
    GatherCells {
        reps: Var,
        cells: Vec<(i64, i64)>,
        grid: usize,
    },
    /// As `GatherCells` but each cell is displaced by a fractional offset and
    /// resolved by bilinear interpolation over the four enclosing cells.
    GatherDeform {
        reps: Var,
        offsets: Var,
        cells: Vec<(i64, i64)>,
        grid: usize,
    },
    /// 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), scalar output.
    DiceLoss {
        pred: Var,
        target: GridTensor,
        eps: f64,
    },
    /// Sigmoid focal loss on logits, summed then divided by `divisor`.
    FocalLoss {
        logits: Var,
        targets: GridTensor,
        gamma: f64,
        alpha: f64,
        divisor: f64,
    },
    /// Binary cross-entropy on logits, summed then divided by `divisor`.
    BceLoss {
        logits: Var,
        targets: GridTensor,
        divisor: f64,
    },
    /// Arithmetic mean of scalar inputs.
    MeanScalars {
        xs: Vec<Var>,
    },
    /// Weighted sum of scalar inputs with constant coefficients.
    AddWeighted {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: GridTensor,
    op: Op,
}

/// Records forward ops and replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<GridTensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` means identically zero.
    pub fn wrt(&self, var: Var) -> Option<&GridTensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<GridTensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The four corner cells and bilinear weights enclosing fractional grid
/// position `(py, px)`.
fn bilinear_corners(py: f64, px: f64) -> [(i64, i64, f64); 4] {
    let r0 = py.floor();
    let c0 = px.floor();
    let fy = py - r0;
    let fx = px - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    [
        (r0, c0, (1.0 - fy) * (1.0 - fx)),
        (r0, c0 + 1, (1.0 - fy) * fx),
        (r0 + 1, c0, fy * (1.0 - fx)),
        (r0 + 1, c0 + 1, fy * fx),
    ]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: GridTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::NoRecordedForward(format!(
                "{op}: var #{} is not on this tape (len {})",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: GridTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Value of a recorded variable.
    pub fn value(&self, v: Var) -> &GridTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Cross-correlation of `x: [Cin, H, W]` with `w: [Cout, Cin/g... ]`,
    /// zero padding, stride 1. See [`Tape::conv2d_grouped`] for `groups > 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        self.conv2d_grouped(x, w, b, spec, 1)
    }

    /// Grouped convolution: group `g` maps input channels
    /// `[g*Cin, (g+1)*Cin)` to output channels `[g*Cout, (g+1)*Cout)` where
    /// `Cin`/`Cout` are the per-group counts from `spec`. Group `g`'s result
    /// is bit-identical to a standalone `conv2d` on its slice.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        groups: usize,
    ) -> Result<Var> {
        self.check(x, "conv2d")?;
        self.check(w, "conv2d")?;
        self.check(b, "conv2d")?;
        if groups == 0 {
            return Err(Error::invalid("conv2d: groups must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 3 [C,H,W], got {xs:?}"),
            ));
        }
        let (cin_total, h, width) = (xs[0], xs[1], xs[2]);
        if cin_total != spec.in_channels * groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channel dim is {cin_total} but spec expects {} ({} per group x {} groups)",
                    spec.in_channels * groups,
                    spec.in_channels,
                    groups
                ),
            ));
        }
        let expect_w = vec![
            spec.out_channels * groups,
            spec.in_channels,
            spec.kernel,
            spec.kernel,
        ];
        if ws != expect_w {
            return Err(Error::shape(
                "conv2d",
                format!("weight shape is {ws:?} but spec expects {expect_w:?}"),
            ));
        }
        if bs != [spec.out_channels * groups] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias length is {} but spec expects {}",
                    bs.iter().product::<usize>(),
                    spec.out_channels * groups
                ),
            ));
        }

        let out = conv_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            &spec,
            groups,
            h,
            width,
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                groups,
                spec,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x, "relu")?;
        let v = self.value(x);
        let data = v.data().iter().map(|&t| t.max(0.0)).collect();
        let out = GridTensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sigmoid")?;
        let v = self.value(x);
        let data = v.data().iter().map(|&t| sigmoid_scalar(t)).collect();
        let out = GridTensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sigmoid { x }))
    }

    /// Concatenates along axis 0. For `[C, H, W]` inputs this is channel
    /// stacking in argument order.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat0: empty input list"));
        }
        for &v in xs {
            self.check(v, "concat0")?;
        }
        let first = self.shape(xs[0]).to_vec();
        let trailing = &first[1..];
        let mut axis0 = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if &s[1..] != trailing {
                return Err(Error::shape(
                    "concat0",
                    format!(
                        "trailing dims differ: {:?} vs {:?}",
                        &s[1..],
                        trailing
                    ),
                ));
            }
            axis0 += s[0];
        }
        let mut data = Vec::with_capacity(axis0 * trailing.iter().product::<usize>());
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![axis0];
        shape.extend_from_slice(trailing);
        let out = GridTensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat0 { xs: xs.to_vec() }))
    }

    /// Channel concatenation of `[C, H, W]` maps sharing spatial dims.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        for &v in xs {
            self.check(v, "concat_channels")?;
            if self.shape(v).len() != 3 {
                return Err(Error::shape(
                    "concat_channels",
                    format!("inputs must be rank 3 [C,H,W], got {:?}", self.shape(v)),
                ));
            }
        }
        self.concat0(xs)
    }

    /// 2x average pooling of a `[C, H, W]` map; `H` and `W` must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x, "avg_pool2")?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("need [C, even H, even W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let s4 = v[base] + v[base + 1] + v[base + w] + v[base + w + 1];
                    data[ch * oh * ow + oy * ow + ox] = s4 * 0.25;
                }
            }
        }
        let out = GridTensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::AvgPool2 { x }))
    }

    /// Nearest-neighbor resize of a `[C, H, W]` map to `[C, oh, ow]`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.check(x, "resize_nearest")?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(
                "resize_nearest",
                format!("need [C,H,W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let v = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    let ix = ox * w / ow;
                    data[ch * oh * ow + oy * ow + ox] = v[ch * h * w + iy * w + ix];
                }
            }
        }
        let out = GridTensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::ResizeNearest { x }))
    }

    /// Transposes `[C, H, W]` to `[H, W, C]` so per-cell vectors become
    /// contiguous.
    pub fn permute_chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        self.check(x, "permute_chw_to_hwc")?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(
                "permute_chw_to_hwc",
                format!("need [C,H,W], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let v = self.value(x).data();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    data[(y * w + xx) * c + ch] = v[ch * h * w + y * w + xx];
                }
            }
        }
        let out = GridTensor::new(vec![h, w, c], data)?;
        Ok(self.push(out, Op::PermuteChwToHwc { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = GridTensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check(x, "scale")?;
        let data = self.value(x).data().iter().map(|&v| v * k).collect();
        let out = GridTensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Scale { x, k }))
    }

    /// Views `len(shape)` elements starting at flat offset `start` under a
    /// new shape. Gradient scatters back into the source range.
    pub fn slice_reshape(&mut self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        self.check(x, "slice_reshape")?;
        let n: usize = shape.iter().product();
        let total = self.value(x).len();
        if start + n > total {
            return Err(Error::shape(
                "slice_reshape",
                format!("range {start}..{} exceeds {} elements", start + n, total),
            ));
        }
        let data = self.value(x).data()[start..start + n].to_vec();
        let out = GridTensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceReshape { x, start }))
    }

    /// Stacks the `H`x`W` maps of the given mask-grid cells from
    /// `reps: [G*G, H, W]`. Cells outside `[0, G)` contribute all-zero maps.
    pub fn gather_cells(&mut self, reps: Var, cells: &[(i64, i64)], grid: usize) -> Result<Var> {
        self.check(reps, "gather_cells")?;
        let s = self.shape(reps).to_vec();
        if s.len() != 3 || s[0] != grid * grid {
            return Err(Error::shape(
                "gather_cells",
                format!("reps must be [{}*{}, H, W], got {s:?}", grid, grid),
            ));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let v = self.value(reps).data();
        let mut data = vec![0.0; cells.len() * hw];
        for (t, &(r, c)) in cells.iter().enumerate() {
            if r >= 0 && c >= 0 && (r as usize) < grid && (c as usize) < grid {
                let src = (r as usize * grid + c as usize) * hw;
                data[t * hw..(t + 1) * hw].copy_from_slice(&v[src..src + hw]);
            }
        }
        let out = GridTensor::new(vec![cells.len(), h, w], data)?;
        Ok(self.push(
            out,
            Op::GatherCells {
                reps,
                cells: cells.to_vec(),
                grid,
            },
        ))
    }

    /// Deformable gather: nominal cell `t` at `(r, c)` is displaced by
    /// `(offsets[2t], offsets[2t+1])` (row, col, in cell units) and resolved
    /// by bilinear interpolation over the four enclosing cells' maps, with
    /// out-of-grid corners contributing zero. Zero-weight corners are skipped
    /// so an all-zero offset vector reproduces [`Tape::gather_cells`] exactly.
    pub fn gather_deform(
        &mut self,
        reps: Var,
        offsets: Var,
        cells: &[(i64, i64)],
        grid: usize,
    ) -> Result<Var> {
        self.check(reps, "gather_deform")?;
        self.check(offsets, "gather_deform")?;
        let s = self.shape(reps).to_vec();
        if s.len() != 3 || s[0] != grid * grid {
            return Err(Error::shape(
                "gather_deform",
                format!("reps must be [{}*{}, H, W], got {s:?}", grid, grid),
            ));
        }
        if self.value(offsets).len() != 2 * cells.len() {
            return Err(Error::shape(
                "gather_deform",
                format!(
                    "offset vector holds {} values but {} cells need {}",
                    self.value(offsets).len(),
                    cells.len(),
                    2 * cells.len()
                ),
            ));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let v = self.value(reps).data();
        let off = self.value(offsets).data().to_vec();
        let mut data = vec![0.0; cells.len() * hw];
        for (t, &(r, c)) in cells.iter().enumerate() {
            let py = r as f64 + off[2 * t];
            let px = c as f64 + off[2 * t + 1];
            let dst = &mut data[t * hw..(t + 1) * hw];
            for (cr, cc, wgt) in bilinear_corners(py, px) {
                if wgt == 0.0 {
                    continue;
                }
                if cr < 0 || cc < 0 || cr as usize >= grid || cc as usize >= grid {
                    continue;
                }
                let src = &v[(cr as usize * grid + cc as usize) * hw..][..hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * *s;
                }
            }
        }
        let out = GridTensor::new(vec![cells.len(), h, w], data)?;
        Ok(self.push(
            out,
            Op::GatherDeform {
                reps,
                offsets,
                cells: cells.to_vec(),
                grid,
            },
        ))
    }

    /// Soft Dice loss `1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)`.
    pub fn dice_loss(&mut self, pred: Var, target: &GridTensor, eps: f64) -> Result<Var> {
        self.check(pred, "dice_loss")?;
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "dice_loss",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let p = self.value(pred).data();
        let g = target.data();
        let mut s_pg = 0.0;
        let mut s_pp = 0.0;
        let mut s_gg = 0.0;
        for (pi, gi) in p.iter().zip(g) {
            s_pg += pi * gi;
            s_pp += pi * pi;
            s_gg += gi * gi;
        }
        let loss = 1.0 - 2.0 * s_pg / (s_pp + s_gg + eps);
        Ok(self.push(
            GridTensor::scalar(loss),
            Op::DiceLoss {
                pred,
                target: target.clone(),
                eps,
            },
        ))
    }

    /// Sigmoid focal loss on raw logits, summed over elements, divided by
    /// `divisor`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &GridTensor,
        gamma: f64,
        alpha: f64,
        divisor: f64,
    ) -> Result<Var> {
        self.check(logits, "focal_loss")?;
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "focal_loss",
                format!(
                    "logits {:?} vs targets {:?}",
                    self.shape(logits),
                    targets.shape()
                ),
            ));
        }
        let mut total = 0.0;
        for (&x, &t) in self.value(logits).data().iter().zip(targets.data()) {
            let p = sigmoid_scalar(x);
            let log_p = -softplus(-x);
            let log_1p = -softplus(x);
            if t > 0.5 {
                total += -alpha * (1.0 - p).powf(gamma) * log_p;
            } else {
                total += -(1.0 - alpha) * p.powf(gamma) * log_1p;
            }
        }
        Ok(self.push(
            GridTensor::scalar(total / divisor),
            Op::FocalLoss {
                logits,
                targets: targets.clone(),
                gamma,
                alpha,
                divisor,
            },
        ))
    }

    /// Binary cross-entropy on raw logits, summed over elements, divided by
    /// `divisor`.
    pub fn bce_loss(&mut self, logits: Var, targets: &GridTensor, divisor: f64) -> Result<Var> {
        self.check(logits, "bce_loss")?;
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_loss",
                format!(
                    "logits {:?} vs targets {:?}",
                    self.shape(logits),
                    targets.shape()
                ),
            ));
        }
        let mut total = 0.0;
        for (&x, &t) in self.value(logits).data().iter().zip(targets.data()) {
            total += softplus(x) - t * x;
        }
        Ok(self.push(
            GridTensor::scalar(total / divisor),
            Op::BceLoss {
                logits,
                targets: targets.clone(),
                divisor,
            },
        ))
    }

    /// Mean of scalar variables.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean_scalars: empty input list"));
        }
        let mut sum = 0.0;
        for &v in xs {
            self.check(v, "mean_scalars")?;
            if self.value(v).len() != 1 {
                return Err(Error::shape(
                    "mean_scalars",
                    format!("inputs must be scalars, got {:?}", self.shape(v)),
                ));
            }
            sum += self.value(v).data()[0];
        }
        let out = GridTensor::scalar(sum / xs.len() as f64);
        Ok(self.push(out, Op::MeanScalars { xs: xs.to_vec() }))
    }

    /// Weighted sum of scalar variables with constant coefficients.
    pub fn add_weighted(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("add_weighted: empty term list"));
        }
        let mut sum = 0.0;
        for &(v, k) in terms {
            self.check(v, "add_weighted")?;
            if self.value(v).len() != 1 {
                return Err(Error::shape(
                    "add_weighted",
                    format!("inputs must be scalars, got {:?}", self.shape(v)),
                ));
            }
            sum += k * self.value(v).data()[0];
        }
        let out = GridTensor::scalar(sum);
        Ok(self.push(
            out,
            Op::AddWeighted {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse sweep from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_zeroing(loss, &[])
    }

    /// Reverse sweep that forces the adjoint of every var in `zeroed` to
    /// zero before propagation — used to verify which paths gradients take.
    pub fn backward_zeroing(&self, loss: Var, zeroed: &[Var]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoRecordedForward(
                "backward on an empty tape".into(),
            ));
        }
        self.check(loss, "backward")?;
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<GridTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(GridTensor::scalar(1.0));
        for idx in (0..self.nodes.len()).rev() {
            if zeroed.iter().any(|z| z.0 == idx) {
                adj[idx] = None;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(adj: &mut [Option<GridTensor>], var: Var, delta: GridTensor) {
        match &mut adj[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &GridTensor, adj: &mut [Option<GridTensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                groups,
                spec,
            } => {
                let xs = self.shape(*x);
                let (h, width) = (xs[1], xs[2]);
                let (dx, dw, db) = conv_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    spec,
                    *groups,
                    h,
                    width,
                );
                Self::accumulate(adj, *x, dx);
                Self::accumulate(adj, *w, dw);
                Self::accumulate(adj, *b, db);
            }
            Op::Relu { x } => {
                let v = self.value(*x);
                let data = v
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                Self::accumulate(adj, *x, GridTensor::new(v.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid { x } => {
                let s = &self.nodes[idx].value;
                let data = s
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&sv, &gv)| gv * sv * (1.0 - sv))
                    .collect();
                Self::accumulate(adj, *x, GridTensor::new(s.shape().to_vec(), data).unwrap());
            }
            Op::Concat0 { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    let t = GridTensor::new(self.shape(v).to_vec(), slice).unwrap();
                    Self::accumulate(adj, v, t);
                    offset += n;
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[ch * oh * ow + oy * ow + ox] * 0.25;
                            let base = ch * h * w + 2 * oy * w + 2 * ox;
                            data[base] += gv;
                            data[base + 1] += gv;
                            data[base + w] += gv;
                            data[base + w + 1] += gv;
                        }
                    }
                }
                Self::accumulate(adj, *x, GridTensor::new(vec![c, h, w], data).unwrap());
            }
            Op::ResizeNearest { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let os = self.nodes[idx].value.shape();
                let (oh, ow) = (os[1], os[2]);
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        let iy = oy * h / oh;
                        for ox in 0..ow {
                            let ix = ox * w / ow;
                            data[ch * h * w + iy * w + ix] +=
                                g.data()[ch * oh * ow + oy * ow + ox];
                        }
                    }
                }
                Self::accumulate(adj, *x, GridTensor::new(vec![c, h, w], data).unwrap());
            }
            Op::PermuteChwToHwc { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            data[ch * h * w + y * w + xx] = g.data()[(y * w + xx) * c + ch];
                        }
                    }
                }
                Self::accumulate(adj, *x, GridTensor::new(vec![c, h, w], data).unwrap());
            }
            Op::Add { a, b } => {
                Self::accumulate(adj, *a, g.clone());
                Self::accumulate(adj, *b, g.clone());
            }
            Op::Scale { x, k } => {
                let data = g.data().iter().map(|&v| v * k).collect();
                Self::accumulate(
                    adj,
                    *x,
                    GridTensor::new(g.shape().to_vec(), data).unwrap(),
                );
            }
            Op::SliceReshape { x, start } => {
                let mut data = vec![0.0; self.value(*x).len()];
                data[*start..*start + g.len()].copy_from_slice(g.data());
                Self::accumulate(
                    adj,
                    *x,
                    GridTensor::new(self.shape(*x).to_vec(), data).unwrap(),
                );
            }
            Op::GatherCells { reps, cells, grid } => {
                let s = self.shape(*reps);
                let hw = s[1] * s[2];
                let mut data = vec![0.0; self.value(*reps).len()];
                for (t, &(r, c)) in cells.iter().enumerate() {
                    if r >= 0 && c >= 0 && (r as usize) < *grid && (c as usize) < *grid {
                        let dst = (r as usize * grid + c as usize) * hw;
                        let src = &g.data()[t * hw..(t + 1) * hw];
                        for (d, s) in data[dst..dst + hw].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                Self::accumulate(
                    adj,
                    *reps,
                    GridTensor::new(s.to_vec(), data).unwrap(),
                );
            }
            Op::GatherDeform {
                reps,
                offsets,
                cells,
                grid,
            } => {
                let s = self.shape(*reps);
                let hw = s[1] * s[2];
                let v = self.value(*reps).data();
                let off = self.value(*offsets).data();
                let mut dreps = vec![0.0; self.value(*reps).len()];
                let mut doff = vec![0.0; off.len()];
                for (t, &(r, c)) in cells.iter().enumerate() {
                    let py = r as f64 + off[2 * t];
                    let px = c as f64 + off[2 * t + 1];
                    let r0 = py.floor();
                    let c0 = px.floor();
                    let fy = py - r0;
                    let fx = px - c0;
                    let gmap = &g.data()[t * hw..(t + 1) * hw];
                    // corner (dy, dx) has weight wy(dy)*wx(dx) with
                    // wy(0)=1-fy, wy(1)=fy; d/dfy is -1 or +1 times wx.
                    for dy in 0..2i64 {
                        for dx in 0..2i64 {
                            let cr = r0 as i64 + dy;
                            let cc = c0 as i64 + dx;
                            let wy = if dy == 0 { 1.0 - fy } else { fy };
                            let wx = if dx == 0 { 1.0 - fx } else { fx };
                            let in_grid = cr >= 0
                                && cc >= 0
                                && (cr as usize) < *grid
                                && (cc as usize) < *grid;
                            if !in_grid {
                                continue;
                            }
                            let cell = (cr as usize * grid + cc as usize) * hw;
                            let wgt = wy * wx;
                            if wgt != 0.0 {
                                for (d, s) in dreps[cell..cell + hw].iter_mut().zip(gmap) {
                                    *d += wgt * *s;
                                }
                            }
                            let mut dot = 0.0;
                            for (sv, gv) in v[cell..cell + hw].iter().zip(gmap) {
                                dot += sv * gv;
                            }
                            let sy = if dy == 0 { -1.0 } else { 1.0 };
                            let sx = if dx == 0 { -1.0 } else { 1.0 };
                            doff[2 * t] += sy * wx * dot;
                            doff[2 * t + 1] += wy * sx * dot;
                        }
                    }
                }
                Self::accumulate(adj, *reps, GridTensor::new(s.to_vec(), dreps).unwrap());
                Self::accumulate(
                    adj,
                    *offsets,
                    GridTensor::new(self.shape(*offsets).to_vec(), doff).unwrap(),
                );
            }
            Op::DiceLoss { pred, target, eps } => {
                let p = self.value(*pred).data();
                let t = target.data();
                let mut s_pg = 0.0;
                let mut s_pp = 0.0;
                let mut s_gg = 0.0;
                for (pi, gi) in p.iter().zip(t) {
                    s_pg += pi * gi;
                    s_pp += pi * pi;
                    s_gg += gi * gi;
                }
                let denom = s_pp + s_gg + eps;
                let up = g.data()[0];
                let data = p
                    .iter()
                    .zip(t)
                    .map(|(&pi, &gi)| up * (-2.0) * (gi * denom - 2.0 * pi * s_pg) / (denom * denom))
                    .collect();
                Self::accumulate(
                    adj,
                    *pred,
                    GridTensor::new(self.shape(*pred).to_vec(), data).unwrap(),
                );
            }
            Op::FocalLoss {
                logits,
                targets,
                gamma,
                alpha,
                divisor,
            } => {
                let up = g.data()[0] / divisor;
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| {
                        let p = sigmoid_scalar(x);
                        let log_p = -softplus(-x);
                        let log_1p = -softplus(x);
                        let d = if t > 0.5 {
                            alpha * gamma * p * (1.0 - p).powf(*gamma) * log_p
                                - alpha * (1.0 - p).powf(gamma + 1.0)
                        } else {
                            -(1.0 - alpha) * gamma * p.powf(*gamma) * (1.0 - p) * log_1p
                                + (1.0 - alpha) * p.powf(gamma + 1.0)
                        };
                        up * d
                    })
                    .collect();
                Self::accumulate(
                    adj,
                    *logits,
                    GridTensor::new(self.shape(*logits).to_vec(), data).unwrap(),
                );
            }
            Op::BceLoss {
                logits,
                targets,
                divisor,
            } => {
                let up = g.data()[0] / divisor;
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| up * (sigmoid_scalar(x) - t))
                    .collect();
                Self::accumulate(
                    adj,
                    *logits,
                    GridTensor::new(self.shape(*logits).to_vec(), data).unwrap(),
                );
            }
            Op::MeanScalars { xs } => {
                let share = g.data()[0] / xs.len() as f64;
                for &v in xs {
                    Self::accumulate(adj, v, GridTensor::scalar(share));
                }
            }
            Op::AddWeighted { terms } => {
                for &(v, k) in terms {
                    Self::accumulate(adj, v, GridTensor::scalar(g.data()[0] * k));
                }
            }
        }
    }
}

/// Forward kernel shared by plain and grouped convolution. Per output pixel
/// the accumulation order is bias, then (ci, ky, kx) ascending, matching the
/// naive triple loop.
fn conv_forward(
    x: &GridTensor,
    w: &GridTensor,
    b: &GridTensor,
    spec: &ConvSpec,
    groups: usize,
    h: usize,
    width: usize,
) -> GridTensor {
    let cin = spec.in_channels;
    let cout_total = spec.out_channels * groups;
    let k = spec.kernel;
    let p = spec.padding();
    let hw = h * width;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; cout_total * hw];
    par::fill_chunks(&mut out, hw, |co, plane| {
        let g = co / spec.out_channels;
        plane.fill(bd[co]);
        for ci in 0..cin {
            let xc = &xd[(g * cin + ci) * hw..][..hw];
            for ky in 0..k {
                if ky + h <= p || ky >= h + p {
                    continue;
                }
                let oy0 = p.saturating_sub(ky);
                let oy1 = (h + p - ky).min(h);
                for kx in 0..k {
                    if kx + width <= p || kx >= width + p {
                        continue;
                    }
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let ox0 = p.saturating_sub(kx);
                    let ox1 = (width + p - kx).min(width);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - p;
                        let src = &xc[iy * width + ox0 + kx - p..][..ox1 - ox0];
                        let dst = &mut plane[oy * width + ox0..oy * width + ox1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    });
    GridTensor::new(vec![cout_total, h, width], out).unwrap()
}

fn conv_backward(
    g: &GridTensor,
    x: &GridTensor,
    w: &GridTensor,
    spec: &ConvSpec,
    groups: usize,
    h: usize,
    width: usize,
) -> (GridTensor, GridTensor, GridTensor) {
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let cout_total = cout * groups;
    let k = spec.kernel;
    let p = spec.padding();
    let hw = h * width;
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();

    // db[co] = sum of the upstream plane
    let mut db = vec![0.0; cout_total];
    for co in 0..cout_total {
        db[co] = gd[co * hw..(co + 1) * hw].iter().sum();
    }

    // dw[co, ci, ky, kx] = sum over valid pixels of g[co] * x[group ci]
    let mut dw = vec![0.0; cout_total * cin * k * k];
    par::fill_chunks(&mut dw, cin * k * k, |co, chunk| {
        let grp = co / cout;
        let gplane = &gd[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xc = &xd[(grp * cin + ci) * hw..][..hw];
            for ky in 0..k {
                if ky + h <= p || ky >= h + p {
                    continue;
                }
                let oy0 = p.saturating_sub(ky);
                let oy1 = (h + p - ky).min(h);
                for kx in 0..k {
                    if kx + width <= p || kx >= width + p {
                        continue;
                    }
                    let ox0 = p.saturating_sub(kx);
                    let ox1 = (width + p - kx).min(width);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy + ky - p;
                        let src = &xc[iy * width + ox0 + kx - p..][..ox1 - ox0];
                        let gs = &gplane[oy * width + ox0..oy * width + ox1];
                        for (gv, xv) in gs.iter().zip(src) {
                            acc += gv * xv;
                        }
                    }
                    chunk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    // dx[gi ci, iy, ix] = sum over co in group, ky, kx of g * w (transposed)
    let mut dx = vec![0.0; groups * cin * hw];
    par::fill_chunks(&mut dx, hw, |ci_total, plane| {
        let grp = ci_total / cin;
        let ci = ci_total % cin;
        for co_local in 0..cout {
            let co = grp * cout + co_local;
            let gplane = &gd[co * hw..(co + 1) * hw];
            for ky in 0..k {
                if ky + h <= p || ky >= h + p {
                    continue;
                }
                let oy0 = p.saturating_sub(ky);
                let oy1 = (h + p - ky).min(h);
                for kx in 0..k {
                    if kx + width <= p || kx >= width + p {
                        continue;
                    }
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let ox0 = p.saturating_sub(kx);
                    let ox1 = (width + p - kx).min(width);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - p;
                        let dst = &mut plane[iy * width + ox0 + kx - p..][..ox1 - ox0];
                        let gs = &gplane[oy * width + ox0..oy * width + ox1];
                        for (d, gv) in dst.iter_mut().zip(gs) {
                            *d += wv * *gv;
                        }
                    }
                }
            }
        }
    });

    (
        GridTensor::new(vec![groups * cin, h, width], dx).unwrap(),
        GridTensor::new(vec![cout_total, cin, k, k], dw).unwrap(),
        GridTensor::new(vec![cout_total], db).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> GridTensor {
        GridTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Naive per-pixel triple-loop convolution used as the oracle.
    fn conv_oracle(
        x: &GridTensor,
        w: &GridTensor,
        b: &GridTensor,
        spec: &ConvSpec,
    ) -> GridTensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = spec.kernel;
        let p = spec.padding();
        let mut out = GridTensor::zeros(vec![spec.out_channels, h, wd]);
        for co in 0..spec.out_channels {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - p as isize;
                                let ix = ox as isize + kx as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ci, iy as usize, ix as usize])
                                    * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1_is_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -0.25, 9.0, 8.0, 7.0]));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let spec = ConvSpec::new(1, 1, 1).unwrap();
        let y = tape.conv2d(x, w, b, spec).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_zero_weights_gives_constant_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = tape.leaf(GridTensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let spec = ConvSpec::new(2, 3, 3).unwrap();
        let y = tape.conv2d(x, w, b, spec).unwrap();
        let out = tape.value(y);
        for co in 0..3 {
            for i in 0..4 {
                assert_eq!(out.data()[co * 4 + i], [0.5, -1.0, 2.0][co]);
            }
        }
    }

    #[test]
    fn conv_box_kernel_matches_triple_loop_oracle() {
        // 5x5 ramp image, 3x3 box kernel of 1/9
        let ramp: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = t(&[1, 5, 5], &ramp);
        let w = GridTensor::full(vec![1, 1, 3, 3], 1.0 / 9.0);
        let b = GridTensor::zeros(vec![1]);
        let spec = ConvSpec::new(1, 1, 3).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.conv2d(xv, wv, bv, spec).unwrap();

        let oracle = conv_oracle(&x, &w, &b, &spec);
        for (a, o) in tape.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
        // center value is the mean of the centered 3x3 window
        let window_mean: f64 = [6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]
            .iter()
            .sum::<f64>()
            / 9.0;
        assert!((tape.value(y).at(&[0, 2, 2]) - window_mean).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(GridTensor::zeros(vec![5, 4, 4]));
        let w = tape.leaf(GridTensor::zeros(vec![2, 4, 3, 3]));
        let b = tape.leaf(GridTensor::zeros(vec![2]));
        let spec = ConvSpec::new(4, 2, 3).unwrap();
        let err = tape.conv2d(x, w, b, spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "should name the dimension: {msg}");
        assert!(msg.contains('5') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn grouped_conv_matches_independent_convs_bit_exactly() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups = 4;
        let spec = ConvSpec::new(3, 2, 3).unwrap();
        let h = 5;
        let wd = 6;
        let x = GridTensor::new(
            vec![groups * 3, h, wd],
            (0..groups * 3 * h * wd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = GridTensor::new(
            vec![groups * 2, 3, 3, 3],
            (0..groups * 2 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = GridTensor::new(
            vec![groups * 2],
            (0..groups * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.conv2d_grouped(xv, wv, bv, spec, groups).unwrap();
        let grouped = tape.value(y).clone();

        for g in 0..groups {
            let xg = GridTensor::new(
                vec![3, h, wd],
                x.data()[g * 3 * h * wd..(g + 1) * 3 * h * wd].to_vec(),
            )
            .unwrap();
            let wg = GridTensor::new(
                vec![2, 3, 3, 3],
                w.data()[g * 2 * 27..(g + 1) * 2 * 27].to_vec(),
            )
            .unwrap();
            let bg = GridTensor::new(vec![2], b.data()[g * 2..(g + 1) * 2].to_vec()).unwrap();
            let mut t2 = Tape::new();
            let xv = t2.leaf(xg);
            let wv = t2.leaf(wg);
            let bv = t2.leaf(bg);
            let yv = t2.conv2d(xv, wv, bv, spec).unwrap();
            let single = t2.value(yv);
            let lhs = &grouped.data()[g * 2 * h * wd..(g + 1) * 2 * h * wd];
            assert_eq!(lhs, single.data());
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half_and_grad_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(GridTensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn relu_clamps_and_zeroes_gradient_below_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(GridTensor::scalar(-3.2));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data()[0], 0.0);
    }

    #[test]
    fn concat_preserves_argument_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bq = tape.leaf(t(&[1, 1, 2], &[9.0, 8.0]));
        let y = tape.concat_channels(&[a, bq]).unwrap();
        assert_eq!(tape.shape(y), &[3, 1, 2]);
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert_eq!(tape.value(y).data()[4], 9.0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(GridTensor::zeros(vec![1, 2, 2]));
        let bq = tape.leaf(GridTensor::zeros(vec![1, 3, 2]));
        assert!(tape.concat_channels(&[a, bq]).is_err());
    }

    #[test]
    fn backward_without_forward_errors() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(Var(0)),
            Err(Error::NoRecordedForward(_))
        ));
        let mut tape = Tape::new();
        let x = tape.leaf(GridTensor::scalar(1.0));
        let _ = x;
        assert!(tape.backward(Var(5)).is_err());
    }

    #[test]
    fn determinism_two_runs_bit_identical() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = GridTensor::new(
            vec![4, 8, 8],
            (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let w = GridTensor::new(
            vec![6, 4, 3, 3],
            (0..216).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let b = GridTensor::new(vec![6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let spec = ConvSpec::new(4, 6, 3).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let y = tape.conv2d(xv, wv, bv, spec).unwrap();
            let r = tape.relu(y).unwrap();
            let s = tape.sigmoid(r).unwrap();
            tape.value(s).clone()
        };
        let a = run();
        let bb = run();
        assert_eq!(a.data(), bb.data());
    }

    #[test]
    fn outputs_stay_finite_on_finite_inputs() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(
            GridTensor::new(
                vec![2, 6, 6],
                (0..72).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        );
        let w = tape.leaf(
            GridTensor::new(
                vec![3, 2, 3, 3],
                (0..54).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        );
        let b = tape.leaf(GridTensor::zeros(vec![3]));
        let y = tape
            .conv2d(x, w, b, ConvSpec::new(2, 3, 3).unwrap())
            .unwrap();
        let s = tape.sigmoid(y).unwrap();
        let r = tape.relu(s).unwrap();
        assert!(tape.value(r).is_finite());
    }
}
