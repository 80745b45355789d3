//! The aggregation head: a small convolution network applied to a stack of
//! gathered neighboring mask representations (plus an optional context
//! feature), either with one shared parameter set or with per-cell predicted
//! parameters. A batched grouped-convolution path evaluates many cells at
//! once and is exactly equal to the per-cell loop.

use crate::error::{Error, Result};
use crate::geometry::{gather_deformable, gather_fixed, MaskRepGrid, NeighborScheme};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, GridTensor};

/// Whether the context feature joins the gathered stack, is dropped, or
/// replaces it entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    With,
    Without,
    Only,
}

impl ContextMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "with" => Ok(ContextMode::With),
            "without" => Ok(ContextMode::Without),
            "only" => Ok(ContextMode::Only),
            other => Err(Error::invalid(format!("unknown context mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContextMode::With => "with",
            ContextMode::Without => "without",
            ContextMode::Only => "only",
        }
    }
}

/// Layer stack of the aggregation network. The input width is the gathered
/// channel count plus context channels; hidden layers share one width; the
/// output is a single raw logit map. ReLU between layers, nothing after the
/// last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggArchitecture {
    pub in_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl AggArchitecture {
    pub fn new(in_channels: usize, hidden: usize, layers: usize, kernel: usize) -> Result<Self> {
        if !(1..=4).contains(&layers) {
            return Err(Error::invalid(format!(
                "aggregation layer count must be 1..=4, got {layers}"
            )));
        }
        if kernel != 1 && kernel != 3 {
            return Err(Error::invalid(format!(
                "aggregation kernel must be 1 or 3, got {kernel}"
            )));
        }
        if in_channels == 0 || hidden == 0 {
            return Err(Error::invalid("aggregation channel widths must be positive"));
        }
        Ok(Self {
            in_channels,
            hidden,
            layers,
            kernel,
        })
    }

    /// Input width for a scheme/context combination.
    pub fn input_width(scheme: NeighborScheme, mode: ContextMode, ctx_channels: usize) -> usize {
        match mode {
            ContextMode::With => scheme.gathered() + ctx_channels,
            ContextMode::Without => scheme.gathered(),
            ContextMode::Only => ctx_channels,
        }
    }

    /// Channel widths per layer boundary, e.g. `[21, 4, 4, 1]`.
    pub fn channels(&self) -> Vec<usize> {
        let mut c = vec![self.in_channels];
        for _ in 0..self.layers - 1 {
            c.push(self.hidden);
        }
        c.push(1);
        c
    }

    pub fn layer_specs(&self) -> Vec<ConvSpec> {
        let c = self.channels();
        (0..self.layers)
            .map(|l| ConvSpec::new(c[l], c[l + 1], self.kernel).unwrap())
            .collect()
    }

    /// Total parameter count `D`: per layer, `Cin*Cout*k^2` weights plus
    /// `Cout` biases.
    pub fn d_dim(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.in_channels * s.out_channels * s.kernel * s.kernel + s.out_channels)
            .sum()
    }
}

/// Per-cell predicted parameters living at classification resolution:
/// `theta: [G, G, D]` and, when deformable sampling is on, `offsets: [G, G, P]`.
#[derive(Debug, Clone, Copy)]
pub struct DynamicParams {
    pub theta: Var,
    pub offsets: Option<Var>,
    pub grid: usize,
    pub d: usize,
}

impl DynamicParams {
    pub fn new(tape: &Tape, theta: Var, offsets: Option<Var>, grid: usize, d: usize) -> Result<Self> {
        if tape.shape(theta) != [grid, grid, d] {
            return Err(Error::shape(
                "DynamicParams::new",
                format!(
                    "theta must be [{grid}, {grid}, {d}], got {:?}",
                    tape.shape(theta)
                ),
            ));
        }
        Ok(Self {
            theta,
            offsets,
            grid,
            d,
        })
    }

    /// Contiguous `[D]` slice for classification cell `(i, j)`.
    pub fn theta_at(&self, tape: &mut Tape, i: usize, j: usize) -> Result<Var> {
        tape.slice_reshape(self.theta, (i * self.grid + j) * self.d, vec![self.d])
    }

    pub fn offsets_at(&self, tape: &mut Tape, i: usize, j: usize, p: usize) -> Result<Option<Var>> {
        match self.offsets {
            Some(off) => Ok(Some(tape.slice_reshape(
                off,
                (i * self.grid + j) * p,
                vec![p],
            )?)),
            None => Ok(None),
        }
    }
}

/// Compact bottom-up context feature concatenated into the aggregation input.
#[derive(Debug, Clone, Copy)]
pub struct ContextFeature {
    pub var: Var,
    pub channels: usize,
}

impl ContextFeature {
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 3 {
            return Err(Error::shape(
                "ContextFeature::new",
                format!("expected [C, H, W], got {s:?}"),
            ));
        }
        Ok(Self {
            var,
            channels: s[0],
        })
    }
}

/// Splits a packed parameter vector into per-layer `(weights, bias)` shapes.
/// Layout: layers in order; within a layer the weights come first
/// (out-major, then in, ky, kx), then the biases.
pub fn unpack_theta(theta: &[f64], arch: &AggArchitecture) -> Result<Vec<(GridTensor, GridTensor)>> {
    let d = arch.d_dim();
    if theta.len() != d {
        return Err(Error::invalid(format!(
            "parameter vector has {} values but the architecture needs D={}",
            theta.len(),
            d
        )));
    }
    let mut out = Vec::with_capacity(arch.layers);
    let mut pos = 0;
    for spec in arch.layer_specs() {
        let wn = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel;
        let w = GridTensor::new(spec.weight_shape(), theta[pos..pos + wn].to_vec())?;
        pos += wn;
        let b = GridTensor::new(vec![spec.out_channels], theta[pos..pos + spec.out_channels].to_vec())?;
        pos += spec.out_channels;
        out.push((w, b));
    }
    Ok(out)
}

/// Inverse of [`unpack_theta`].
pub fn pack_theta(layers: &[(GridTensor, GridTensor)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in layers {
        out.extend_from_slice(w.data());
        out.extend_from_slice(b.data());
    }
    out
}

/// Runs the aggregation network on `stack` with parameters taken from the
/// packed vector `theta` (a tape var of shape `[D]`). Returns the raw
/// pre-sigmoid `[H, W]` logit map.
pub fn run_agg_net(tape: &mut Tape, stack: Var, theta: Var, arch: &AggArchitecture) -> Result<Var> {
    let d = arch.d_dim();
    let got = tape.value(theta).len();
    if got != d {
        return Err(Error::invalid(format!(
            "parameter vector has {got} values but the architecture needs D={d}"
        )));
    }
    let s = tape.shape(stack).to_vec();
    if s.len() != 3 || s[0] != arch.in_channels {
        return Err(Error::shape(
            "run_agg_net",
            format!(
                "stack has {} channels but the architecture expects {}",
                s[0], arch.in_channels
            ),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let mut x = stack;
    let mut pos = 0;
    let specs = arch.layer_specs();
    for (l, spec) in specs.iter().enumerate() {
        let wn = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel;
        let wv = tape.slice_reshape(theta, pos, spec.weight_shape())?;
        pos += wn;
        let bv = tape.slice_reshape(theta, pos, vec![spec.out_channels])?;
        pos += spec.out_channels;
        x = tape.conv2d(x, wv, bv, *spec)?;
        if l + 1 < specs.len() {
            x = tape.relu(x)?;
        }
    }
    tape.slice_reshape(x, 0, vec![h, w])
}

/// Builds the aggregation input stack for classification cell `(i, j)`:
/// gathered neighboring mask representations (fixed or deformable) and/or
/// the context feature, per `mode`. Representations reach the stack raw —
/// no activation is applied on the way in.
#[allow(clippy::too_many_arguments)]
pub fn build_stack(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    i: usize,
    j: usize,
    scheme: NeighborScheme,
    g_cls: usize,
    ctx: Option<&ContextFeature>,
    mode: ContextMode,
    offsets: Option<Var>,
) -> Result<Var> {
    if mode == ContextMode::Only {
        let ctx = ctx.ok_or_else(|| Error::invalid("context mode 'only' needs a context feature"))?;
        return Ok(ctx.var);
    }
    let gathered = match offsets {
        Some(off) => gather_deformable(tape, reps, i, j, scheme, off, g_cls)?,
        None => gather_fixed(tape, reps, i, j, scheme, g_cls)?,
    };
    match (mode, ctx) {
        (ContextMode::With, Some(c)) => tape.concat_channels(&[gathered, c.var]),
        (ContextMode::With, None) => Err(Error::invalid("context mode 'with' needs a context feature")),
        (ContextMode::Without, _) => Ok(gathered),
        (ContextMode::Only, _) => unreachable!(),
    }
}

/// Aggregation with one parameter set shared across all cells.
pub fn aggregate_static(
    tape: &mut Tape,
    stack: Var,
    shared_theta: Var,
    arch: &AggArchitecture,
) -> Result<Var> {
    run_agg_net(tape, stack, shared_theta, arch)
}

/// Aggregation with the parameter vector (and offsets, when deformable) of
/// classification cell `(i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_dynamic(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    params: &DynamicParams,
    ctx: Option<&ContextFeature>,
    i: usize,
    j: usize,
    scheme: NeighborScheme,
    mode: ContextMode,
    arch: &AggArchitecture,
) -> Result<Var> {
    let offsets = params.offsets_at(tape, i, j, scheme.offset_dim())?;
    let stack = build_stack(tape, reps, i, j, scheme, params.grid, ctx, mode, offsets)?;
    let theta = params.theta_at(tape, i, j)?;
    run_agg_net(tape, stack, theta, arch)
}

/// Batched dynamic aggregation over many cells: one grouped convolution per
/// layer, one group per cell. Returns the `[N, H, W]` stack of logit maps;
/// group `n` is bit-identical to [`aggregate_dynamic`] on `cells[n]`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_batch(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    params: &DynamicParams,
    ctx: Option<&ContextFeature>,
    cells: &[(usize, usize)],
    scheme: NeighborScheme,
    mode: ContextMode,
    arch: &AggArchitecture,
) -> Result<Var> {
    if cells.is_empty() {
        return Err(Error::invalid("aggregate_batch: empty cell list"));
    }
    let n = cells.len();
    let mut stacks = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    for &(i, j) in cells {
        let offsets = params.offsets_at(tape, i, j, scheme.offset_dim())?;
        stacks.push(build_stack(
            tape, reps, i, j, scheme, params.grid, ctx, mode, offsets,
        )?);
        thetas.push(params.theta_at(tape, i, j)?);
    }
    let mut x = tape.concat0(&stacks)?;
    let mut pos = 0;
    let specs = arch.layer_specs();
    for (l, spec) in specs.iter().enumerate() {
        let wn = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel;
        let mut ws = Vec::with_capacity(n);
        let mut bs = Vec::with_capacity(n);
        for &th in &thetas {
            ws.push(tape.slice_reshape(th, pos, spec.weight_shape())?);
            bs.push(tape.slice_reshape(th, pos + wn, vec![spec.out_channels])?);
        }
        pos += wn + spec.out_channels;
        let w = tape.concat0(&ws)?;
        let b = tape.concat0(&bs)?;
        x = tape.conv2d_grouped(x, w, b, *spec, n)?;
        if l + 1 < specs.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Maps [`aggregate_dynamic`] over cells, returning one `[H, W]` map per
/// cell; an empty cell list yields an empty vector. Uses the batched grouped
/// path internally.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_cells(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    params: &DynamicParams,
    ctx: Option<&ContextFeature>,
    cells: &[(usize, usize)],
    scheme: NeighborScheme,
    mode: ContextMode,
    arch: &AggArchitecture,
) -> Result<Vec<Var>> {
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let batch = aggregate_batch(tape, reps, params, ctx, cells, scheme, mode, arch)?;
    let s = tape.shape(batch).to_vec();
    let (h, w) = (s[1], s[2]);
    (0..cells.len())
        .map(|t| tape.slice_reshape(batch, t * h * w, vec![h, w]))
        .collect()
}
