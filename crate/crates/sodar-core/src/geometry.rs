//! Grid index arithmetic: neighbor schemes, the mask-interpolation index map,
//! and fixed/deformable gathering over the grid of mask representations.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Which neighboring grid cells are gathered around a center cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborScheme {
    /// Center cell only.
    None,
    /// Left and right neighbors (same row).
    Row2,
    /// Upper and lower neighbors (same column).
    Col2,
    /// Top, left, bottom, right.
    Four,
    /// All eight surrounding cells.
    Eight,
}

impl NeighborScheme {
    /// Number of neighbors, excluding the center.
    pub fn arity(&self) -> usize {
        match self {
            NeighborScheme::None => 0,
            NeighborScheme::Row2 | NeighborScheme::Col2 => 2,
            NeighborScheme::Four => 4,
            NeighborScheme::Eight => 8,
        }
    }

    /// Channels in a gathered stack: neighbors plus center.
    pub fn gathered(&self) -> usize {
        self.arity() + 1
    }

    /// Length of the per-cell offset vector ((dy, dx) per gathered map).
    pub fn offset_dim(&self) -> usize {
        2 * self.gathered()
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "0" => Ok(NeighborScheme::None),
            "row2" | "2-row" => Ok(NeighborScheme::Row2),
            "col2" | "2-col" => Ok(NeighborScheme::Col2),
            "four" | "4" => Ok(NeighborScheme::Four),
            "eight" | "8" => Ok(NeighborScheme::Eight),
            other => Err(Error::invalid(format!("unknown neighbor scheme {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NeighborScheme::None => "none",
            NeighborScheme::Row2 => "row2",
            NeighborScheme::Col2 => "col2",
            NeighborScheme::Four => "four",
            NeighborScheme::Eight => "eight",
        }
    }
}

/// Per-level grid resolutions: `cls` for classification, `mask` for mask
/// representations (`mask <= cls` enables interpolation sharing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    pub cls: usize,
    pub mask: usize,
}

/// Ordered level list, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridConfig {
    pub levels: Vec<LevelGrid>,
}

impl GridConfig {
    pub fn new(levels: Vec<LevelGrid>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("grid config needs at least one level"));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.mask == 0 || l.mask > l.cls {
                return Err(Error::invalid(format!(
                    "level {i}: need 1 <= mask grid ({}) <= cls grid ({})",
                    l.mask, l.cls
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn single(cls: usize, mask: usize) -> Result<Self> {
        Self::new(vec![LevelGrid { cls, mask }])
    }

    /// The five-level resolution list without mask interpolation.
    pub fn standard() -> Self {
        Self::from_pairs(&[(40, 40), (36, 36), (24, 24), (16, 16), (12, 12)])
    }

    /// Finer classification grids, mask grids unchanged.
    pub fn plus_cls() -> Self {
        Self::from_pairs(&[(50, 40), (40, 36), (24, 24), (16, 16), (12, 12)])
    }

    /// Halved mask grids, classification grids unchanged.
    pub fn minus_mask() -> Self {
        Self::from_pairs(&[(40, 20), (36, 18), (24, 12), (16, 8), (12, 6)])
    }

    fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(cls, mask)| LevelGrid { cls, mask })
                .collect(),
        )
        .unwrap()
    }
}

/// Ordered neighbor cells for `(i, j)` under `scheme`. Cells may fall outside
/// the grid; callers resolve them (gathers substitute zero maps).
///
/// Canonical orders: `[center]` for none; `[left, center, right]` for row2;
/// `[top, center, bottom]` for col2; `[top, left, center, bottom, right]` for
/// four; row-major excluding center, center appended, for eight.
pub fn neighbor_cells(i: usize, j: usize, scheme: NeighborScheme) -> Vec<(i64, i64)> {
    let (i, j) = (i as i64, j as i64);
    match scheme {
        NeighborScheme::None => vec![(i, j)],
        NeighborScheme::Row2 => vec![(i, j - 1), (i, j), (i, j + 1)],
        NeighborScheme::Col2 => vec![(i - 1, j), (i, j), (i + 1, j)],
        NeighborScheme::Four => vec![(i - 1, j), (i, j - 1), (i, j), (i + 1, j), (i, j + 1)],
        NeighborScheme::Eight => vec![
            (i - 1, j - 1),
            (i - 1, j),
            (i - 1, j + 1),
            (i, j - 1),
            (i, j + 1),
            (i + 1, j - 1),
            (i + 1, j),
            (i + 1, j + 1),
            (i, j),
        ],
    }
}

/// One axis of the interpolation index map: `floor(i * g_mask / g)`.
pub fn interp_axis(i: usize, g: usize, g_mask: usize) -> usize {
    i * g_mask / g
}

/// Maps a classification cell to the mask-grid cell whose neighborhood it
/// shares.
pub fn interp_index(i: usize, j: usize, g: usize, g_mask: usize) -> (usize, usize) {
    debug_assert!(i < g && j < g && g_mask >= 1 && g_mask <= g);
    (interp_axis(i, g, g_mask), interp_axis(j, g, g_mask))
}

/// A `G x G` field of raw (pre-sigmoid) `H x W` mask representations, stored
/// on the tape as `[G*G, H, W]` with cell `(a, b)` at channel `a*G + b`.
#[derive(Debug, Clone, Copy)]
pub struct MaskRepGrid {
    pub var: Var,
    pub grid: usize,
    pub h: usize,
    pub w: usize,
}

impl MaskRepGrid {
    pub fn new(tape: &Tape, var: Var, grid: usize) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 3 || s[0] != grid * grid {
            return Err(Error::shape(
                "MaskRepGrid::new",
                format!("expected [{}, H, W], got {:?}", grid * grid, s),
            ));
        }
        Ok(Self {
            var,
            grid,
            h: s[1],
            w: s[2],
        })
    }
}

/// Stacks the neighborhood of classification cell `(i, j)`: the cell is first
/// mapped onto the mask grid, then `scheme`'s cells are gathered there.
/// Out-of-grid cells contribute all-zero maps.
pub fn gather_fixed(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    i: usize,
    j: usize,
    scheme: NeighborScheme,
    g: usize,
) -> Result<Var> {
    let (mi, mj) = interp_index(i, j, g, reps.grid);
    let cells = neighbor_cells(mi, mj, scheme);
    tape.gather_cells(reps.var, &cells, reps.grid)
}

/// As [`gather_fixed`] but every nominal cell `(r, c)` is displaced by its
/// `(dy, dx)` pair from `offsets` (a `[2 * gathered]` vector, ordered as the
/// scheme's cells) and sampled bilinearly. Zero offsets reduce exactly to the
/// fixed gather.
pub fn gather_deformable(
    tape: &mut Tape,
    reps: &MaskRepGrid,
    i: usize,
    j: usize,
    scheme: NeighborScheme,
    offsets: Var,
    g: usize,
) -> Result<Var> {
    let (mi, mj) = interp_index(i, j, g, reps.grid);
    let cells = neighbor_cells(mi, mj, scheme);
    tape.gather_deform(reps.var, offsets, &cells, reps.grid)
}

/// Views `[G*G, H, W]` mask representations as `[G, G, H*W]`, so deformable
/// sampling can treat the grid axes as spatial dimensions. Pure reshape.
pub fn reshape_for_deform(
    tape: &mut Tape,
    reps: &MaskRepGrid,
) -> Result<Var> {
    tape.slice_reshape(
        reps.var,
        0,
        vec![reps.grid, reps.grid, reps.h * reps.w],
    )
}

/// Inverse of [`reshape_for_deform`].
pub fn reshape_from_deform(tape: &mut Tape, var: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(var).to_vec();
    if s.len() != 3 || s[2] != h * w {
        return Err(Error::shape(
            "reshape_from_deform",
            format!("expected [G, G, {}], got {:?}", h * w, s),
        ));
    }
    tape.slice_reshape(var, 0, vec![s[0] * s[1], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GridTensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_neighbors_in_canonical_order() {
        assert_eq!(
            neighbor_cells(5, 5, NeighborScheme::Four),
            vec![(4, 5), (5, 4), (5, 5), (6, 5), (5, 6)]
        );
    }

    #[test]
    fn corner_cell_keeps_out_of_grid_neighbors() {
        let cells = neighbor_cells(0, 0, NeighborScheme::Four);
        assert!(cells.contains(&(-1, 0)));
        assert!(cells.contains(&(0, -1)));
    }

    #[test]
    fn eight_neighbors_cover_all_unit_offsets() {
        let cells = neighbor_cells(3, 3, NeighborScheme::Eight);
        assert_eq!(cells.len(), 9);
        for p in -1..=1i64 {
            for q in -1..=1i64 {
                assert!(cells.contains(&(3 + p, 3 + q)));
            }
        }
        assert_eq!(*cells.last().unwrap(), (3, 3), "center appended last");
    }

    #[test]
    fn gathered_set_size_is_arity_plus_one() {
        for scheme in [
            NeighborScheme::None,
            NeighborScheme::Row2,
            NeighborScheme::Col2,
            NeighborScheme::Four,
            NeighborScheme::Eight,
        ] {
            assert_eq!(neighbor_cells(2, 2, scheme).len(), scheme.gathered());
        }
    }

    #[test]
    fn interp_index_matches_worked_case() {
        assert_eq!(interp_index(15, 15, 20, 10), (7, 7));
        assert_eq!(interp_index(14, 14, 20, 10), (7, 7));
    }

    #[test]
    fn interp_index_is_identity_when_grids_match() {
        for g in [1, 3, 8] {
            for i in 0..g {
                for j in 0..g {
                    assert_eq!(interp_index(i, j, g, g), (i, j));
                }
            }
        }
    }

    #[test]
    fn interp_table_for_5x7_to_3x3() {
        // Recomputed per axis from floor(i * 3 / 5) and floor(j * 3 / 7).
        let rows: Vec<usize> = (0..5).map(|i| interp_axis(i, 5, 3)).collect();
        let cols: Vec<usize> = (0..7).map(|j| interp_axis(j, 7, 3)).collect();
        assert_eq!(rows, vec![0, 0, 1, 1, 2]);
        assert_eq!(cols, vec![0, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn interp_index_monotone_and_surjective() {
        for g in 1..=50usize {
            for gm in 1..=g {
                let mut seen = vec![false; gm];
                let mut prev = 0;
                for i in 0..g {
                    let v = interp_axis(i, g, gm);
                    assert!(v < gm, "range violated at i={i}, g={g}, gm={gm}");
                    assert!(v >= prev, "monotonicity violated");
                    prev = v;
                    seen[v] = true;
                }
                assert!(seen.iter().all(|&s| s), "not surjective for g={g}, gm={gm}");
            }
        }
    }

    #[test]
    fn cells_sharing_one_mask_cell_bounded_by_floor_ceil_squares() {
        for (g, gm) in [(20usize, 10usize), (9, 4), (7, 3), (12, 12)] {
            let mut counts = vec![0usize; gm * gm];
            for i in 0..g {
                for j in 0..g {
                    let (a, b) = interp_index(i, j, g, gm);
                    counts[a * gm + b] += 1;
                }
            }
            let lo = (g / gm) * (g / gm);
            let hi = g.div_ceil(gm) * g.div_ceil(gm);
            for &c in &counts {
                assert!(c >= lo && c <= hi, "count {c} outside [{lo}, {hi}]");
            }
        }
    }

    fn random_reps(rng: &mut ChaCha8Rng, g: usize, h: usize, w: usize) -> GridTensor {
        GridTensor::new(
            vec![g * g, h, w],
            (0..g * g * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gather_fixed_equal_grids_interior_returns_stored_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = 5;
        let (h, w) = (3, 4);
        let reps_t = random_reps(&mut rng, g, h, w);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t.clone());
        let reps = MaskRepGrid::new(&tape, var, g).unwrap();
        let out = gather_fixed(&mut tape, &reps, 2, 2, NeighborScheme::Four, g).unwrap();
        let cells = [(1usize, 2usize), (2, 1), (2, 2), (3, 2), (2, 3)];
        let hw = h * w;
        for (t, &(r, c)) in cells.iter().enumerate() {
            let expect = &reps_t.data()[(r * g + c) * hw..(r * g + c + 1) * hw];
            assert_eq!(&tape.value(out).data()[t * hw..(t + 1) * hw], expect);
        }
    }

    #[test]
    fn gather_fixed_corner_pads_with_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = 4;
        let (h, w) = (2, 2);
        let reps_t = random_reps(&mut rng, g, h, w);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t);
        let reps = MaskRepGrid::new(&tape, var, g).unwrap();
        let out = gather_fixed(&mut tape, &reps, 0, 0, NeighborScheme::Four, g).unwrap();
        let hw = h * w;
        // channels 0 (top) and 1 (left) fall outside the grid
        assert!(tape.value(out).data()[..2 * hw].iter().all(|&v| v == 0.0));
        assert!(tape.value(out).data()[2 * hw..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shared_mask_cell_yields_identical_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gm = 10;
        let g = 20;
        let reps_t = random_reps(&mut rng, gm, 2, 3);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t);
        let reps = MaskRepGrid::new(&tape, var, gm).unwrap();
        let a = gather_fixed(&mut tape, &reps, 15, 15, NeighborScheme::Four, g).unwrap();
        let b = gather_fixed(&mut tape, &reps, 14, 14, NeighborScheme::Four, g).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn deformable_with_zero_offsets_is_bit_identical_to_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = rng.gen_range(2..8usize);
            let (h, w) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
            let scheme = *[
                NeighborScheme::None,
                NeighborScheme::Row2,
                NeighborScheme::Col2,
                NeighborScheme::Four,
                NeighborScheme::Eight,
            ]
            .choose(&mut rng)
            .unwrap();
            let gc = rng.gen_range(g..=2 * g);
            let i = rng.gen_range(0..gc);
            let j = rng.gen_range(0..gc);
            let reps_t = random_reps(&mut rng, g, h, w);
            let mut tape = Tape::new();
            let var = tape.leaf(reps_t);
            let reps = MaskRepGrid::new(&tape, var, g).unwrap();
            let zero = tape.leaf(GridTensor::zeros(vec![scheme.offset_dim()]));
            let fixed = gather_fixed(&mut tape, &reps, i, j, scheme, gc).unwrap();
            let deform = gather_deformable(&mut tape, &reps, i, j, scheme, zero, gc).unwrap();
            assert_eq!(tape.value(fixed).data(), tape.value(deform).data());
        }
    }

    #[test]
    fn deformable_half_cell_offset_blends_two_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = 4;
        let (h, w) = (2, 2);
        let reps_t = random_reps(&mut rng, g, h, w);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t.clone());
        let reps = MaskRepGrid::new(&tape, var, g).unwrap();
        // center-only scheme at (1,1), offset (0.5, 0)
        let off = tape
            .leaf(GridTensor::new(vec![2], vec![0.5, 0.0]).unwrap());
        let out = gather_deformable(&mut tape, &reps, 1, 1, NeighborScheme::None, off, g).unwrap();
        let hw = h * w;
        let map = |r: usize, c: usize| &reps_t.data()[(r * g + c) * hw..(r * g + c + 1) * hw];
        let got = tape.value(out).data();
        for t in 0..hw {
            let expect = 0.5 * map(1, 1)[t] + 0.5 * map(2, 1)[t];
            assert!((got[t] - expect).abs() < 1e-15, "pixel {t}");
        }
    }

    #[test]
    fn deformable_integer_offset_moves_one_row_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = 4;
        let reps_t = random_reps(&mut rng, g, 2, 2);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t.clone());
        let reps = MaskRepGrid::new(&tape, var, g).unwrap();
        let off = tape.leaf(GridTensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let out = gather_deformable(&mut tape, &reps, 1, 1, NeighborScheme::None, off, g).unwrap();
        let hw = 4;
        assert_eq!(
            tape.value(out).data(),
            &reps_t.data()[(2 * g + 1) * hw..(2 * g + 1 + 1) * hw]
        );
    }

    #[test]
    fn reshape_round_trip_and_index_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = 3;
        let (h, w) = (2, 3);
        let reps_t = random_reps(&mut rng, g, h, w);
        let mut tape = Tape::new();
        let var = tape.leaf(reps_t.clone());
        let reps = MaskRepGrid::new(&tape, var, g).unwrap();
        let flat = reshape_for_deform(&mut tape, &reps).unwrap();
        assert_eq!(tape.shape(flat), &[g, g, h * w]);
        // element (cell=(a,b), pixel=(y,x)) lands at [a, b, y*w + x]
        let (a, b, y, x) = (2usize, 1usize, 1usize, 2usize);
        assert_eq!(
            tape.value(flat).at(&[a, b, y * w + x]),
            reps_t.at(&[a * g + b, y, x])
        );
        let back = reshape_from_deform(&mut tape, flat, h, w).unwrap();
        assert_eq!(tape.value(back).data(), reps_t.data());
        assert_eq!(tape.shape(back), reps_t.shape());
    }

    #[test]
    fn deformable_offset_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = 5;
        let (h, w) = (3, 3);
        let reps_t = random_reps(&mut rng, g, h, w);
        let scheme = NeighborScheme::Four;
        // fractional offsets away from integers so the bilinear kink is not hit
        let mut off: Vec<f64> = (0..scheme.offset_dim())
            .map(|_| {
                let mut v: f64 = rng.gen_range(-1.4..1.4);
                while (v - v.round()).abs() < 1e-2 {
                    v = rng.gen_range(-1.4..1.4);
                }
                v
            })
            .collect();

        // scalar objective: weighted sum of the gathered stack
        let weights: Vec<f64> = (0..scheme.gathered() * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let run = |off_data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let var = tape.leaf(reps_t.clone());
            let reps = MaskRepGrid::new(&tape, var, g).unwrap();
            let ov = tape
                .leaf(GridTensor::new(vec![off_data.len()], off_data.to_vec()).unwrap());
            let out = gather_deformable(&mut tape, &reps, 2, 2, scheme, ov, g).unwrap();
            tape.value(out)
                .data()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };

        // analytic gradient: express the dot product as an AddWeighted over
        // per-element slices, then sweep backward
        let coords: Vec<usize> = (0..off.len()).collect();
        let mut tape2 = Tape::new();
        let var2 = tape2.leaf(reps_t.clone());
        let reps2 = MaskRepGrid::new(&tape2, var2, g).unwrap();
        let ov2 = tape2.leaf(GridTensor::new(vec![off.len()], off.clone()).unwrap());
        let out2 = gather_deformable(&mut tape2, &reps2, 2, 2, scheme, ov2, g).unwrap();
        let terms: Vec<(crate::tape::Var, f64)> = (0..weights.len())
            .map(|t| {
                let s = tape2.slice_reshape(out2, t, vec![1]).unwrap();
                (s, weights[t])
            })
            .collect();
        let lossv = tape2.add_weighted(&terms).unwrap();
        let grads = tape2.backward(lossv).unwrap();
        let analytic = grads.wrt(ov2).unwrap().data().to_vec();

        let worst = gradcheck::max_rel_err(&run, &mut off, &analytic, &coords, 1e-5);
        assert!(worst < 1e-4, "offset gradient rel err {worst}");
    }
}
