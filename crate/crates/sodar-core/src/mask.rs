//! Binary masks and their run-length encoding.
//!
//! RLE scheme: row-major scan, alternating run counts of 0s and 1s, starting
//! with a 0-run (which may be zero-length when the mask begins with a 1).
//! Counts always sum to `h * w`.

use crate::error::{Error, Result};
use crate::tensor::GridTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{h}x{w} mask needs {} pixels, got {}", h * w, data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Thresholds a real-valued `[H, W]` map at `thresh` (values >= thresh
    /// become foreground).
    pub fn from_soft(map: &GridTensor, thresh: f64) -> Result<Self> {
        let s = map.shape();
        if s.len() != 2 {
            return Err(Error::shape(
                "BinaryMask::from_soft",
                format!("need [H, W], got {s:?}"),
            ));
        }
        Ok(Self {
            h: s[0],
            w: s[1],
            data: map.data().iter().map(|&v| v >= thresh).collect(),
        })
    }

    /// Intersection-over-union; 0 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::shape(
                "mask_iou",
                format!(
                    "{}x{} vs {}x{}",
                    self.h, self.w, other.h, other.w
                ),
            ));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            Ok(0.0)
        } else {
            Ok(inter as f64 / union as f64)
        }
    }

    /// 2x area downsample: a target pixel is foreground when at least half of
    /// its 2x2 source block is. Requires even dims.
    pub fn downsample2(&self) -> Result<BinaryMask> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::shape(
                "downsample2",
                format!("need even dims, got {}x{}", self.h, self.w),
            ));
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut data = vec![false; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let c = self.get(2 * y, 2 * x) as u8
                    + self.get(2 * y, 2 * x + 1) as u8
                    + self.get(2 * y + 1, 2 * x) as u8
                    + self.get(2 * y + 1, 2 * x + 1) as u8;
                data[y * ow + x] = c >= 2;
            }
        }
        BinaryMask::new(oh, ow, data)
    }

    /// 0/1 representation as a float map.
    pub fn to_tensor(&self) -> GridTensor {
        GridTensor::new(
            vec![self.h, self.w],
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    pub fn rle_encode(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &v in &self.data {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn rle_decode(h: usize, w: usize, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total != h * w {
            return Err(Error::Malformed {
                what: "RLE mask",
                detail: format!("counts sum to {total}, expected {}", h * w),
            });
        }
        let mut data = Vec::with_capacity(h * w);
        let mut value = false;
        for &c in counts {
            data.extend(std::iter::repeat(value).take(c));
            value = !value;
        }
        BinaryMask::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::new(1, 4, vec![true, true, false, true]).unwrap();
        assert_eq!(m.rle_encode(), vec![0, 2, 1, 1]);
    }

    #[test]
    fn rle_of_empty_mask_is_single_run() {
        let m = BinaryMask::empty(2, 3);
        assert_eq!(m.rle_encode(), vec![6]);
    }

    #[test]
    fn downsample2_majority_rule() {
        let mut m = BinaryMask::empty(4, 4);
        // top-left 2x2 block fully set, one pixel in top-right block
        m.set(0, 0, true);
        m.set(0, 1, true);
        m.set(1, 0, true);
        m.set(1, 1, true);
        m.set(0, 2, true);
        let d = m.downsample2().unwrap();
        assert!(d.get(0, 0));
        assert!(!d.get(0, 1), "1 of 4 pixels is below the majority");
    }

    proptest! {
        #[test]
        fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let w = bits.len();
            let m = BinaryMask::new(1, w, bits).unwrap();
            let counts = m.rle_encode();
            prop_assert_eq!(BinaryMask::rle_decode(1, w, &counts).unwrap(), m);
        }
    }
}
