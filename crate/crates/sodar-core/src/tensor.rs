//! Dense row-major tensor substrate.
//!
//! All compute runs on 64-bit floats so that finite-difference gradient checks
//! are meaningful; the on-disk GTF format stores 32-bit floats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A dense row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GridTensor {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "GridTensor::new",
                format!(
                    "shape {:?} implies {} elements but buffer holds {}",
                    shape,
                    n,
                    data.len()
                ),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "GridTensor::new",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} elements as shape {:?} ({} elements)",
                    self.data.len(),
                    shape,
                    n
                ),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of a multi-index. Debug-checked.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(self.shape.iter()) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Writes the tensor in GTF: magic `GTF1`, u32 LE rank, rank u32 LE
    /// extents, then the row-major payload as IEEE-754 LE f32.
    pub fn write_gtf<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"GTF1")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_gtf<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GTF1" {
            return Err(Error::Malformed {
                what: "GTF file",
                detail: format!("bad magic {magic:?}"),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Malformed {
                what: "GTF file",
                detail: format!("unsupported rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        GridTensor::new(shape, data)
    }

    pub fn save_gtf(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_gtf(&mut f)
    }

    pub fn load_gtf(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_gtf(&mut f)
    }
}

/// Convolution geometry: stride is fixed at 1 and padding at `kernel / 2`, so
/// the spatial size is preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid(format!(
                "conv spec needs positive channel counts, got {in_channels}->{out_channels}"
            )));
        }
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::invalid(format!(
                "conv kernel must be odd and positive, got {kernel}"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Shape of the weight tensor: `[out, in, k, k]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    /// Multiply-accumulate count of one application over an `h`x`w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.out_channels as u64
            * self.in_channels as u64
            * (self.kernel * self.kernel) as u64
            * (h * w) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = GridTensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "error should name the shape: {msg}");
    }

    #[test]
    fn shape_product_matches_len() {
        let t = GridTensor::new(vec![2, 3, 4], vec![1.0; 24]).unwrap();
        assert_eq!(t.shape().iter().product::<usize>(), t.len());
    }

    #[test]
    fn offset_is_row_major() {
        let t = GridTensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn gtf_round_trip_exact_for_f32_values() {
        let vals: Vec<f64> = vec![0.0, -1.5, 3.25, 0.0009765625, -7.0];
        let t = GridTensor::new(vec![5], vals.clone()).unwrap();
        let mut buf = Vec::new();
        t.write_gtf(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GTF1");
        let back = GridTensor::read_gtf(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[5]);
        // values representable in f32 survive unchanged
        assert_eq!(back.data(), &vals[..]);
    }

    #[test]
    fn gtf_rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(GridTensor::read_gtf(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn conv_spec_rejects_even_kernel() {
        assert!(ConvSpec::new(3, 8, 2).is_err());
        assert!(ConvSpec::new(3, 8, 3).is_ok());
    }
}
