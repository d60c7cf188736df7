//! Dense row-major `f32` tensors and the `V21T` binary exchange format.
//!
//! Layout of a `V21T` file (all integers and floats little-endian):
//!
//! | bytes        | content                     |
//! |--------------|-----------------------------|
//! | 4            | magic `b"V21T"`             |
//! | 4            | format version, `u32` = 1   |
//! | 4            | rank, `u32` in 1..=5        |
//! | 4 * rank     | dims, `u32` each            |
//! | 4 * numel    | data, `f32`, last index fastest |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"V21T";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("dims {dims:?} imply {numel} elements, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        let numel = dims.iter().product();
        Ok(Self { dims, data: vec![0.0; numel] })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major flat offset of a multi-index. Panics on rank mismatch or
    /// out-of-range coordinates.
    #[inline]
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            off = off * d + i;
        }
        off
    }

    #[inline]
    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Index of the first NaN or infinite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(index) = self.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::shape(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a `V21T` buffer; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: String| Error::Truncated { path: path.to_path_buf(), detail };
        if bytes.len() < 12 {
            return Err(truncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf(), found: magic });
        }
        let version = read_u32(bytes, 4);
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version });
        }
        let rank = read_u32(bytes, 8) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::shape(format!("{}: rank {rank} outside 1..={MAX_RANK}", path.display())));
        }
        let header = 12 + 4 * rank;
        if bytes.len() < header {
            return Err(truncated(format!("header declares rank {rank} but file ends early")));
        }
        let dims: Vec<usize> = (0..rank).map(|i| read_u32(bytes, 12 + 4 * i) as usize).collect();
        validate_dims(&dims)?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))?;
        let payload = bytes.len() - header;
        if Some(payload) != numel.checked_mul(4) {
            return Err(truncated(format!("dims {dims:?} need {numel} floats, payload holds {payload} bytes")));
        }
        let data: Vec<f32> =
            bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Self { dims, data };
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("dims {dims:?} contain a zero extent")));
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Writes `t` as a `V21T` file. Rejects non-finite data.
pub fn tensor_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}
