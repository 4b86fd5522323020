//! The value carrier: a shaped, typed run of little-endian bytes.

use alloc::format;
use alloc::vec::Vec;

use crate::{quant, Error, Result};

pub const MAX_RANK: usize = 4;

/// Element encoding of a [`Tensor`].
///
/// The quantized variants store blocks of [`quant::BLOCK_SIZE`] weights
/// along the last dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    Q8_0,
    Q4_0,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Q8_0 => 2,
            DType::Q4_0 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DType::F32,
            1 => DType::F16,
            2 => DType::Q8_0,
            3 => DType::Q4_0,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::Q8_0 => "q8_0",
            DType::Q4_0 => "q4_0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "f32" => DType::F32,
            "f16" => DType::F16,
            "q8_0" => DType::Q8_0,
            "q4_0" => DType::Q4_0,
            _ => return None,
        })
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, DType::Q8_0 | DType::Q4_0)
    }

    /// Number of payload bytes a tensor of `shape` occupies in this dtype.
    pub fn nbytes(self, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match self {
            DType::F32 => 4 * n,
            DType::F16 => 2 * n,
            DType::Q8_0 | DType::Q4_0 => {
                let last = shape.last().copied().unwrap_or(1);
                let rows = n.checked_div(last).unwrap_or(0);
                let per_block = if self == DType::Q8_0 {
                    quant::Q8_0_BLOCK_BYTES
                } else {
                    quant::Q4_0_BLOCK_BYTES
                };
                rows * last.div_ceil(quant::BLOCK_SIZE) * per_block
            }
        }
    }
}

impl core::fmt::Display for DType {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<u8>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Argument(format!(
            "tensor rank must be in 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Argument(format!(
            "tensor dimensions must be >= 1, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Wraps raw bytes, checking them against the dtype size formula.
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<u8>) -> Result<Self> {
        check_shape(&shape)?;
        let expected = dtype.nbytes(&shape);
        if data.len() != expected {
            return Err(Error::Format(format!(
                "{dtype} tensor of shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape("from_f32", &shape, &[values.len()]));
        }
        let mut data = Vec::with_capacity(4 * n);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Ok(Self {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    /// Stores `values` as IEEE half precision.
    pub fn from_f32_as_f16(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape("from_f32_as_f16", &shape, &[values.len()]));
        }
        let mut data = Vec::with_capacity(2 * n);
        for v in values {
            data.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
        }
        Ok(Self {
            shape,
            dtype: DType::F16,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_f32(shape, &alloc::vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, DType, Vec<u8>) {
        (self.shape, self.dtype, self.data)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len()
    }

    /// Decodes to f32 values regardless of storage dtype.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => Ok(self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            DType::F16 => Ok(self
                .data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect()),
            DType::Q8_0 | DType::Q4_0 => Ok(quant::dequantize_tensor(self)?.to_f32_vec()?),
        }
    }

    pub(crate) fn expect_f32(&self, op: &'static str) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::Argument(format!(
                "{op} expects an f32 tensor, got {}",
                self.dtype
            )));
        }
        self.to_f32_vec()
    }
}
