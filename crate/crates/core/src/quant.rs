//! Symmetric blockwise 8-bit and 4-bit weight formats.
//!
//! Both formats split the last dimension into blocks of 32 weights, each
//! carrying one little-endian f16 scale:
//!
//! * `q8_0`: scale + 32 signed bytes, 34 bytes per block, `scale = amax/127`
//! * `q4_0`: scale + 16 bytes, 18 bytes per block, `scale = amax/7`. Byte
//!   `j` holds weight `j` in its low nibble and weight `j + 16` in its high
//!   nibble, each stored as `code + 8`.
//!
//! The f16 scale is rounded toward zero, so no code ever exceeds the
//! nominal range and `|w - scale·code| <= amax/(2·qmax)` holds per weight.

use alloc::format;
use alloc::vec::Vec;

use half::f16;

use crate::manifest::{keys, InMemoryModel};
use crate::{DType, Error, Result, Tensor};

pub const BLOCK_SIZE: usize = 32;
pub const Q8_0_BLOCK_BYTES: usize = 2 + BLOCK_SIZE;
pub const Q4_0_BLOCK_BYTES: usize = 2 + BLOCK_SIZE / 2;

fn block_bytes(dtype: DType) -> usize {
    match dtype {
        DType::Q8_0 => Q8_0_BLOCK_BYTES,
        DType::Q4_0 => Q4_0_BLOCK_BYTES,
        _ => unreachable!("not a block format"),
    }
}

fn qmax(dtype: DType) -> f32 {
    match dtype {
        DType::Q8_0 => 127.0,
        DType::Q4_0 => 7.0,
        _ => unreachable!("not a block format"),
    }
}

/// Largest f16 not above `x` (for finite non-negative `x`).
fn f16_round_down(x: f32) -> f16 {
    if x >= f16::MAX.to_f32() {
        return f16::MAX;
    }
    let h = f16::from_f32(x);
    if h.to_f32() > x {
        f16::from_bits(h.to_bits() - 1)
    } else {
        h
    }
}

/// Scale a block of weights would be stored with.
pub fn block_scale(block: &[f32], dtype: DType) -> f32 {
    let amax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    scale_for(amax, dtype).to_f32()
}

fn scale_for(amax: f32, dtype: DType) -> f16 {
    if amax == 0.0 {
        return f16::ZERO;
    }
    let s = f16_round_down(amax / qmax(dtype));
    if s == f16::ZERO {
        // below the f16 subnormal range; smallest positive scale
        f16::from_bits(1)
    } else {
        s
    }
}

fn quantize_block(block: &[f32], dtype: DType, out: &mut Vec<u8>) {
    let amax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = scale_for(amax, dtype);
    let d = scale.to_f32();
    let max = qmax(dtype);
    out.extend_from_slice(&scale.to_le_bytes());
    let code = |w: f32| -> i32 {
        if d == 0.0 {
            return 0;
        }
        libm::roundf(w / d).clamp(-max, max) as i32
    };
    match dtype {
        DType::Q8_0 => out.extend(block.iter().map(|&w| code(w) as i8 as u8)),
        DType::Q4_0 => {
            let half = BLOCK_SIZE / 2;
            for j in 0..half {
                let lo = (code(block[j]) + 8) as u8;
                let hi = (code(block[j + half]) + 8) as u8;
                out.push(lo | (hi << 4));
            }
        }
        _ => unreachable!(),
    }
}

#[inline]
fn block_codes(block: &[u8], dtype: DType, codes: &mut [i8; BLOCK_SIZE]) -> f32 {
    let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
    match dtype {
        DType::Q8_0 => {
            for (c, b) in codes.iter_mut().zip(&block[2..]) {
                *c = *b as i8;
            }
        }
        DType::Q4_0 => {
            let half = BLOCK_SIZE / 2;
            for j in 0..half {
                let b = block[2 + j];
                codes[j] = (b & 0x0f) as i8 - 8;
                codes[j + half] = (b >> 4) as i8 - 8;
            }
        }
        _ => unreachable!(),
    }
    d
}

/// Quantizes an f32 tensor whose last dimension is a multiple of 32.
pub fn quantize_tensor(t: &Tensor, dtype: DType) -> Result<Tensor> {
    if !dtype.is_quantized() {
        return Err(Error::Argument(format!("{dtype} is not a block-quantized dtype")));
    }
    let shape = t.shape().to_vec();
    let last = *shape.last().expect("tensors have rank >= 1");
    if !last.is_multiple_of(BLOCK_SIZE) {
        return Err(Error::shape(
            "quantize: last dim must be a multiple of 32",
            &shape,
            &[BLOCK_SIZE],
        ));
    }
    let values = t.expect_f32("quantize_tensor")?;
    let mut data = Vec::with_capacity(dtype.nbytes(&shape));
    for block in values.chunks_exact(BLOCK_SIZE) {
        quantize_block(block, dtype, &mut data);
    }
    Tensor::new(shape, dtype, data)
}

/// Expands a quantized tensor back to f32.
pub fn dequantize_tensor(t: &Tensor) -> Result<Tensor> {
    let dtype = t.dtype();
    if !dtype.is_quantized() {
        return Err(Error::Argument(format!("{dtype} tensor is not quantized")));
    }
    let values = dequantize_blocks(t.data(), dtype, t.numel())?;
    Tensor::from_f32(t.shape().to_vec(), &values)
}

/// Expands `n` weights from raw block bytes.
pub fn dequantize_blocks(data: &[u8], dtype: DType, n: usize) -> Result<Vec<f32>> {
    let bb = block_bytes(dtype);
    if !n.is_multiple_of(BLOCK_SIZE) || data.len() != n / BLOCK_SIZE * bb {
        return Err(Error::Format(format!(
            "corrupt {dtype} payload: {} bytes for {n} weights",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut codes = [0i8; BLOCK_SIZE];
    for block in data.chunks_exact(bb) {
        let d = block_codes(block, dtype, &mut codes);
        out.extend(codes.iter().map(|&c| c as f32 * d));
    }
    Ok(out)
}

/// Dot product of one quantized row with `x`, accumulating per block.
pub(crate) fn row_dot(row: &[u8], dtype: DType, x: &[f32]) -> f32 {
    let bb = block_bytes(dtype);
    let mut codes = [0i8; BLOCK_SIZE];
    let mut acc = 0.0f64;
    for (block, xs) in row.chunks_exact(bb).zip(x.chunks_exact(BLOCK_SIZE)) {
        let d = block_codes(block, dtype, &mut codes);
        let mut s = 0.0f64;
        for (c, xv) in codes.iter().zip(xs) {
            s += *c as f64 * *xv as f64;
        }
        acc += s * d as f64;
    }
    acc as f32
}

/// `y = W·x` straight from quantized blocks of a `[m×k]` matrix.
pub fn quantized_matvec(w: &Tensor, x: &[f32]) -> Result<Vec<f32>> {
    let dtype = w.dtype();
    if !dtype.is_quantized() {
        return Err(Error::Argument(format!(
            "quantized_matvec needs q8_0/q4_0, got {dtype}"
        )));
    }
    let shape = w.shape();
    if shape.len() != 2 || shape[1] != x.len() || !x.len().is_multiple_of(BLOCK_SIZE) {
        return Err(Error::shape("quantized_matvec", shape, &[x.len()]));
    }
    let row_bytes = shape[1] / BLOCK_SIZE * block_bytes(dtype);
    Ok(w.data()
        .chunks_exact(row_bytes)
        .map(|row| row_dot(row, dtype, x))
        .collect())
}

/// Per-block scales of a quantized tensor, in storage order.
pub fn scales(t: &Tensor) -> Result<Vec<f32>> {
    let dtype = t.dtype();
    if !dtype.is_quantized() {
        return Err(Error::Argument(format!("{dtype} tensor has no block scales")));
    }
    Ok(t.data()
        .chunks_exact(block_bytes(dtype))
        .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
        .collect())
}

/// Raw codes of a quantized tensor, in element order.
pub fn codes(t: &Tensor) -> Result<Vec<i8>> {
    let dtype = t.dtype();
    if !dtype.is_quantized() {
        return Err(Error::Argument(format!("{dtype} tensor has no codes")));
    }
    let mut out = Vec::with_capacity(t.numel());
    let mut buf = [0i8; BLOCK_SIZE];
    for block in t.data().chunks_exact(block_bytes(dtype)) {
        block_codes(block, dtype, &mut buf);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// Which tensors of a model [`quantize_model`] converts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantizePolicy {
    /// Also convert the token embedding table and position embeddings.
    pub include_embeddings: bool,
}

fn is_embedding(name: &str) -> bool {
    name == "llm.tok_embed.weight" || name == "vit.pos_embed"
}

/// Whether `policy` converts tensor `name` of `shape` to `dtype`.
pub fn eligible(name: &str, shape: &[usize], dtype: DType, policy: QuantizePolicy) -> bool {
    if shape.len() != 2 || (is_embedding(name) && !policy.include_embeddings) {
        return false;
    }
    !dtype.is_quantized() || shape[1].is_multiple_of(BLOCK_SIZE)
}

/// Converts every eligible weight matrix to `dtype` (f16, q8_0 or q4_0).
///
/// Vectors (norms, biases) always stay f32, as do matrices whose rows are
/// not a whole number of blocks. Metadata gains `general.precision`.
pub fn quantize_model(model: &InMemoryModel, dtype: DType, policy: QuantizePolicy) -> Result<InMemoryModel> {
    if dtype == DType::F32 {
        return Err(Error::Argument("target precision must be f16, q8_0 or q4_0".into()));
    }
    let mut out = model.clone();
    for (name, t) in out.tensors.iter_mut() {
        if !eligible(name, t.shape(), dtype, policy) || t.dtype() == dtype {
            continue;
        }
        if t.dtype().is_quantized() {
            return Err(Error::Consistency(format!(
                "{name} is already {}; requantize from the f32 model",
                t.dtype()
            )));
        }
        let values = t.to_f32_vec()?;
        *t = match dtype {
            DType::F16 => Tensor::from_f32_as_f16(t.shape().to_vec(), &values)?,
            _ => quantize_tensor(&Tensor::from_f32(t.shape().to_vec(), &values)?, dtype)?,
        };
    }
    out.manifest.set(keys::GENERAL_PRECISION, dtype.name());
    out.relayout()?;
    Ok(out)
}
