//! Weight-backed building blocks shared by the vision encoder and the
//! decoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::manifest::TensorSource;
use crate::ops::{self, gelu};
use crate::quant::{self, BLOCK_SIZE};
use crate::{DType, Error, Result, Tensor};

#[derive(Debug, Clone)]
enum Storage {
    Dense(Vec<f32>),
    Blocks { dtype: DType, bytes: Vec<u8> },
}

/// A `[rows×cols]` matrix kept either dense or in its quantized blocks.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    storage: Storage,
}

impl WeightMatrix {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Consistency(format!("expected a matrix, got shape {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let storage = match t.dtype() {
            DType::F32 | DType::F16 => Storage::Dense(t.to_f32_vec()?),
            dtype => {
                if cols % BLOCK_SIZE != 0 {
                    return Err(Error::Format(format!("{dtype} matrix with {cols} columns")));
                }
                Storage::Blocks {
                    dtype,
                    bytes: t.into_parts().2,
                }
            }
        };
        Ok(Self { rows, cols, storage })
    }

    pub fn dense(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self {
            rows,
            cols,
            storage: Storage::Dense(values),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row_bytes(&self, dtype: DType) -> usize {
        dtype.nbytes(&[self.cols])
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        match &self.storage {
            Storage::Dense(w) => ops::matvec_f32(w, self.rows, self.cols, x),
            Storage::Blocks { dtype, bytes } => bytes
                .chunks_exact(self.row_bytes(*dtype))
                .map(|row| quant::row_dot(row, *dtype, x))
                .collect(),
        }
    }

    /// One row as f32, used for embedding lookups.
    pub fn row(&self, i: usize) -> Vec<f32> {
        match &self.storage {
            Storage::Dense(w) => w[i * self.cols..(i + 1) * self.cols].to_vec(),
            Storage::Blocks { dtype, bytes } => {
                let rb = self.row_bytes(*dtype);
                quant::dequantize_blocks(&bytes[i * rb..(i + 1) * rb], *dtype, self.cols)
                    .expect("row length checked at load")
            }
        }
    }
}

/// LoRA factors applied on the fly: `y += scale · B(Ax)`.
#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub a: WeightMatrix,
    pub b: WeightMatrix,
    pub scale: f32,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: WeightMatrix,
    pub bias: Option<Vec<f32>>,
    pub lora: Option<LoraDelta>,
}

impl Linear {
    /// Loads `{prefix}.weight` as `[out×inp]` and an optional `{prefix}.bias`.
    pub fn load(src: &dyn TensorSource, prefix: &str, out: usize, inp: usize) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let t = src.load(&name)?;
        if t.shape() != [out, inp] {
            return Err(Error::Consistency(format!(
                "{name} has shape {:?}, expected [{out}, {inp}]",
                t.shape()
            )));
        }
        let weight = WeightMatrix::from_tensor(t)?;
        let bias = load_vector(src, &format!("{prefix}.bias"), out, false)?;
        Ok(Self {
            weight,
            bias,
            lora: None,
        })
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.weight.matvec(x);
        if let Some(b) = &self.bias {
            for (v, bv) in y.iter_mut().zip(b) {
                *v += bv;
            }
        }
        if let Some(l) = &self.lora {
            let ax = l.a.matvec(x);
            for (v, d) in y.iter_mut().zip(l.b.matvec(&ax)) {
                *v += l.scale * d;
            }
        }
        y
    }

    /// Applies the layer to each of the `x.len() / in_dim` rows of `x`.
    pub fn forward_rows(&self, x: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(x.len() / self.weight.cols * self.weight.rows);
        for row in x.chunks_exact(self.weight.cols) {
            out.extend(self.forward(row));
        }
        out
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }
}

pub(crate) fn load_vector(src: &dyn TensorSource, name: &str, len: usize, required: bool) -> Result<Option<Vec<f32>>> {
    let t = if required {
        Some(src.load(name)?)
    } else {
        src.load_optional(name)?
    };
    match t {
        None => Ok(None),
        Some(t) if t.numel() == len && t.shape().len() == 1 => Ok(Some(t.to_f32_vec()?)),
        Some(t) => Err(Error::Consistency(format!(
            "{name} has shape {:?}, expected [{len}]",
            t.shape()
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn load(src: &dyn TensorSource, prefix: &str, dim: usize, eps: f32) -> Result<Self> {
        let gamma = load_vector(src, &format!("{prefix}.weight"), dim, true)?.expect("required");
        let beta = load_vector(src, &format!("{prefix}.bias"), dim, false)?.unwrap_or_else(|| vec![0.0; dim]);
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        ops::layer_norm_into(x, &self.gamma, &self.beta, self.eps, &mut out);
        out
    }

    pub fn forward_rows(&self, x: &[f32]) -> Vec<f32> {
        let d = self.gamma.len();
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            ops::layer_norm_into(src, &self.gamma, &self.beta, self.eps, dst);
        }
        out
    }
}

/// `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn load(src: &dyn TensorSource, prefix: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::load(src, &format!("{prefix}.fc1"), hidden, dim)?,
            fc2: Linear::load(src, &format!("{prefix}.fc2"), out, hidden)?,
        })
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let h: Vec<f32> = self.fc1.forward(x).into_iter().map(gelu).collect();
        self.fc2.forward(&h)
    }

    pub fn forward_rows(&self, x: &[f32]) -> Vec<f32> {
        let mut h = self.fc1.forward_rows(x);
        for v in h.iter_mut() {
            *v = gelu(*v);
        }
        self.fc2.forward_rows(&h)
    }
}

/// Splits `[len × n_heads·head_dim]` rows into per-head `[len × head_dim]`.
pub(crate) fn split_heads(x: &[f32], len: usize, n_heads: usize, head_dim: usize) -> Vec<Vec<f32>> {
    let d = n_heads * head_dim;
    (0..n_heads)
        .map(|h| {
            let mut out = Vec::with_capacity(len * head_dim);
            for t in 0..len {
                out.extend_from_slice(&x[t * d + h * head_dim..t * d + (h + 1) * head_dim]);
            }
            out
        })
        .collect()
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(heads: &[Vec<f32>], len: usize, head_dim: usize) -> Vec<f32> {
    let n_heads = heads.len();
    let mut out = vec![0.0; len * n_heads * head_dim];
    for (h, head) in heads.iter().enumerate() {
        for t in 0..len {
            out[t * n_heads * head_dim + h * head_dim..t * n_heads * head_dim + (h + 1) * head_dim]
                .copy_from_slice(&head[t * head_dim..(t + 1) * head_dim]);
        }
    }
    out
}

pub(crate) fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
