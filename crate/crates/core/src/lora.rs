//! Low-rank adapters: folding `W' = W + (alpha/r)·B·A` into base weights,
//! or applying the same delta at runtime.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::layers::{LoraDelta, WeightMatrix};
use crate::manifest::{InMemoryModel, MetaValue, TensorSource};
use crate::multimodal::MultimodalModel;
use crate::ops::matmul_f32;
use crate::{DType, Error, Result, Tensor};

pub const KEY_NAME: &str = "lora.name";
pub const KEY_ALPHA: &str = "lora.alpha";
pub const KEY_RANK: &str = "lora.rank";
const A_SUFFIX: &str = ".lora_a";
const B_SUFFIX: &str = ".lora_b";

/// `A: [r × d_in]`, `B: [d_out × r]` for one target weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub alpha: f32,
    pub rank: usize,
    /// Keyed by the full base tensor name, e.g. `llm.blocks.0.attn.q.weight`.
    pub targets: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// The adapter whose delta cancels this one.
    pub fn negated(&self) -> Result<Self> {
        let mut out = self.clone();
        out.name = format!("-{}", self.name);
        for pair in out.targets.values_mut() {
            let b: Vec<f32> = pair.b.to_f32_vec()?.into_iter().map(|v| -v).collect();
            pair.b = Tensor::from_f32(pair.b.shape().to_vec(), &b)?;
        }
        Ok(out)
    }

    fn check_pair(&self, target: &str, pair: &LoraPair, base_shape: &[usize]) -> Result<(usize, usize)> {
        if self.rank == 0 {
            return Err(Error::Consistency("adapter rank must be >= 1".into()));
        }
        if base_shape.len() != 2 {
            return Err(Error::Consistency(format!("{target} is not a matrix: {base_shape:?}")));
        }
        let (d_out, d_in) = (base_shape[0], base_shape[1]);
        if pair.a.shape() != [self.rank, d_in] || pair.b.shape() != [d_out, self.rank] {
            return Err(Error::Consistency(format!(
                "{target}: A {:?} / B {:?} do not match base {base_shape:?} at rank {}",
                pair.a.shape(),
                pair.b.shape(),
                self.rank
            )));
        }
        Ok((d_out, d_in))
    }

    /// Dense `scale · B·A`.
    pub fn delta(&self, target: &str, base_shape: &[usize]) -> Result<Vec<f32>> {
        let pair = self
            .targets
            .get(target)
            .ok_or_else(|| Error::Consistency(format!("adapter has no target {target:?}")))?;
        let (d_out, d_in) = self.check_pair(target, pair, base_shape)?;
        let ba = matmul_f32(&pair.b.to_f32_vec()?, &pair.a.to_f32_vec()?, d_out, self.rank, d_in);
        let s = self.scale();
        Ok(ba.into_iter().map(|v| v * s).collect())
    }

    /// Adapter file layout: `<target>.lora_a` / `<target>.lora_b` tensors.
    pub fn to_model(&self) -> Result<InMemoryModel> {
        let metadata = alloc::vec![
            (KEY_NAME.to_string(), MetaValue::from(self.name.as_str())),
            (KEY_ALPHA.to_string(), MetaValue::Float(self.alpha as f64)),
            (KEY_RANK.to_string(), MetaValue::from(self.rank)),
        ];
        let mut tensors = Vec::new();
        for (target, pair) in &self.targets {
            tensors.push((format!("{target}{A_SUFFIX}"), pair.a.clone()));
            tensors.push((format!("{target}{B_SUFFIX}"), pair.b.clone()));
        }
        InMemoryModel::new(metadata, tensors)
    }

    pub fn from_source(src: &dyn TensorSource) -> Result<Self> {
        let m = src.manifest();
        let name = m.get_str(KEY_NAME)?.unwrap_or("adapter").to_string();
        let alpha = m
            .get_float(KEY_ALPHA)?
            .ok_or_else(|| Error::Format(format!("adapter lacks {KEY_ALPHA}")))? as f32;
        let rank = m.usize_or(KEY_RANK, None)?;
        let mut targets = BTreeMap::new();
        for info in m.tensors() {
            let Some(target) = info.name.strip_suffix(A_SUFFIX) else {
                if !info.name.ends_with(B_SUFFIX) {
                    return Err(Error::Format(format!("unexpected adapter tensor {:?}", info.name)));
                }
                continue;
            };
            let b_name = format!("{target}{B_SUFFIX}");
            let pair = LoraPair {
                a: src.load(&info.name)?,
                b: src.load(&b_name)?,
            };
            targets.insert(target.to_string(), pair);
        }
        Ok(Self {
            name,
            alpha,
            rank,
            targets,
        })
    }
}

/// Folds `adapter` into a copy of `base`. Untargeted tensors and existing
/// metadata are left untouched; a provenance entry is appended.
pub fn merge_lora(base: &InMemoryModel, adapter: &LoraAdapter) -> Result<InMemoryModel> {
    let mut out = base.clone();
    for target in adapter.targets.keys() {
        let w = base
            .tensors
            .get(target)
            .ok_or_else(|| Error::Consistency(format!("adapter targets absent tensor {target:?}")))?;
        let dtype = w.dtype();
        if !matches!(dtype, DType::F32 | DType::F16) {
            return Err(Error::Consistency(format!(
                "cannot merge into {dtype} tensor {target:?}; merge before quantizing"
            )));
        }
        let delta = adapter.delta(target, w.shape())?;
        let merged: Vec<f32> = w
            .to_f32_vec()?
            .into_iter()
            .zip(delta)
            .map(|(w, d)| if d == 0.0 { w } else { w + d })
            .collect();
        let t = match dtype {
            DType::F16 => Tensor::from_f32_as_f16(w.shape().to_vec(), &merged)?,
            _ => Tensor::from_f32(w.shape().to_vec(), &merged)?,
        };
        out.tensors.insert(target.clone(), t);
    }
    let entry = format!(
        "{}:rank={}:alpha={}:targets={}",
        adapter.name,
        adapter.rank,
        adapter.alpha,
        adapter.targets.len()
    );
    let provenance = match base.manifest.get_str(crate::manifest::keys::LORA_PROVENANCE)? {
        Some(prev) => format!("{prev};{entry}"),
        None => entry,
    };
    out.manifest.set(crate::manifest::keys::LORA_PROVENANCE, provenance);
    Ok(out)
}

/// Applies `adapter` on the fly to a loaded model's projections.
pub fn attach_lora(model: &mut MultimodalModel, adapter: &LoraAdapter) -> Result<()> {
    let scale = adapter.scale();
    let mut linears: BTreeMap<String, _> = model.linears_mut().into_iter().collect();
    for (target, pair) in &adapter.targets {
        let lin = linears
            .get_mut(target)
            .ok_or_else(|| Error::Consistency(format!("adapter targets absent tensor {target:?}")))?;
        let shape = [lin.weight.rows(), lin.weight.cols()];
        adapter.check_pair(target, pair, &shape)?;
        lin.lora = Some(LoraDelta {
            a: WeightMatrix::from_tensor(pair.a.clone())?,
            b: WeightMatrix::from_tensor(pair.b.clone())?,
            scale,
        });
    }
    Ok(())
}

/// Attention and MLP projection weights of the decoder, the default
/// adapter targets.
pub fn default_targets(n_layers: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..n_layers {
        for proj in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"] {
            out.push(format!("llm.blocks.{i}.{proj}.weight"));
        }
    }
    out
}
