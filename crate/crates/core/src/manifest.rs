//! Model metadata and tensor index shared by the container format and the
//! model loaders.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{DType, Error, Result, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const TENSOR_ALIGN: u64 = 32;

pub mod keys {
    pub const LLM_D_MODEL: &str = "llm.d_model";
    pub const LLM_N_LAYERS: &str = "llm.n_layers";
    pub const LLM_N_HEADS: &str = "llm.n_heads";
    pub const LLM_VOCAB_SIZE: &str = "llm.vocab_size";
    pub const LLM_CONTEXT_LEN: &str = "llm.context_len";
    pub const LLM_D_FF: &str = "llm.d_ff";
    pub const LLM_ROPE_THETA: &str = "llm.rope_theta";
    pub const LLM_NORM_EPS: &str = "llm.norm_eps";
    pub const LLM_TIED_EMBEDDINGS: &str = "llm.tied_embeddings";
    pub const LLM_TEMPLATE: &str = "llm.template";
    pub const VIT_D_MODEL: &str = "vit.d_model";
    pub const VIT_N_LAYERS: &str = "vit.n_layers";
    pub const VIT_N_HEADS: &str = "vit.n_heads";
    pub const VIT_D_FF: &str = "vit.d_ff";
    pub const VIT_PATCH_SIZE: &str = "vit.patch_size";
    pub const VIT_IMAGE_RES: &str = "vit.image_res";
    pub const VIT_FEATURE_LAYER: &str = "vit.feature_layer";
    pub const VIT_NORM_EPS: &str = "vit.norm_eps";
    pub const VIT_PREPROCESS: &str = "vit.preprocess";
    pub const VIT_IMAGE_MEAN: [&str; 3] = ["vit.image_mean.r", "vit.image_mean.g", "vit.image_mean.b"];
    pub const VIT_IMAGE_STD: [&str; 3] = ["vit.image_std.r", "vit.image_std.g", "vit.image_std.b"];
    pub const CONNECTOR_HIDDEN_DIM: &str = "connector.hidden_dim";
    pub const TOKENIZER_VOCAB: &str = "tokenizer.vocab";
    pub const TOKENIZER_MERGES: &str = "tokenizer.merges";
    pub const TOKENIZER_BOS: &str = "tokenizer.bos_id";
    pub const TOKENIZER_EOS: &str = "tokenizer.eos_id";
    pub const TOKENIZER_IMAGE: &str = "tokenizer.image_id";
    pub const GENERAL_NAME: &str = "general.name";
    pub const GENERAL_PRECISION: &str = "general.precision";
    pub const LORA_PROVENANCE: &str = "lora.merged";

    pub const REQUIRED: [&str; 10] = [
        LLM_D_MODEL,
        LLM_N_LAYERS,
        LLM_N_HEADS,
        LLM_VOCAB_SIZE,
        LLM_CONTEXT_LEN,
        VIT_D_MODEL,
        VIT_N_LAYERS,
        VIT_PATCH_SIZE,
        VIT_IMAGE_RES,
        CONNECTOR_HIDDEN_DIM,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaValue {
    Str(String),
    Int(i64),
    Float(f64),
    IntList(Vec<i64>),
}

impl MetaValue {
    pub fn tag(&self) -> u8 {
        match self {
            MetaValue::Str(_) => 0,
            MetaValue::Int(_) => 1,
            MetaValue::Float(_) => 2,
            MetaValue::IntList(_) => 3,
        }
    }
}

impl From<&str> for MetaValue {
    fn from(s: &str) -> Self {
        MetaValue::Str(s.to_string())
    }
}
impl From<String> for MetaValue {
    fn from(s: String) -> Self {
        MetaValue::Str(s)
    }
}
impl From<i64> for MetaValue {
    fn from(v: i64) -> Self {
        MetaValue::Int(v)
    }
}
impl From<usize> for MetaValue {
    fn from(v: usize) -> Self {
        MetaValue::Int(v as i64)
    }
}
impl From<f64> for MetaValue {
    fn from(v: f64) -> Self {
        MetaValue::Float(v)
    }
}
impl From<Vec<i64>> for MetaValue {
    fn from(v: Vec<i64>) -> Self {
        MetaValue::IntList(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

impl TensorInfo {
    pub fn nbytes(&self) -> u64 {
        self.dtype.nbytes(&self.shape) as u64
    }
}

/// Container metadata: ordered typed key/value pairs plus the tensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    metadata: Vec<(String, MetaValue)>,
    tensors: Vec<TensorInfo>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(TENSOR_ALIGN) * TENSOR_ALIGN
}

impl Manifest {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Builds a manifest from parsed parts. Layout is not re-derived.
    pub fn from_parts(format_version: u32, metadata: Vec<(String, MetaValue)>, tensors: Vec<TensorInfo>) -> Self {
        Self {
            format_version,
            metadata,
            tensors,
        }
    }

    pub fn metadata(&self) -> &[(String, MetaValue)] {
        &self.metadata
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    /// Inserts or replaces a key, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Into<MetaValue>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&MetaValue> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_str(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some(MetaValue::Str(s)) => Ok(Some(s)),
            Some(_) => Err(Error::Format(format!("metadata key {key} is not a string"))),
        }
    }

    pub fn get_int(&self, key: &str) -> Result<Option<i64>> {
        match self.get(key) {
            None => Ok(None),
            Some(MetaValue::Int(v)) => Ok(Some(*v)),
            Some(_) => Err(Error::Format(format!("metadata key {key} is not an integer"))),
        }
    }

    pub fn get_float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(MetaValue::Float(v)) => Ok(Some(*v)),
            Some(MetaValue::Int(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(Error::Format(format!("metadata key {key} is not a number"))),
        }
    }

    /// A positive integer key, or `default` when absent.
    pub fn usize_or(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.get_int(key)? {
            Some(v) if v >= 1 => Ok(v as usize),
            Some(v) => Err(Error::Consistency(format!("metadata {key} must be >= 1, got {v}"))),
            None => default.ok_or_else(|| Error::Consistency(format!("missing metadata key {key}"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Appends a tensor entry at the next 32-byte aligned offset.
    pub fn push_tensor(&mut self, name: &str, shape: Vec<usize>, dtype: DType) -> Result<()> {
        crate::tensor::check_shape(&shape)?;
        if self.tensor(name).is_some() {
            return Err(Error::Consistency(format!("duplicate tensor name {name:?}")));
        }
        let offset = align_up(self.data_len());
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            shape,
            dtype,
            offset,
        });
        Ok(())
    }

    /// Builds a manifest whose index lists `tensors` in order.
    pub fn with_tensors<'a>(
        metadata: Vec<(String, MetaValue)>,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        let mut m = Self {
            format_version: FORMAT_VERSION,
            metadata,
            tensors: Vec::new(),
        };
        for (name, t) in tensors {
            m.push_tensor(name, t.shape().to_vec(), t.dtype())?;
        }
        Ok(m)
    }

    /// End of the last tensor payload, relative to the data section.
    pub fn data_len(&self) -> u64 {
        self.tensors.last().map_or(0, |t| t.offset + t.nbytes())
    }

    /// Checks name uniqueness, alignment and ordering of the index.
    pub fn validate_layout(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        let mut end = 0u64;
        for t in &self.tensors {
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(Error::Consistency(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.offset % TENSOR_ALIGN != 0 {
                return Err(Error::Format(format!(
                    "tensor {:?} offset {} is not {TENSOR_ALIGN}-byte aligned",
                    t.name, t.offset
                )));
            }
            if t.offset < end {
                return Err(Error::Format(format!(
                    "tensor {:?} at offset {} overlaps the previous tensor ending at {end}",
                    t.name, t.offset
                )));
            }
            end = t.offset + t.nbytes();
        }
        Ok(())
    }

    /// Checks that the architecture keys every model needs are present.
    pub fn validate_required(&self) -> Result<()> {
        for key in keys::REQUIRED {
            match self.get(key) {
                Some(MetaValue::Int(v)) if *v >= 1 => {}
                Some(_) => {
                    return Err(Error::Format(format!(
                        "required metadata key {key} must be a positive integer"
                    )))
                }
                None => return Err(Error::Format(format!("missing required metadata key {key}"))),
            }
        }
        Ok(())
    }
}

/// Named access to weight tensors, either in memory or backed by a file.
pub trait TensorSource {
    fn manifest(&self) -> &Manifest;
    fn load(&self, name: &str) -> Result<Tensor>;

    fn load_optional(&self, name: &str) -> Result<Option<Tensor>> {
        if self.manifest().tensor(name).is_some() {
            self.load(name).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// A manifest with its tensors held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryModel {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl InMemoryModel {
    /// Lays out `tensors` in the given order under `metadata`.
    pub fn new(metadata: Vec<(String, MetaValue)>, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let manifest = Manifest::with_tensors(metadata, tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(Self {
            manifest,
            tensors: tensors.into_iter().collect(),
        })
    }

    /// Tensors in index order.
    pub fn ordered(&self) -> impl Iterator<Item = (&TensorInfo, &Tensor)> {
        self.manifest
            .tensors()
            .iter()
            .map(move |info| (info, &self.tensors[&info.name]))
    }

    /// Rebuilds the index after tensors changed dtype or shape, keeping order.
    pub fn relayout(&mut self) -> Result<()> {
        let order: Vec<String> = self.manifest.tensors().iter().map(|t| t.name.clone()).collect();
        let mut m = Manifest::from_parts(self.manifest.format_version, self.manifest.metadata.clone(), Vec::new());
        for name in &order {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Consistency(format!("manifest references absent tensor {name:?}")))?;
            m.push_tensor(name, t.shape().to_vec(), t.dtype())?;
        }
        self.manifest = m;
        Ok(())
    }
}

impl TensorSource for InMemoryModel {
    fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn load(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("missing tensor {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn offsets_are_aligned_and_ascending() {
        let mut m = Manifest::new();
        m.push_tensor("a", vec![3], DType::F32).unwrap();
        m.push_tensor("b", vec![64], DType::Q4_0).unwrap();
        m.push_tensor("c", vec![1], DType::F16).unwrap();
        let offs: Vec<u64> = m.tensors().iter().map(|t| t.offset).collect();
        assert_eq!(offs, vec![0, 32, 96]);
        m.validate_layout().unwrap();
        assert!(m.push_tensor("a", vec![1], DType::F32).is_err());
    }

    #[test]
    fn set_replaces_in_place() {
        let mut m = Manifest::new();
        m.set("x", 1i64);
        m.set("y", "s");
        m.set("x", 2i64);
        assert_eq!(m.metadata()[0], ("x".to_string(), MetaValue::Int(2)));
        assert_eq!(m.metadata().len(), 2);
    }

    #[test]
    fn missing_required_key_is_reported() {
        let m = Manifest::new();
        let err = m.validate_required().unwrap_err();
        assert!(matches!(err, Error::Format(ref s) if s.contains("llm.d_model")));
    }
}
