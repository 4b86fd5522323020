//! Pure inference core for lightweight multimodal (vision encoder +
//! connector + decoder LLM) models.
//!
//! Everything in this crate is `no_std` + `alloc`: dense kernels, blockwise
//! quantization, LoRA merging, the byte-level BPE tokenizer, the ViT
//! encoder, the decoder with its KV cache, sampling and the stage-timing
//! model. File formats, clocks and networking live in the `imp` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

mod error;

pub mod generate;
pub mod layers;
pub mod llm;
pub mod lora;
pub mod manifest;
pub mod multimodal;
pub mod ops;
pub mod profile;
pub mod quant;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
