//! The connector, prompt assembly and the assembled multimodal model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{Linear, Mlp};
use crate::llm::Llm;
use crate::manifest::{keys, TensorSource};
use crate::tokenizer::Tokenizer;
use crate::vision::{RgbImage, VisionEncoder, VisualTokens};
use crate::{Error, Result, Tensor};

pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const PROMPT_SLOT: &str = "{prompt}";

/// Two-layer GELU MLP mapping visual features into word-embedding space.
#[derive(Debug, Clone)]
pub struct Connector {
    mlp: Mlp,
    in_dim: usize,
}

impl Connector {
    pub fn load(src: &dyn TensorSource, d_visual: usize, hidden: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::load(src, "connector", d_visual, hidden, d_model)?,
            in_dim: d_visual,
        })
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Result<Self> {
        if fc1.out_dim() != fc2.weight.cols() {
            return Err(Error::Consistency(format!(
                "connector fc1 emits {} features but fc2 takes {}",
                fc1.out_dim(),
                fc2.weight.cols()
            )));
        }
        Ok(Self {
            in_dim: fc1.weight.cols(),
            mlp: Mlp { fc1, fc2 },
        })
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        vec![
            ("connector.fc1.weight".into(), &mut self.mlp.fc1),
            ("connector.fc2.weight".into(), &mut self.mlp.fc2),
        ]
    }

    /// `fc2(gelu(fc1(v)))` per visual token, `[N_v × d_model]`.
    pub fn project(&self, v: &VisualTokens) -> Result<Tensor> {
        if v.dim() != self.in_dim {
            return Err(Error::Consistency(format!(
                "connector expects {}-dim visual features, got {}",
                self.in_dim,
                v.dim()
            )));
        }
        let out = self.mlp.forward_rows(&v.features.to_f32_vec()?);
        Tensor::from_f32(vec![v.n_tokens, self.mlp.fc2.out_dim()], &out)
    }
}

/// An embedded prompt ready for prefill.
#[derive(Debug, Clone)]
pub struct PromptAssembly {
    /// `[n_prompt × d_model]` row-major.
    pub embeddings: Vec<f32>,
    pub n_text: usize,
    pub n_visual: usize,
    pub n_prompt: usize,
}

/// Tokenizes one chat turn.
///
/// The template is split at its image placeholder before `{prompt}` is
/// substituted, so user text can never introduce a placeholder. With an
/// image the template must hold exactly one placeholder, which becomes the
/// image token; without one the placeholder (and a following newline) is
/// dropped.
pub fn render_turn(
    tokenizer: &Tokenizer,
    template: &str,
    prompt: &str,
    with_image: bool,
    bos: bool,
) -> Result<Vec<u32>> {
    let parts: Vec<&str> = template.split(IMAGE_PLACEHOLDER).collect();
    let placeholders = parts.len() - 1;
    if with_image && placeholders != 1 {
        return Err(Error::Template(format!(
            "template must contain exactly one {IMAGE_PLACEHOLDER} when an image is supplied, found {placeholders}"
        )));
    }
    let mut ids = Vec::new();
    if bos {
        ids.push(tokenizer.special().bos);
    }
    for (i, part) in parts.iter().enumerate() {
        let mut part = *part;
        if i > 0 {
            if with_image {
                ids.push(tokenizer.special().image);
            } else if let Some(rest) = part.strip_prefix('\n') {
                part = rest;
            }
        }
        ids.extend(tokenizer.encode(&part.replace(PROMPT_SLOT, prompt)));
    }
    Ok(ids)
}

/// Looks up word embeddings and splices `visual` rows in place of the
/// image token.
pub fn assemble_prompt(llm: &Llm, ids: &[u32], visual: Option<&Tensor>, image_id: u32) -> Result<PromptAssembly> {
    let d = llm.config.d_model;
    let slots = ids.iter().filter(|&&id| id == image_id).count();
    let n_visual = match visual {
        Some(v) => {
            if slots != 1 {
                return Err(Error::Template(format!(
                    "prompt must contain exactly one image placeholder when an image is supplied, found {slots}"
                )));
            }
            if v.shape().len() != 2 || v.shape()[1] != d {
                return Err(Error::shape("visual embeddings vs d_model", v.shape(), &[d]));
            }
            v.shape()[0]
        }
        None => 0,
    };
    let n_text = ids.len() - slots;
    let mut embeddings = Vec::with_capacity((n_text + n_visual) * d);
    for &id in ids {
        if id == image_id {
            if let Some(v) = visual {
                embeddings.extend(v.to_f32_vec()?);
            }
        } else {
            embeddings.extend(llm.embed(id)?);
        }
    }
    Ok(PromptAssembly {
        embeddings,
        n_text,
        n_visual,
        n_prompt: n_text + n_visual,
    })
}

/// Tokenizer, vision encoder, connector and decoder of one model file.
#[derive(Debug, Clone)]
pub struct MultimodalModel {
    pub tokenizer: Tokenizer,
    pub vision: VisionEncoder,
    pub connector: Connector,
    pub llm: Llm,
}

impl MultimodalModel {
    pub fn load(src: &dyn TensorSource) -> Result<Self> {
        let m = src.manifest();
        m.validate_required()?;
        let tokenizer = Tokenizer::from_manifest(m)?;
        let vision = VisionEncoder::load(src)?;
        let llm = Llm::load(src)?;
        let hidden = m.usize_or(keys::CONNECTOR_HIDDEN_DIM, None)?;
        let connector = Connector::load(src, vision.config.d_model, hidden, llm.config.d_model)?;
        Ok(Self {
            tokenizer,
            vision,
            connector,
            llm,
        })
    }

    /// Visual embeddings for `image`, already in word-embedding space.
    pub fn embed_image(&self, image: &RgbImage) -> Result<Tensor> {
        let v = self.vision.encode_rgb(image)?;
        self.connector.project(&v)
    }

    /// Token ids of one turn using the model's chat template.
    pub fn render(&self, prompt: &str, with_image: bool, first_turn: bool) -> Result<Vec<u32>> {
        render_turn(
            &self.tokenizer,
            &self.llm.config.template,
            prompt,
            with_image,
            first_turn,
        )
    }

    pub fn assemble(&self, ids: &[u32], visual: Option<&Tensor>) -> Result<PromptAssembly> {
        assemble_prompt(&self.llm, ids, visual, self.tokenizer.special().image)
    }

    /// Every projection matrix, keyed by weight tensor name.
    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out = self.connector.linears_mut();
        out.extend(self.llm.linears_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::DEFAULT_TEMPLATE;

    #[test]
    fn text_only_turn_drops_placeholder() {
        let t = Tokenizer::bytes_only();
        let ids = render_turn(&t, DEFAULT_TEMPLATE, "hi", false, true).unwrap();
        assert_eq!(ids[0], t.special().bos);
        assert_eq!(t.decode(&ids).unwrap(), "USER: hi ASSISTANT:");
        assert!(!ids.contains(&t.special().image));
    }

    #[test]
    fn image_turn_has_one_image_token() {
        let t = Tokenizer::bytes_only();
        let ids = render_turn(&t, DEFAULT_TEMPLATE, "what is <image>?", true, false).unwrap();
        assert_eq!(ids.iter().filter(|&&i| i == t.special().image).count(), 1);
        assert_eq!(t.decode(&ids).unwrap(), "USER: \nwhat is <image>? ASSISTANT:");
    }

    #[test]
    fn placeholder_count_checked_with_image() {
        let t = Tokenizer::bytes_only();
        let two = "<image><image>{prompt}";
        assert!(matches!(render_turn(&t, two, "x", true, true), Err(Error::Template(_))));
        assert!(matches!(
            render_turn(&t, "{prompt}", "x", true, true),
            Err(Error::Template(_))
        ));
        assert!(render_turn(&t, two, "x", false, true).is_ok());
    }
}
