//! Image preprocessing and the ViT encoder that turns an image into a
//! sequence of visual features (one per patch, no class token).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{add_in_place, merge_heads, split_heads, LayerNorm, Linear, Mlp};
use crate::manifest::{keys, Manifest, TensorSource};
use crate::ops::{self, DEFAULT_NORM_EPS};
use crate::{Error, Result, Tensor};

/// A decoded 8-bit RGB bitmap, rows top to bottom, `[h × w × 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Argument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    ResizeToSquare,
    ResizeThenPad,
}

impl PreprocessMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resize_to_square" => Some(Self::ResizeToSquare),
            "resize_then_pad" => Some(Self::ResizeThenPad),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ResizeToSquare => "resize_to_square",
            Self::ResizeThenPad => "resize_then_pad",
        }
    }
}

/// Padding widths in pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PadBox {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

#[derive(Debug, Clone)]
pub struct PreprocessedImage {
    /// Normalized `[3 × R × R]` pixels.
    pub pixels: Tensor,
    pub source_size: (usize, usize),
    pub pad_box: PadBox,
    pub mode: PreprocessMode,
}

impl PreprocessedImage {
    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Bilinear resize with half-pixel centers. Output is `[dh × dw × 3]` in
/// the 0..=255 range, unrounded.
fn resize_bilinear(img: &RgbImage, dw: usize, dh: usize) -> Vec<f32> {
    let (sw, sh) = (img.width, img.height);
    let sample = |dst: usize, src_len: usize, dst_len: usize| {
        let s = (dst as f32 + 0.5) * src_len as f32 / dst_len as f32 - 0.5;
        let s = s.clamp(0.0, (src_len - 1) as f32);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f32)
    };
    let xs: Vec<_> = (0..dw).map(|x| sample(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh * 3);
    for y in 0..dh {
        let (y0, y1, fy) = sample(y, sh, dh);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let px = |xx: usize, yy: usize| img.data[(yy * sw + xx) * 3 + c] as f32;
                let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
                let bot = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Resizes to `res × res` and normalizes each channel as `(x/255 − mean)/std`.
///
/// `ResizeThenPad` scales the longest side to `res`, centers the content
/// and fills the border with the channel mean, which normalizes to 0.
pub fn preprocess_image(
    img: &RgbImage,
    mode: PreprocessMode,
    res: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<PreprocessedImage> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Argument("cannot preprocess a zero-size image".into()));
    }
    if res == 0 {
        return Err(Error::Argument("target resolution must be >= 1".into()));
    }
    if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(Error::Argument(format!("std components must be > 0, got {std:?}")));
    }
    let (cw, ch) = match mode {
        PreprocessMode::ResizeToSquare => (res, res),
        PreprocessMode::ResizeThenPad => {
            let (w, h) = (img.width, img.height);
            let scaled = |short: usize, long: usize| {
                let v = libm::round(short as f64 * res as f64 / long as f64) as usize;
                v.clamp(1, res)
            };
            if w >= h {
                (res, scaled(h, w))
            } else {
                (scaled(w, h), res)
            }
        }
    };
    let left = (res - cw) / 2;
    let top = (res - ch) / 2;
    let pad_box = PadBox {
        left,
        top,
        right: res - cw - left,
        bottom: res - ch - top,
    };
    let content = resize_bilinear(img, cw, ch);
    let mut pixels = vec![0.0f32; 3 * res * res];
    for y in 0..ch {
        for x in 0..cw {
            for c in 0..3 {
                let v = content[(y * cw + x) * 3 + c] / 255.0;
                pixels[c * res * res + (y + top) * res + (x + left)] = (v - mean[c]) / std[c];
            }
        }
    }
    Ok(PreprocessedImage {
        pixels: Tensor::from_f32(vec![3, res, res], &pixels)?,
        source_size: (img.width, img.height),
        pad_box,
        mode,
    })
}

/// Visual features, one row per patch.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub features: Tensor,
    pub n_tokens: usize,
}

impl VisualTokens {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch_size: usize,
    pub image_res: usize,
    /// Number of blocks whose output is returned (1-based, ≤ n_layers).
    pub feature_layer: usize,
    pub norm_eps: f32,
    pub preprocess: PreprocessMode,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl VisionConfig {
    /// Patches per side. A remainder of `image_res % patch_size` pixels at
    /// the right and bottom edges is not covered by any patch.
    pub fn grid(&self) -> usize {
        self.image_res / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let d_model = m.usize_or(keys::VIT_D_MODEL, None)?;
        let n_layers = m.usize_or(keys::VIT_N_LAYERS, None)?;
        let default_heads = if d_model % 64 == 0 { d_model / 64 } else { 1 };
        let channel = |names: [&str; 3], default: f32| -> Result<[f32; 3]> {
            let mut out = [default; 3];
            for (o, k) in out.iter_mut().zip(names) {
                if let Some(v) = m.get_float(k)? {
                    *o = v as f32;
                }
            }
            Ok(out)
        };
        let mean = channel(keys::VIT_IMAGE_MEAN, 0.5)?;
        let std = channel(keys::VIT_IMAGE_STD, 0.5)?;
        let preprocess = match m.get_str(keys::VIT_PREPROCESS)? {
            None => PreprocessMode::ResizeThenPad,
            Some(s) => {
                PreprocessMode::parse(s).ok_or_else(|| Error::Config(format!("unknown preprocess mode {s:?}")))?
            }
        };
        let cfg = Self {
            d_model,
            n_layers,
            n_heads: m.usize_or(keys::VIT_N_HEADS, Some(default_heads))?,
            d_ff: m.usize_or(keys::VIT_D_FF, Some(4 * d_model))?,
            patch_size: m.usize_or(keys::VIT_PATCH_SIZE, None)?,
            image_res: m.usize_or(keys::VIT_IMAGE_RES, None)?,
            feature_layer: m.usize_or(keys::VIT_FEATURE_LAYER, Some(n_layers))?,
            norm_eps: m.get_float(keys::VIT_NORM_EPS)?.map_or(DEFAULT_NORM_EPS, |v| v as f32),
            preprocess,
            mean,
            std,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_res < self.patch_size {
            return Err(Error::Config(format!(
                "image_res {} holds no whole patch of size {}",
                self.image_res, self.patch_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "vit.d_model {} is not divisible by vit.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.feature_layer == 0 || self.feature_layer > self.n_layers {
            return Err(Error::Config(format!(
                "vit.feature_layer {} outside 1..={}",
                self.feature_layer, self.n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Pre-norm, bidirectional ViT with learned absolute positions.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    patch_embed: Linear,
    pos_embed: Vec<f32>,
    blocks: Vec<EncoderBlock>,
}

impl VisionEncoder {
    pub fn load(src: &dyn TensorSource) -> Result<Self> {
        let config = VisionConfig::from_manifest(src.manifest())?;
        let d = config.d_model;
        let patch_embed = Linear::load(src, "vit.patch_embed", d, config.patch_dim())?;
        let pos = src.load("vit.pos_embed")?;
        if pos.shape() != [config.n_tokens(), d] {
            return Err(Error::Consistency(format!(
                "vit.pos_embed has shape {:?}, expected [{}, {d}]",
                pos.shape(),
                config.n_tokens()
            )));
        }
        let pos_embed = pos.to_f32_vec()?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        // blocks past the feature layer never run
        for i in 0..config.feature_layer {
            let p = format!("vit.blocks.{i}");
            let eps = config.norm_eps;
            blocks.push(EncoderBlock {
                ln1: LayerNorm::load(src, &format!("{p}.ln1"), d, eps)?,
                q: Linear::load(src, &format!("{p}.attn.q"), d, d)?,
                k: Linear::load(src, &format!("{p}.attn.k"), d, d)?,
                v: Linear::load(src, &format!("{p}.attn.v"), d, d)?,
                o: Linear::load(src, &format!("{p}.attn.o"), d, d)?,
                ln2: LayerNorm::load(src, &format!("{p}.ln2"), d, eps)?,
                mlp: Mlp::load(src, &format!("{p}.mlp"), d, config.d_ff, d)?,
            });
        }
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            blocks,
        })
    }

    /// Flattens `[3×R×R]` pixels into `[N_v × 3·p²]` patch rows, each in
    /// `(channel, dy, dx)` order.
    pub fn patchify(&self, pixels: &Tensor) -> Result<Vec<f32>> {
        let res = self.config.image_res;
        if pixels.shape() != [3, res, res] {
            return Err(Error::Consistency(format!(
                "encoder expects [3, {res}, {res}] pixels, got {:?}",
                pixels.shape()
            )));
        }
        let px = pixels.to_f32_vec()?;
        let p = self.config.patch_size;
        let g = self.config.grid();
        let mut out = Vec::with_capacity(g * g * self.config.patch_dim());
        for py in 0..g {
            for pxi in 0..g {
                for c in 0..3 {
                    for dy in 0..p {
                        let row = c * res * res + (py * p + dy) * res + pxi * p;
                        out.extend_from_slice(&px[row..row + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embeddings before positions are added.
    pub fn embed_patches(&self, pixels: &Tensor) -> Result<Vec<f32>> {
        Ok(self.patch_embed.forward_rows(&self.patchify(pixels)?))
    }

    pub fn encode(&self, img: &PreprocessedImage) -> Result<VisualTokens> {
        let n = self.config.n_tokens();
        let d = self.config.d_model;
        let mut x = self.embed_patches(&img.pixels)?;
        add_in_place(&mut x, &self.pos_embed);
        let heads = self.config.n_heads;
        let hd = d / heads;
        for b in &self.blocks {
            let h = b.ln1.forward_rows(&x);
            let (q, k, v) = (b.q.forward_rows(&h), b.k.forward_rows(&h), b.v.forward_rows(&h));
            let (qh, kh, vh) = (
                split_heads(&q, n, heads, hd),
                split_heads(&k, n, heads, hd),
                split_heads(&v, n, heads, hd),
            );
            let attn: Vec<Vec<f32>> = (0..heads)
                .map(|i| ops::attention_head(&qh[i], &kh[i], &vh[i], n, n, hd, hd, false))
                .collect();
            add_in_place(&mut x, &b.o.forward_rows(&merge_heads(&attn, n, hd)));
            let h = b.ln2.forward_rows(&x);
            add_in_place(&mut x, &b.mlp.forward_rows(&h));
        }
        Ok(VisualTokens {
            features: Tensor::from_f32(vec![n, d], &x)?,
            n_tokens: n,
        })
    }

    /// Preprocesses with the manifest's mode and constants, then encodes.
    pub fn encode_rgb(&self, img: &RgbImage) -> Result<VisualTokens> {
        let c = &self.config;
        let pre = preprocess_image(img, c.preprocess, c.image_res, c.mean, c.std)?;
        self.encode(&pre)
    }
}
