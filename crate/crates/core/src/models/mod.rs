//! Tiny transformer encoders and decoders built on the tape in [`crate::tensor`].
//!
//! Parameters live in a flat, name-keyed [`Params`] store. A forward pass binds the store
//! into a graph (as leaves for trained weights, as constants for the EMA teacher) and
//! looks tensors up by name.

mod layers;
mod mae;
mod params;
mod text;
mod textdec;
mod vision;

pub use mae::{mae_reconstruct, patch_mask, patchify_targets, MaeOutput};
pub use params::{Bound, Params};
pub use text::encode_text;
pub use textdec::{decoder_targets, text_decode, TextDecodeOutput};
pub use vision::{attention_maps, encode_image, encode_patches, encode_views, export_attention, patchify, AttentionMaps, VisionOutput};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Learned query attending to the patch tokens (multihead attention pooling).
    AttentionMap,
    ClassToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub pool: Pool,
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 64,
            depth: 2,
            heads: 2,
            embed_dim: 64,
            pool: Pool::AttentionMap,
            mlp_ratio: 4,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "vision config";
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(op, "image_size must be a positive multiple of patch_size"));
        }
        check_heads(op, self.width, self.heads)?;
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid(op, "depth, embed_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub context: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Position whose final hidden state is pooled.
    pub pool_index: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            context: 16,
            vocab_size: crate::scenes::Vocab::shared().len(),
            width: 64,
            depth: 2,
            heads: 2,
            embed_dim: 64,
            pool_index: 15,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "text config";
        if self.context == 0 || self.pool_index >= self.context {
            return Err(invalid(op, "need context >= 1 and pool_index < context"));
        }
        check_heads(op, self.width, self.heads)?;
        if self.vocab_size == 0 || self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid(op, "sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Normalize each target patch to zero mean and unit variance.
    pub norm_pix: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.75, width: 32, depth: 1, heads: 2, norm_pix: true }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(invalid("mae config", "mask_ratio must lie in [0, 1)"));
        }
        check_heads("mae config", self.width, self.heads)?;
        if self.depth == 0 {
            return Err(invalid("mae config", "depth must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextDecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for TextDecoderConfig {
    fn default() -> Self {
        Self { width: 64, depth: 1, heads: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub mae: MaeConfig,
    pub text_decoder: TextDecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        self.mae.validate()?;
        check_heads("text decoder config", self.text_decoder.width, self.text_decoder.heads)?;
        if self.text_decoder.depth == 0 {
            return Err(invalid("text decoder config", "depth must be positive"));
        }
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(invalid("model config", "image and text embed_dim must agree"));
        }
        Ok(())
    }

    /// Every parameter of the student: encoders, decoders and loss scalars.
    pub fn init<T: Real>(&self, seed: u64) -> Result<Params<T>> {
        self.validate()?;
        let mut p = Params::new();
        let mut init = params::Init::new(seed);
        vision::init(&mut p, &mut init, &self.vision);
        text::init(&mut p, &mut init, &self.text);
        mae::init(&mut p, &mut init, &self.vision, &self.mae);
        textdec::init(&mut p, &mut init, &self.text, &self.text_decoder);
        let s = crate::losses::LossScalars::default();
        p.insert("loss.log_t", Tensor::scalar(T::of(s.log_t)));
        p.insert("loss.b", Tensor::scalar(T::of(s.b)));
        Ok(p)
    }
}

fn check_heads(op: &'static str, width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(invalid(op, format!("width {width} is not divisible by {heads} heads")));
    }
    Ok(())
}
