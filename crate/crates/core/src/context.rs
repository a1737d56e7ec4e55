//! Background image encoder producing the context tokens both UNets attend to.
//!
//! A small patch transformer: linear patch embedding, a learned global token,
//! learned positions, one transformer block and a final norm. The global
//! token and the patch tokens are concatenated and projected to the
//! cross-attention width. All weights belong to the frozen `image_encoder`
//! group.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::frame::{ImageFrame, Mask};
use crate::layers::{self, Attention, FeedForward, LayerNorm};
use crate::params::{Init, ParamBuilder};
use crate::{Error, Result};

pub const GROUP: &str = "image_encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub context_dim: usize,
}

impl ImageEncoderConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 64,
            heads: 4,
            context_dim: 64,
        }
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.context_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "image encoder width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// (1 + P, D) tokens; row 0 is the global token.
#[derive(Debug, Clone)]
pub struct ContextTokens {
    tokens: Tensor,
}

impl ContextTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n == 0 {
            return Err(Error::Shape("context needs at least the global token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn global(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(0, 0, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    config: ImageEncoderConfig,
    patch_embed: candle_nn::Linear,
    cls: Tensor,
    pos: Tensor,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln_out: LayerNorm,
    merge: candle_nn::Linear,
}

impl ImageEncoder {
    pub fn build(config: &ImageEncoderConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let p = config.patch;
        Ok(Self {
            config: config.clone(),
            patch_embed: layers::linear(&mut pb.pp("patch_embed"), 3 * p * p, d, true)?,
            cls: pb.get("cls", (1, d), Init::Normal(0.02))?,
            pos: pb.get("pos", (config.tokens(), d), Init::Normal(0.02))?,
            ln1: LayerNorm::new(&mut pb.pp("ln1"), d)?,
            attn: Attention::new(&mut pb.pp("attn"), d, d, config.heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), d)?,
            ff: FeedForward::new(&mut pb.pp("ff"), d, 4)?,
            ln_out: LayerNorm::new(&mut pb.pp("ln_out"), d)?,
            merge: layers::linear(&mut pb.pp("merge"), d, config.context_dim, true)?,
        })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.config
    }

    /// (3, H, W) image -> (P, 3 p^2) flattened patches in raster order.
    fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        let p = self.config.patch;
        let (gh, gw) = (h / p, w / p);
        Ok(image
            .reshape((c, gh, p, gw, p))?
            .permute((1, 3, 0, 2, 4))?
            .contiguous()?
            .reshape((gh * gw, c * p * p))?)
    }

    /// Runs the transformer on a (3, H, W) image, returning (cls, patches).
    pub fn encode_image(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, h, w) = image.dims3()?;
        let s = self.config.image_size;
        if (h, w) != (s, s) {
            return Err(Error::Shape(format!("image encoder expects {s}x{s}, got {h}x{w}")));
        }
        let patches = self.patch_embed.forward(&self.patchify(image)?)?;
        let x = Tensor::cat(&[&self.cls, &patches], 0)?.broadcast_add(&self.pos)?.unsqueeze(0)?;
        let n = self.ln1.forward(&x)?;
        let x = (&x + self.attn.forward(&n, &n)?)?;
        let x = (&x + self.ff.forward(&self.ln2.forward(&x)?)?)?;
        let x = self.ln_out.forward(&x)?.squeeze(0)?;
        let total = x.dim(0)?;
        Ok((x.narrow(0, 0, 1)?, x.narrow(0, 1, total - 1)?))
    }

    /// Concatenates the global token and patch tokens, then projects them.
    pub fn merge_tokens(&self, cls: &Tensor, patches: &Tensor) -> Result<ContextTokens> {
        merge_tokens(&self.merge, cls, patches)
    }

    /// Encodes the reference with its foreground pixels set to zero.
    pub fn encode_background(&self, reference: &ImageFrame, fg_mask: &Mask) -> Result<ContextTokens> {
        let bg = background_only(reference, fg_mask)?;
        let dtype = self.cls.dtype();
        let image = bg.to_tensor(dtype, self.cls.device())?;
        let (cls, patches) = self.encode_image(&image)?;
        self.merge_tokens(&cls, &patches)
    }
}

pub fn merge_tokens(proj: &candle_nn::Linear, cls: &Tensor, patches: &Tensor) -> Result<ContextTokens> {
    let (_, dc) = cls.dims2()?;
    let (p, dp) = patches.dims2()?;
    if dc != dp {
        return Err(Error::Shape(format!("global token dim {dc} vs patch dim {dp}")));
    }
    let seq = if p == 0 {
        cls.clone()
    } else {
        Tensor::cat(&[cls, patches], 0)?
    };
    ContextTokens::new(proj.forward(&seq)?)
}

/// Copy of `reference` with every foreground pixel zeroed.
pub fn background_only(reference: &ImageFrame, fg_mask: &Mask) -> Result<ImageFrame> {
    let (h, w) = (reference.height(), reference.width());
    if (fg_mask.height(), fg_mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            fg_mask.height(),
            fg_mask.width()
        )));
    }
    let mut out = reference.clone();
    for c in 0..3 {
        let plane = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                if fg_mask.get(y, x) {
                    plane[y * w + x] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Zero context of the given shape, for tests and ablations.
pub fn zero_context(tokens: usize, dim: usize, dtype: DType, device: &Device) -> Result<ContextTokens> {
    ContextTokens::new(Tensor::zeros((tokens, dim), dtype, device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn encoder() -> (ParamStore, ImageEncoder) {
        let mut store = ParamStore::new(9, DType::F32, Device::Cpu);
        let enc = ImageEncoder::build(&ImageEncoderConfig::toy(), &mut store.root(GROUP)).unwrap();
        (store, enc)
    }

    fn noise_frame(seed: u32) -> ImageFrame {
        let data = (0..3 * 64 * 64)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000) as f32 / 999.0)
            .collect();
        ImageFrame::new(64, 64, data).unwrap()
    }

    fn values(t: &ContextTokens) -> Vec<f32> {
        t.tensor().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn toy_token_count() {
        let (_, enc) = encoder();
        let t = enc.encode_background(&noise_frame(0), &Mask::empty(64, 64)).unwrap();
        assert_eq!((t.len(), t.dim()), (65, 64));
    }

    #[test]
    fn all_foreground_equals_zero_image_response() {
        let (_, enc) = encoder();
        let a = enc.encode_background(&noise_frame(1), &Mask::full(64, 64)).unwrap();
        let b = enc.encode_background(&ImageFrame::zeros(64, 64), &Mask::empty(64, 64)).unwrap();
        assert_eq!(values(&a), values(&b));
    }

    #[test]
    fn foreground_changes_do_not_reach_tokens() {
        let (_, enc) = encoder();
        let mask = Mask::from_fn(64, 64, |y, x| (10..40).contains(&y) && (20..50).contains(&x));
        let a = noise_frame(2);
        let mut b = a.clone();
        for y in 10..40 {
            for x in 20..50 {
                b.set_rgb(y, x, [1.0, 0.0, 0.5]);
            }
        }
        let ta = enc.encode_background(&a, &mask).unwrap();
        let tb = enc.encode_background(&b, &mask).unwrap();
        assert_eq!(values(&ta), values(&tb));
        b.set_rgb(0, 0, [0.123, 0.5, 0.5]);
        let tc = enc.encode_background(&b, &mask).unwrap();
        assert_ne!(values(&ta), values(&tc));
    }

    #[test]
    fn merge_with_identity_projection_passes_tokens_through() {
        let d = 6;
        let eye = Tensor::eye(d, DType::F32, &Device::Cpu).unwrap();
        let proj = candle_nn::Linear::new(eye, Some(Tensor::zeros(d, DType::F32, &Device::Cpu).unwrap()));
        let cls = Tensor::randn(0f32, 1.0, (1, d), &Device::Cpu).unwrap();
        let patches = Tensor::randn(0f32, 1.0, (4, d), &Device::Cpu).unwrap();
        let merged = merge_tokens(&proj, &cls, &patches).unwrap();
        assert_eq!(merged.len(), 5);
        let expected = Tensor::cat(&[&cls, &patches], 0).unwrap();
        let d = (merged.tensor() - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        let none = Tensor::zeros((0, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(merge_tokens(&proj, &cls, &none).unwrap().len(), 1);
    }

    #[test]
    fn mask_dims_must_match() {
        let (_, enc) = encoder();
        assert!(enc.encode_background(&noise_frame(0), &Mask::empty(32, 32)).is_err());
    }

    #[test]
    fn patchify_is_raster_order() {
        let (_, enc) = encoder();
        let img = Tensor::arange(0f32, (3 * 64 * 64) as f32, &Device::Cpu).unwrap().reshape((3, 64, 64)).unwrap();
        let p = enc.patchify(&img).unwrap();
        assert_eq!(p.dims(), &[64, 192]);
        let row = p.get(9).unwrap().to_vec1::<f32>().unwrap();
        // Patch 9 is grid (1, 1): top-left pixel (8, 8) of channel 0.
        assert_eq!(row[0], (8 * 64 + 8) as f32);
        assert_eq!(row[64], (64 * 64 + 8 * 64 + 8) as f32);
    }
}
