//! DrivenEncoder and conditioning assembly.
//!
//! Masked driving frames go through four 4x4 stride-2 convolutions
//! (16, 32, 64, 128 channels), are bilinearly resampled to the latent grid
//! and mixed by a 1x1 conv. A second conv stack of the same shape encodes the
//! reference image; its pooled features pass through an MLP whose last layer
//! starts at zero and yields per-channel scale and shift for the motion
//! features.

use candle_core::{DType, Device, Module, Tensor};

use crate::codec::LatentVolume;
use crate::frame::ImageFrame;
use crate::context::ContextTokens;
use crate::layers;
use crate::params::ParamBuilder;
use crate::{Error, Result};

pub const GROUP: &str = "driven_encoder";
pub const CONV_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const MOTION_CHANNELS: usize = 128;

/// Motion features on the latent grid, (F, 128, h, w).
#[derive(Debug, Clone)]
pub struct MotionFeatures(pub Tensor);

impl MotionFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-channel modulation derived from one reference image.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone)]
struct ConvStack {
    convs: Vec<layers::Conv2d>,
}

impl ConvStack {
    fn new(pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &out) in CONV_CHANNELS.iter().enumerate() {
            convs.push(layers::conv2d(&mut pb.pp(&i.to_string()), in_ch, out, 4, 2, 1)?);
            in_ch = out;
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct DrivenEncoder {
    motion: ConvStack,
    align: layers::Conv2d,
    reference: ConvStack,
    mlp_hidden: candle_nn::Linear,
    mlp_out: candle_nn::Linear,
}

impl DrivenEncoder {
    pub fn build(pb: &mut ParamBuilder<'_>) -> Result<Self> {
        Ok(Self {
            motion: ConvStack::new(&mut pb.pp("motion"))?,
            align: layers::conv2d(&mut pb.pp("align"), MOTION_CHANNELS, MOTION_CHANNELS, 1, 1, 0)?,
            reference: ConvStack::new(&mut pb.pp("reference"))?,
            mlp_hidden: layers::linear(&mut pb.pp("mlp.0"), MOTION_CHANNELS, MOTION_CHANNELS, true)?,
            mlp_out: layers::linear_zeros(&mut pb.pp("mlp.1"), MOTION_CHANNELS, 2 * MOTION_CHANNELS)?,
        })
    }

    /// (F, 3, H, W) masked frames -> (F, 128, H/16, W/16). Frames are
    /// processed independently.
    pub fn encode_motion(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "driving frames must be (F, 3, H, W) with H, W divisible by 16, got {:?}",
                frames.dims()
            )));
        }
        if cfg!(debug_assertions) && looks_unmasked(frames)? {
            log::warn!("driving frames have no black border; were they face-masked?");
        }
        self.motion.forward(frames)
    }

    pub fn align_to_latent(&self, raw: &Tensor, height: usize, width: usize) -> Result<MotionFeatures> {
        let resampled = resample_bilinear(raw, height, width)?;
        Ok(MotionFeatures(self.align.forward(&resampled)?))
    }

    pub fn modulation_params(&self, reference: &Tensor) -> Result<ModulationParams> {
        let feats = self.reference.forward(reference)?;
        let pooled = feats.mean(3)?.mean(2)?;
        let out = self.mlp_out.forward(&self.mlp_hidden.forward(&pooled)?.silu()?)?;
        Ok(ModulationParams {
            scale: out.narrow(1, 0, MOTION_CHANNELS)?.squeeze(0)?,
            shift: out.narrow(1, MOTION_CHANNELS, MOTION_CHANNELS)?.squeeze(0)?,
        })
    }

    /// motion * (1 + scale) + shift with the reference image (1, 3, H, W).
    pub fn modulate(&self, motion: &MotionFeatures, reference: &Tensor) -> Result<MotionFeatures> {
        apply_modulation(motion, &self.modulation_params(reference)?)
    }

    /// Full motion pathway: encode, align, modulate.
    pub fn motion_features(
        &self,
        driving: &Tensor,
        reference: &Tensor,
        height: usize,
        width: usize,
    ) -> Result<MotionFeatures> {
        let raw = self.encode_motion(driving)?;
        let aligned = self.align_to_latent(&raw, height, width)?;
        self.modulate(&aligned, reference)
    }
}

pub fn apply_modulation(motion: &MotionFeatures, params: &ModulationParams) -> Result<MotionFeatures> {
    let c = motion.0.dim(1)?;
    let scale = (params.scale.reshape((1, c, 1, 1))? + 1.0)?;
    let shift = params.shift.reshape((1, c, 1, 1))?;
    Ok(MotionFeatures(motion.0.broadcast_mul(&scale)?.broadcast_add(&shift)?))
}

fn looks_unmasked(frames: &Tensor) -> Result<bool> {
    let (_, _, h, w) = frames.dims4()?;
    let top = frames.narrow(2, 0, 1)?;
    let bottom = frames.narrow(2, h - 1, 1)?;
    let left = frames.narrow(3, 0, 1)?;
    let right = frames.narrow(3, w - 1, 1)?;
    let mut min_abs = f64::INFINITY;
    for edge in [top, bottom, left.contiguous()?, right.contiguous()?] {
        let m = edge.abs()?.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        min_abs = min_abs.min(m);
    }
    Ok(min_abs > 0.0)
}

/// Half-pixel bilinear interpolation weights, (out, in). Rows sum to one.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += 1.0 - frac;
        m[o * input + hi] += frac;
    }
    m
}

fn weight_tensor(input: usize, output: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(input, output), (output, input), device)?.to_dtype(dtype)?)
}

/// Separable bilinear resample of (N, C, H, W) to (N, C, out_h, out_w),
/// written as two matrix products so it is differentiable.
pub fn resample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = weight_tensor(h, out_h, x.dtype(), x.device())?;
    let rx = weight_tensor(w, out_w, x.dtype(), x.device())?;
    let rows = x.reshape((n * c * h, w))?.matmul(&rx.t()?)?;
    let rows = rows.reshape((n * c, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let out = rows.reshape((n * c * out_w, h))?.matmul(&ry.t()?)?;
    Ok(out
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}

/// Everything one denoising call is conditioned on besides the noisy latent.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub motion: MotionFeatures,
    /// Clean reference latent, one frame.
    pub ref_latent: LatentVolume,
    /// (1, h, w) binary foreground mask on the latent grid.
    pub fg_mask: Tensor,
    pub context: ContextTokens,
}

impl ConditioningBundle {
    /// Frames `start..start+len` of the motion features; the rest is shared.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            motion: MotionFeatures(self.motion.0.narrow(0, start, len)?),
            ref_latent: self.ref_latent.clone(),
            fg_mask: self.fg_mask.clone(),
            context: self.context.clone(),
        })
    }
}

/// Channel layout of the stacked denoiser input:
/// `[noise C_lat | motion 128 | ref_latent C_lat | mask 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    pub latent: usize,
    pub motion: usize,
    pub mask: usize,
}

impl ChannelPlan {
    pub fn new(latent_channels: usize) -> Self {
        Self {
            latent: latent_channels,
            motion: MOTION_CHANNELS,
            mask: 1,
        }
    }

    pub fn total(&self) -> usize {
        self.latent + self.motion + self.latent + self.mask
    }

    /// Conditioning channels beyond the noise latent.
    pub fn extra(&self) -> usize {
        self.total() - self.latent
    }

    /// (offset, len) of noise, motion, reference latent and mask.
    pub fn ranges(&self) -> [(usize, usize); 4] {
        let m = self.latent;
        let r = m + self.motion;
        let k = r + self.latent;
        [(0, self.latent), (m, self.motion), (r, self.latent), (k, self.mask)]
    }

    /// Recovers (noise, motion, ref_latent, mask) from a stacked input.
    pub fn split(&self, stacked: &Tensor) -> Result<[Tensor; 4]> {
        let [a, b, c, d] = self.ranges();
        Ok([
            stacked.narrow(1, a.0, a.1)?,
            stacked.narrow(1, b.0, b.1)?,
            stacked.narrow(1, c.0, c.1)?,
            stacked.narrow(1, d.0, d.1)?,
        ])
    }
}

/// Concatenates noise latents (F, C_lat, h, w) with the bundle along channels;
/// the reference latent and mask are broadcast over frames.
pub fn assemble(noise: &Tensor, bundle: &ConditioningBundle) -> Result<Tensor> {
    let (f, _, h, w) = noise.dims4()?;
    let motion = bundle.motion.tensor();
    let (mf, _, mh, mw) = motion.dims4()?;
    let r = bundle.ref_latent.tensor();
    let (rf, rc, rh, rw) = r.dims4()?;
    let (_, kh, kw) = bundle.fg_mask.dims3()?;
    if mf != f {
        return Err(Error::Shape(format!("{mf} motion frames for {f} noise frames")));
    }
    if rf != 1 {
        return Err(Error::MultiFrameReference(rf));
    }
    for (name, dims) in [("motion", (mh, mw)), ("reference", (rh, rw)), ("mask", (kh, kw))] {
        if dims != (h, w) {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, noise latents are {h}x{w}",
                dims.0, dims.1
            )));
        }
    }
    let r = r.broadcast_as((f, rc, h, w))?;
    let mask = bundle.fg_mask.unsqueeze(0)?.broadcast_as((f, 1, h, w))?;
    Ok(Tensor::cat(&[noise, motion, &r, &mask], 1)?)
}

/// Pixel frames to an (F, 3, H, W) tensor.
pub fn frames_tensor(frames: &[ImageFrame], dtype: DType, device: &Device) -> Result<Tensor> {
    ImageFrame::stack(frames, dtype, device)
}
