//! The full animation model: codec, DrivenEncoder, denoising UNet,
//! ReferenceNet and background image encoder over one parameter store.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Hooks, UNet, UNetConfig};
use crate::codec::{Codec, CodecConfig, LatentVolume};
use crate::context::{ContextTokens, ImageEncoder, ImageEncoderConfig};
use crate::frame::{ImageFrame, Mask};
use crate::motion::{self, ChannelPlan, ConditioningBundle, DrivenEncoder};
use crate::params::ParamStore;
use crate::refnet::{ReferenceFeatureBank, ReferenceNet};
use crate::temporal;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame height and width in pixels.
    pub image_size: usize,
    pub codec: CodecConfig,
    pub unet: UNetConfig,
    pub image_encoder: ImageEncoderConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            // Pixels in [0, 1] become latents in [-1, 1].
            codec: CodecConfig::SpaceToDepth {
                factor: 4,
                scale: 2.0,
                shift: 0.5,
            },
            unet: UNetConfig::toy(),
            image_encoder: ImageEncoderConfig::toy(),
        }
    }

    /// Small variant used where many forward and backward passes are needed.
    pub fn tiny() -> Self {
        let mut unet = UNetConfig::tiny();
        unet.sample_size = 8;
        Self {
            image_size: 32,
            codec: CodecConfig::space_to_depth(4),
            unet,
            image_encoder: ImageEncoderConfig {
                image_size: 32,
                patch: 8,
                width: 32,
                heads: 2,
                context_dim: 32,
            },
        }
    }

    pub fn full() -> Self {
        Self {
            image_size: 512,
            codec: CodecConfig::LearnedTiny {
                factor: 8,
                latent_channels: 4,
                hidden: 64,
                scale: 1.0,
                shift: 0.0,
            },
            unet: UNetConfig::full(),
            image_encoder: ImageEncoderConfig {
                image_size: 224,
                patch: 14,
                width: 1024,
                heads: 16,
                context_dim: 768,
            },
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.codec.factor()
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        ChannelPlan::new(self.codec.latent_channels())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.unet.validate()?;
        self.image_encoder.validate()?;
        let plan = self.channel_plan();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size % 16 != 0 || self.image_size % self.codec.factor() != 0 {
            return bad(format!(
                "image size {} must be divisible by 16 and by the codec factor {}",
                self.image_size,
                self.codec.factor()
            ));
        }
        if self.unet.latent_channels != plan.latent {
            return bad(format!(
                "unet latent channels {} but codec produces {}",
                self.unet.latent_channels, plan.latent
            ));
        }
        if self.unet.extra_channels != plan.extra() {
            return bad(format!(
                "unet extra channels {} but the conditioning plan needs {}",
                self.unet.extra_channels,
                plan.extra()
            ));
        }
        if self.unet.sample_size != self.latent_size() {
            return bad(format!(
                "unet sample size {} but latents are {}",
                self.unet.sample_size,
                self.latent_size()
            ));
        }
        if self.image_encoder.context_dim != self.unet.context_dim {
            return bad(format!(
                "image encoder emits {}-dim tokens, unet expects {}",
                self.image_encoder.context_dim, self.unet.context_dim
            ));
        }
        Ok(())
    }
}

/// Everything derived from one reference image, computed once per animation.
#[derive(Debug, Clone)]
pub struct ReferenceState {
    pub ref_latent: LatentVolume,
    pub fg_mask: Tensor,
    pub context: ContextTokens,
    pub bank: ReferenceFeatureBank,
    /// (1, 3, H, W) pixels, input to the modulation branch.
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct PortraitModel {
    config: ModelConfig,
    pub store: ParamStore,
    pub codec: Codec,
    pub driven: DrivenEncoder,
    pub unet: UNet,
    pub refnet: ReferenceNet,
    pub image_encoder: ImageEncoder,
}

impl PortraitModel {
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let codec = Codec::build(&config.codec, &mut store)?;
        let driven = DrivenEncoder::build(&mut store.root(motion::GROUP))?;
        let mut unet = UNet::build(&config.unet, &mut store, "unet")?;
        unet.expand_conv_in(&mut store, config.unet.extra_channels)?;
        let refnet = ReferenceNet::build(&config.unet, &mut store)?;
        let image_encoder = ImageEncoder::build(&config.image_encoder, &mut store.root(crate::context::GROUP))?;
        Ok(Self {
            config: config.clone(),
            store,
            codec,
            driven,
            unet,
            refnet,
            image_encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn has_temporal(&self) -> bool {
        self.unet.has_temporal()
    }

    pub fn insert_temporal(&mut self) -> Result<()> {
        temporal::insert_temporal_layers(&mut self.unet, &mut self.store)
    }

    fn check_frame(&self, frame: &ImageFrame) -> Result<()> {
        let s = self.config.image_size;
        if (frame.height(), frame.width()) != (s, s) {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} frames, got {}x{}",
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }

    /// Encodes the reference once: latent, latent-grid mask, context tokens
    /// and the ReferenceNet feature bank (all reused across windows and steps).
    pub fn prepare_reference(&self, reference: &ImageFrame, fg_mask: &Mask) -> Result<ReferenceState> {
        self.check_frame(reference)?;
        let (dtype, device) = (self.dtype(), self.device().clone());
        let ref_latent = self.codec.encode(std::slice::from_ref(reference), dtype, &device)?;
        let ref_latent = LatentVolume::new(ref_latent.into_tensor().detach(), self.codec.factor())?;
        let fg_mask_latent = fg_mask.downsample(self.codec.factor())?.to_tensor(dtype, &device)?;
        let context = self.image_encoder.encode_background(reference, fg_mask)?;
        let context = ContextTokens::new(context.tensor().detach())?;
        let bank = self.refnet.extract_reference_features(&ref_latent, context.tensor())?;
        Ok(ReferenceState {
            ref_latent,
            fg_mask: fg_mask_latent,
            context,
            bank,
            image: reference.to_tensor(dtype, &device)?.unsqueeze(0)?,
        })
    }

    /// Builds the conditioning bundle for masked driving frames (F, 3, H, W).
    pub fn bundle(&self, reference: &ReferenceState, driving: &Tensor) -> Result<ConditioningBundle> {
        let n = self.config.latent_size();
        let motion = self.driven.motion_features(driving, &reference.image, n, n)?;
        Ok(ConditioningBundle {
            motion,
            ref_latent: reference.ref_latent.clone(),
            fg_mask: reference.fg_mask.clone(),
            context: reference.context.clone(),
        })
    }

    /// Noise prediction for noisy latents (F, C_lat, h, w) at per-frame timesteps.
    pub fn predict_noise(
        &self,
        noisy: &Tensor,
        timesteps: &Tensor,
        bundle: &ConditioningBundle,
        bank: &ReferenceFeatureBank,
    ) -> Result<Tensor> {
        self.predict_noise_traced(noisy, timesteps, bundle, bank, &mut Hooks::default())
    }

    pub fn predict_noise_traced(
        &self,
        noisy: &Tensor,
        timesteps: &Tensor,
        bundle: &ConditioningBundle,
        bank: &ReferenceFeatureBank,
        hooks: &mut Hooks<'_>,
    ) -> Result<Tensor> {
        let input = motion::assemble(noisy, bundle)?;
        let mut inner = Hooks {
            bank: Some(bank),
            capture: hooks.capture.take(),
            trace: hooks.trace.take(),
        };
        let out = self.unet.forward(&input, timesteps, bundle.context.tensor(), &mut inner);
        hooks.capture = inner.capture;
        hooks.trace = inner.trace;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::group_of;

    #[test]
    fn profiles_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        let mut bad = ModelConfig::toy();
        bad.unet.extra_channels = 10;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_profile_channel_plan() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.channel_plan().total(), 137);
        assert_eq!(cfg.unet.expanded_conv_in_channels(), 137);
    }

    #[test]
    fn build_registers_every_group() {
        let m = PortraitModel::build(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let groups: Vec<_> = m.store.groups_present().into_iter().collect();
        assert_eq!(groups, ["driven_encoder", "image_encoder", "refnet", "unet"]);
        assert_eq!(m.unet.conv_in_channels(), 48 + 177);
        assert_eq!(m.refnet.unet().conv_in_channels(), 48);
        assert!(m.store.names().all(|n| group_of(n) != "temporal"));
    }

    #[test]
    fn end_to_end_prediction_shape() {
        let m = PortraitModel::build(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let reference = ImageFrame::filled(32, 32, [0.2, 0.4, 0.6]);
        let mask = Mask::from_fn(32, 32, |y, x| (8..24).contains(&y) && (8..24).contains(&x));
        let state = m.prepare_reference(&reference, &mask).unwrap();
        let driving = Tensor::zeros((3, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let bundle = m.bundle(&state, &driving).unwrap();
        let noisy = Tensor::randn(0f32, 1.0, (3, 48, 8, 8), &Device::Cpu).unwrap();
        let t = Tensor::new(&[1f32, 5.0, 9.0], &Device::Cpu).unwrap();
        let eps = m.predict_noise(&noisy, &t, &bundle, &state.bank).unwrap();
        assert_eq!(eps.dims(), &[3, 48, 8, 8]);
    }
}
