//! Pixel <-> latent conversion.
//!
//! Two codecs are provided: a lossless space-to-depth rearrangement (the
//! default everywhere, so downstream invariants can be checked exactly) and a
//! small learned autoencoder. Latents handed to the diffusion model are
//! `(raw - shift) * scale` with both constants stored on the codec config;
//! nothing else rescales them.

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::frame::{ImageFrame, Mask};
use crate::layers::{self, conv2d};
use crate::params::{ParamBuilder, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecConfig {
    SpaceToDepth {
        factor: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    LearnedTiny {
        factor: usize,
        latent_channels: usize,
        hidden: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl CodecConfig {
    pub fn space_to_depth(factor: usize) -> Self {
        CodecConfig::SpaceToDepth {
            factor,
            scale: 1.0,
            shift: 0.0,
        }
    }

    pub fn learned_tiny() -> Self {
        CodecConfig::LearnedTiny {
            factor: 4,
            latent_channels: 4,
            hidden: 32,
            scale: 1.0,
            shift: 0.0,
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "space_to_depth" => Ok(Self::space_to_depth(4)),
            "learned_tiny" => Ok(Self::learned_tiny()),
            other => Err(Error::UnknownCodec(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            CodecConfig::SpaceToDepth { .. } => "space_to_depth",
            CodecConfig::LearnedTiny { .. } => "learned_tiny",
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            CodecConfig::SpaceToDepth { factor, .. } | CodecConfig::LearnedTiny { factor, .. } => *factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            CodecConfig::SpaceToDepth { factor, .. } => 3 * factor * factor,
            CodecConfig::LearnedTiny {
                latent_channels, ..
            } => *latent_channels,
        }
    }

    fn normalization(&self) -> (f64, f64) {
        match self {
            CodecConfig::SpaceToDepth { scale, shift, .. }
            | CodecConfig::LearnedTiny { scale, shift, .. } => (*scale, *shift),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if f == 0 {
            return Err(Error::InvalidConfig("codec factor must be positive".into()));
        }
        if let CodecConfig::LearnedTiny { factor, latent_channels, hidden, .. } = self {
            if *factor < 2 || !factor.is_power_of_two() || *latent_channels == 0 || *hidden == 0 {
                return Err(Error::InvalidConfig(
                    "learned_tiny needs a power-of-two factor and positive channel counts".into(),
                ));
            }
        }
        Ok(())
    }
}

/// (F, C_lat, H/f, W/f) latent activations.
#[derive(Debug, Clone)]
pub struct LatentVolume {
    data: Tensor,
    factor: usize,
}

impl LatentVolume {
    pub fn new(data: Tensor, factor: usize) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data, factor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }
}

/// The learned codec: log2(f) stride-2 convs down, as many nearest-upsample
/// convs up.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder {
    enc: Vec<layers::Conv2d>,
    dec: Vec<layers::Conv2d>,
}

impl TinyAutoencoder {
    fn new(pb: &mut ParamBuilder<'_>, factor: usize, latent_channels: usize, hidden: usize) -> Result<Self> {
        let stages = factor.trailing_zeros() as usize;
        let mut enc = Vec::with_capacity(stages + 1);
        let mut in_ch = 3;
        for i in 0..stages {
            enc.push(conv2d(&mut pb.pp(&format!("enc.{i}")), in_ch, hidden, 4, 2, 1)?);
            in_ch = hidden;
        }
        enc.push(conv2d(&mut pb.pp(&format!("enc.{stages}")), in_ch, latent_channels, 3, 1, 1)?);
        let mut dec = vec![conv2d(&mut pb.pp("dec.0"), latent_channels, hidden, 3, 1, 1)?];
        for i in 1..=stages {
            let out = if i == stages { 3 } else { hidden };
            dec.push(conv2d(&mut pb.pp(&format!("dec.{i}")), hidden, out, 3, 1, 1)?);
        }
        Ok(Self { enc, dec })
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.enc.len() - 1;
        for conv in &self.enc[..last] {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.enc[last].forward(&h)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.dec[0].forward(z)?;
        for conv in &self.dec[1..] {
            let (_, _, h, w) = x.dims4()?;
            x = x.silu()?.upsample_nearest2d(2 * h, 2 * w)?;
            x = conv.forward(&x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
enum Kind {
    SpaceToDepth,
    LearnedTiny(TinyAutoencoder),
}

#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    kind: Kind,
}

impl Codec {
    /// Lossless codec that needs no parameters.
    pub fn space_to_depth(factor: usize) -> Self {
        Self {
            config: CodecConfig::space_to_depth(factor),
            kind: Kind::SpaceToDepth,
        }
    }

    /// Builds a codec; learned codecs register their parameters under `codec.`.
    pub fn build(config: &CodecConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let kind = match config {
            CodecConfig::SpaceToDepth { .. } => Kind::SpaceToDepth,
            CodecConfig::LearnedTiny {
                factor,
                latent_channels,
                hidden,
                ..
            } => Kind::LearnedTiny(TinyAutoencoder::new(&mut store.root("codec"), *factor, *latent_channels, *hidden)?),
        };
        Ok(Self {
            config: config.clone(),
            kind,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn id(&self) -> &'static str {
        self.config.id()
    }

    pub fn factor(&self) -> usize {
        self.config.factor()
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels()
    }

    pub fn is_lossless(&self) -> bool {
        let (scale, shift) = self.config.normalization();
        matches!(self.kind, Kind::SpaceToDepth) && scale == 1.0 && shift == 0.0
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: f,
            });
        }
        Ok(())
    }

    pub fn encode(&self, frames: &[ImageFrame], dtype: DType, device: &Device) -> Result<LatentVolume> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("cannot encode an empty frame sequence".into()))?;
        self.check_dims(first.height(), first.width())?;
        self.encode_tensor(&ImageFrame::stack(frames, dtype, device)?)
    }

    /// Encodes an (F, 3, H, W) pixel tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentVolume> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: c,
            });
        }
        self.check_dims(h, w)?;
        let raw = match &self.kind {
            Kind::SpaceToDepth => space_to_depth(x, self.factor())?,
            Kind::LearnedTiny(ae) => ae.encode(x)?,
        };
        let (scale, shift) = self.config.normalization();
        let data = if scale == 1.0 && shift == 0.0 {
            raw
        } else {
            ((raw - shift)? * scale)?
        };
        LatentVolume::new(data, self.factor())
    }

    /// Decodes to an (F, 3, H, W) tensor without clamping.
    pub fn decode_tensor(&self, latent: &LatentVolume) -> Result<Tensor> {
        let c = latent.channels();
        if c != self.latent_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.latent_channels(),
                got: c,
            });
        }
        let (scale, shift) = self.config.normalization();
        let z = if scale == 1.0 && shift == 0.0 {
            latent.tensor().clone()
        } else {
            ((latent.tensor() / scale)? + shift)?
        };
        match &self.kind {
            Kind::SpaceToDepth => depth_to_space(&z, self.factor()),
            Kind::LearnedTiny(ae) => ae.decode(&z),
        }
    }

    pub fn decode(&self, latent: &LatentVolume) -> Result<Vec<ImageFrame>> {
        ImageFrame::unstack(&self.decode_tensor(latent)?)
    }

    /// Pre-trains the learned codec on frames with an MSE objective and
    /// returns the per-step loss. A no-op for the lossless codec.
    pub fn pretrain(
        &self,
        store: &ParamStore,
        frames: &[ImageFrame],
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let Kind::LearnedTiny(ae) = &self.kind else {
            return Ok(Vec::new());
        };
        let names = store.names_in_groups(&["codec"]);
        let vars: Vec<Var> = store.vars_named(&names);
        let mut opt = candle_nn::AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            order.shuffle(&mut rng);
            let chosen: Vec<ImageFrame> = order.iter().take(batch).map(|&i| frames[i].clone()).collect();
            let x = ImageFrame::stack(&chosen, store.dtype(), store.device())?;
            let recon = ae.decode(&ae.encode(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        }
        Ok(losses)
    }
}

/// (F, C, H, W) -> (F, C*f*f, H/f, W/f); channel index is `c*f*f + dy*f + dx`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape(&[n, c, h / f, f, w / f, f][..])?
        .permute([0, 1, 3, 5, 2, 4])?
        .contiguous()?
        .reshape((n, c * f * f, h / f, w / f))?)
}

pub fn depth_to_space(z: &Tensor, f: usize) -> Result<Tensor> {
    let (n, cf, h, w) = z.dims4()?;
    let c = cf / (f * f);
    Ok(z
        .reshape(&[n, c, f, f, h, w][..])?
        .permute([0, 1, 4, 2, 5, 3])?
        .contiguous()?
        .reshape((n, c, h * f, w * f))?)
}
