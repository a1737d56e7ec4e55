use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use super::{AttentionKind, AttentionRecord, Hooks};
use crate::layers::{self, Attention, FeedForward, LayerNorm};
use crate::params::ParamBuilder;
use crate::refnet;
use crate::Result;

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    base_dim: usize,
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
}

impl TimestepEmbedding {
    pub fn new(pb: &mut ParamBuilder<'_>, base_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            base_dim,
            fc1: layers::linear(&mut pb.pp("fc1"), base_dim, out_dim, true)?,
            fc2: layers::linear(&mut pb.pp("fc2"), out_dim, out_dim, true)?,
        })
    }

    /// timesteps: (F,) -> (F, out_dim)
    pub fn forward(&self, timesteps: &Tensor) -> Result<Tensor> {
        let ts: Vec<f64> = timesteps
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        let emb = layers::sinusoidal_embedding(&ts, self.base_dim, timesteps.dtype(), timesteps.device())?;
        Ok(self.fc2.forward(&self.fc1.forward(&emb)?.silu()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: layers::Conv2d,
    temb: candle_nn::Linear,
    norm2: GroupNorm,
    conv2: layers::Conv2d,
    skip: Option<layers::Conv2d>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: layers::group_norm(&mut pb.pp("norm1"), groups, in_ch)?,
            conv1: layers::conv2d(&mut pb.pp("conv1"), in_ch, out_ch, 3, 1, 1)?,
            temb: layers::linear(&mut pb.pp("temb"), temb_dim, out_ch, true)?,
            norm2: layers::group_norm(&mut pb.pp("norm2"), groups, out_ch)?,
            // Residual branches, attention outputs and conv-out start at zero.
            conv2: layers::conv2d_zeros(&mut pb.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(layers::conv2d(&mut pb.pp("skip"), in_ch, out_ch, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Norm, token projection, self-attention (optionally extended with reference
/// tokens), cross-attention over context tokens and a feed-forward layer.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: candle_nn::Linear,
    ln1: LayerNorm,
    pub(crate) self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
    proj_out: candle_nn::Linear,
}

impl SpatialTransformer {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: layers::group_norm(&mut pb.pp("norm"), groups, channels)?,
            proj_in: layers::linear(&mut pb.pp("proj_in"), channels, channels, true)?,
            ln1: LayerNorm::new(&mut pb.pp("ln1"), channels)?,
            self_attn: Attention::new(&mut pb.pp("self_attn"), channels, channels, heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), channels)?,
            cross_attn: Attention::new(&mut pb.pp("cross_attn"), channels, context_dim, heads)?,
            ln3: LayerNorm::new(&mut pb.pp("ln3"), channels)?,
            ff: FeedForward::new(&mut pb.pp("ff"), channels, 4)?,
            proj_out: layers::linear_zeros(&mut pb.pp("proj_out"), channels, channels)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        site_id: &str,
        hooks: &mut Hooks<'_>,
    ) -> Result<Tensor> {
        let (f, _, h, w) = x.dims4()?;
        let tokens = self.proj_in.forward(&layers::to_tokens(&self.norm.forward(x)?)?)?;

        let normed = self.ln1.forward(&tokens)?;
        if let Some(capture) = hooks.capture.as_mut() {
            if capture.sites.contains(site_id) {
                // Reference images are single frames: keep (H*W, C).
                capture.features.insert(site_id.to_string(), normed.get(0)?);
            }
        }
        let reference = hooks.bank.and_then(|bank| bank.get(site_id));
        let extra = match reference {
            Some(r) => r.dim(0)?,
            None => 0,
        };
        hooks.record(AttentionRecord {
            site: site_id.to_string(),
            kind: AttentionKind::SelfAttention,
            query_len: normed.dim(1)?,
            key_len: normed.dim(1)? + extra,
        });
        let attended = match reference {
            Some(r) => refnet::inject(&self.self_attn, &normed, r)?,
            None => self.self_attn.forward(&normed, &normed)?,
        };
        let tokens = (&tokens + attended)?;

        let ctx = context.unsqueeze(0)?.broadcast_as((f, context.dim(0)?, context.dim(1)?))?;
        hooks.record(AttentionRecord {
            site: site_id.to_string(),
            kind: AttentionKind::CrossAttention,
            query_len: tokens.dim(1)?,
            key_len: ctx.dim(1)?,
        });
        let tokens = (&tokens + self.cross_attn.forward(&self.ln2.forward(&tokens)?, &ctx)?)?;
        let tokens = (&tokens + self.ff.forward(&self.ln3.forward(&tokens)?)?)?;
        let out = layers::from_tokens(&self.proj_out.forward(&tokens)?, h, w)?;
        Ok((x + out)?)
    }
}
