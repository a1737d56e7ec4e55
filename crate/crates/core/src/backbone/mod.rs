//! The denoising UNet.
//!
//! Each resolution level holds one Res-Trans pair (a residual conv block
//! followed by a spatial transformer). Down levels are followed by a stride-2
//! conv, up levels consume the matching skip and end with a nearest upsample.
//! The mid block is a Res-Trans pair plus one more residual block. Every
//! Res-Trans pair is an [`AttentionSite`].

mod blocks;

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;
use serde::{Deserialize, Serialize};

pub use blocks::{ResBlock, SpatialTransformer, TimestepEmbedding};

use crate::layers;
use crate::params::{Init, ParamStore};
use crate::refnet::ReferenceFeatureBank;
use crate::temporal::TemporalLayer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// One entry per resolution level.
    pub channel_multipliers: Vec<usize>,
    pub heads: usize,
    pub context_dim: usize,
    pub latent_channels: usize,
    /// Conditioning channels appended to conv-in by [`UNet::expand_conv_in`].
    pub extra_channels: usize,
    pub norm_groups: usize,
    /// Latent height and width the model is built for.
    pub sample_size: usize,
}

impl UNetConfig {
    /// Desk-scale profile: 64x64 frames through a factor-4 codec.
    pub fn toy() -> Self {
        Self {
            // Narrower than the 48 latent channels starves the identity path.
            base_channels: 64,
            channel_multipliers: vec![1, 2, 2],
            heads: 4,
            context_dim: 64,
            latent_channels: 48,
            extra_channels: 128 + 48 + 1,
            norm_groups: 8,
            sample_size: 16,
        }
    }

    /// Smallest useful profile, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 1],
            heads: 2,
            context_dim: 32,
            latent_channels: 48,
            extra_channels: 128 + 48 + 1,
            norm_groups: 4,
            sample_size: 8,
        }
    }

    /// SD1.5-shaped profile for 512x512 frames through a factor-8 VAE.
    pub fn full() -> Self {
        Self {
            base_channels: 320,
            channel_multipliers: vec![1, 2, 4, 4],
            heads: 8,
            context_dim: 768,
            latent_channels: 4,
            extra_channels: 128 + 4 + 1,
            norm_groups: 32,
            sample_size: 64,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Input channels of conv-in before any expansion.
    pub fn base_conv_in_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn expanded_conv_in_channels(&self) -> usize {
        self.latent_channels + self.extra_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels() < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels()));
        }
        if self.base_channels == 0
            || self.channel_multipliers.contains(&0)
            || self.heads == 0
            || self.context_dim == 0
            || self.latent_channels == 0
            || self.norm_groups == 0
        {
            return bad("all channel counts must be positive".into());
        }
        for level in 0..self.levels() {
            let ch = self.level_channels(level);
            if ch % self.norm_groups != 0 {
                return bad(format!("{ch} channels not divisible by {} groups", self.norm_groups));
            }
            if ch % self.heads != 0 {
                return bad(format!("{ch} channels not divisible by {} heads", self.heads));
            }
        }
        if self.base_channels % self.norm_groups != 0 {
            return bad("base channels not divisible by norm groups".into());
        }
        let down = 1 << (self.levels() - 1);
        if self.sample_size == 0 || self.sample_size % down != 0 {
            return bad(format!("sample size {} not divisible by {down}", self.sample_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSite {
    pub site_id: String,
    pub block_kind: BlockKind,
    pub level: usize,
    /// Latent height/width at this site for the configured sample size.
    pub resolution: usize,
    pub channels: usize,
}

pub fn site_id(kind: BlockKind, level: usize) -> String {
    match kind {
        BlockKind::Down => format!("down.{level}"),
        BlockKind::Mid => "mid".to_string(),
        BlockKind::Up => format!("up.{level}"),
    }
}

/// Sites in forward order: down levels, mid, up levels (deepest first).
pub fn enumerate_sites(config: &UNetConfig) -> Vec<AttentionSite> {
    let levels = config.levels();
    let site = |kind, level: usize| AttentionSite {
        site_id: site_id(kind, level),
        block_kind: kind,
        level,
        resolution: config.sample_size >> level,
        channels: config.level_channels(level),
    };
    let mut sites: Vec<_> = (0..levels).map(|l| site(BlockKind::Down, l)).collect();
    sites.push(site(BlockKind::Mid, levels - 1));
    sites.extend((0..levels).rev().map(|l| site(BlockKind::Up, l)));
    sites
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
    Temporal,
}

/// One attention call observed during a traced forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub site: String,
    pub kind: AttentionKind,
    pub query_len: usize,
    pub key_len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub sites: BTreeSet<String>,
    pub features: BTreeMap<String, Tensor>,
}

/// Optional side channels of a forward pass.
#[derive(Debug, Default)]
pub struct Hooks<'a> {
    pub bank: Option<&'a ReferenceFeatureBank>,
    pub capture: Option<Capture>,
    pub trace: Option<Vec<AttentionRecord>>,
}

impl Hooks<'_> {
    pub fn record(&mut self, record: AttentionRecord) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(record);
        }
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: SpatialTransformer,
    downsample: Option<layers::Conv2d>,
}

#[derive(Debug, Clone)]
struct MidBlock {
    res1: ResBlock,
    attn: SpatialTransformer,
    res2: ResBlock,
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: ResBlock,
    attn: SpatialTransformer,
    upsample: Option<layers::Conv2d>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    prefix: String,
    conv_in_weight: Tensor,
    conv_in_bias: Tensor,
    expanded: bool,
    time_embed: TimestepEmbedding,
    down: Vec<DownLevel>,
    mid: MidBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: layers::Conv2d,
    sites: Vec<AttentionSite>,
    temporal: BTreeMap<String, TemporalLayer>,
}

impl UNet {
    /// Builds a UNet whose parameters live under `prefix` in `store`.
    pub fn build(config: &UNetConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut root = store.root(prefix);
        let base = config.base_channels;
        let temb_dim = 4 * base;
        let groups = config.norm_groups;
        let levels = config.levels();

        let bound = 1.0 / ((config.latent_channels * 9) as f64).sqrt();
        let conv_in_weight = root.get(
            "conv_in.weight",
            (base, config.latent_channels, 3, 3),
            Init::Uniform(bound),
        )?;
        let conv_in_bias = root.get("conv_in.bias", base, Init::Zeros)?;
        let time_embed = TimestepEmbedding::new(&mut root.pp("time_embed"), base, temb_dim)?;

        let mut down = Vec::with_capacity(levels);
        let mut ch = base;
        for level in 0..levels {
            let out = config.level_channels(level);
            let mut pb = root.pp(&format!("down.{level}"));
            down.push(DownLevel {
                res: ResBlock::new(&mut pb.pp("res"), ch, out, temb_dim, groups)?,
                attn: SpatialTransformer::new(&mut pb.pp("attn"), out, config.context_dim, config.heads, groups)?,
                downsample: if level + 1 < levels {
                    Some(layers::conv2d(&mut pb.pp("downsample"), out, out, 3, 2, 1)?)
                } else {
                    None
                },
            });
            ch = out;
        }

        let mut pb = root.pp("mid");
        let mid = MidBlock {
            res1: ResBlock::new(&mut pb.pp("res1"), ch, ch, temb_dim, groups)?,
            attn: SpatialTransformer::new(&mut pb.pp("attn"), ch, config.context_dim, config.heads, groups)?,
            res2: ResBlock::new(&mut pb.pp("res2"), ch, ch, temb_dim, groups)?,
        };

        let mut up = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let out = config.level_channels(level);
            let mut pb = root.pp(&format!("up.{level}"));
            up.push(UpLevel {
                res: ResBlock::new(&mut pb.pp("res"), ch + out, out, temb_dim, groups)?,
                attn: SpatialTransformer::new(&mut pb.pp("attn"), out, config.context_dim, config.heads, groups)?,
                upsample: if level > 0 {
                    Some(layers::conv2d(&mut pb.pp("upsample"), out, out, 3, 1, 1)?)
                } else {
                    None
                },
            });
            ch = out;
        }

        let norm_out = layers::group_norm(&mut root.pp("norm_out"), groups, base)?;
        let conv_out = layers::conv2d_zeros(&mut root.pp("conv_out"), base, config.latent_channels, 3, 1)?;

        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            conv_in_weight,
            conv_in_bias,
            expanded: false,
            time_embed,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            sites: enumerate_sites(config),
            temporal: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    pub fn site(&self, id: &str) -> Option<&AttentionSite> {
        self.sites.iter().find(|s| s.site_id == id)
    }

    /// Mid and up sites: the ones that accept reference features.
    pub fn injection_sites(&self) -> BTreeSet<String> {
        self.sites
            .iter()
            .filter(|s| s.block_kind != BlockKind::Down)
            .map(|s| s.site_id.clone())
            .collect()
    }

    pub fn conv_in_channels(&self) -> usize {
        self.conv_in_weight.dims()[1]
    }

    pub fn conv_in_weight(&self) -> &Tensor {
        &self.conv_in_weight
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    /// Widens conv-in by `extra` input channels. Existing weights are kept
    /// bitwise, the new input channels start at exactly zero.
    pub fn expand_conv_in(&mut self, store: &mut ParamStore, extra: usize) -> Result<()> {
        if self.expanded {
            return Err(Error::AlreadyExpanded);
        }
        let (out, _, kh, kw) = self.conv_in_weight.dims4()?;
        let zeros = Tensor::zeros((out, extra, kh, kw), self.conv_in_weight.dtype(), self.conv_in_weight.device())?;
        let widened = Tensor::cat(&[&self.conv_in_weight, &zeros], 1)?;
        self.conv_in_weight = store.replace(&format!("{}.conv_in.weight", self.prefix), &widened)?;
        self.expanded = true;
        Ok(())
    }

    pub fn has_temporal(&self) -> bool {
        !self.temporal.is_empty()
    }

    pub fn temporal_layers(&self) -> &BTreeMap<String, TemporalLayer> {
        &self.temporal
    }

    pub(crate) fn set_temporal(&mut self, layers: BTreeMap<String, TemporalLayer>) {
        self.temporal = layers;
    }

    /// Predicts noise for `x` (F, C_in, h, w) at `timesteps` (F,) given
    /// context tokens (T, D).
    pub fn forward(&self, x: &Tensor, timesteps: &Tensor, context: &Tensor, hooks: &mut Hooks<'_>) -> Result<Tensor> {
        self.run(x, timesteps, context, hooks, true)
    }

    /// Runs up to the last up site without the output head.
    pub fn forward_features(
        &self,
        x: &Tensor,
        timesteps: &Tensor,
        context: &Tensor,
        hooks: &mut Hooks<'_>,
    ) -> Result<Tensor> {
        self.run(x, timesteps, context, hooks, false)
    }

    fn check_inputs(&self, x: &Tensor, timesteps: &Tensor, context: &Tensor, hooks: &Hooks<'_>) -> Result<()> {
        let (f, c, h, w) = x.dims4()?;
        if c != self.conv_in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.conv_in_channels(),
                got: c,
            });
        }
        let down = 1 << (self.config.levels() - 1);
        if h % down != 0 || w % down != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} not divisible by {down}")));
        }
        if timesteps.dims() != [f] {
            return Err(Error::Shape(format!(
                "timesteps {:?} for {f} frames",
                timesteps.dims()
            )));
        }
        let (_, d) = context.dims2()?;
        if d != self.config.context_dim {
            return Err(Error::Shape(format!(
                "context dim {d}, model expects {}",
                self.config.context_dim
            )));
        }
        if let Some(bank) = hooks.bank {
            let allowed = self.injection_sites();
            for site in bank.site_ids() {
                if !allowed.contains(site) {
                    return Err(Error::UnknownSite(site.to_string()));
                }
            }
        }
        Ok(())
    }

    fn temporal_at(&self, site: &str, h: Tensor, hooks: &mut Hooks<'_>) -> Result<Tensor> {
        match self.temporal.get(site) {
            Some(layer) => layer.forward_traced(&h, site, hooks),
            None => Ok(h),
        }
    }

    /// The latent channels and the conditioning channels are convolved
    /// separately and summed, so an expanded layer with zero conditioning
    /// reproduces the base layer bit for bit.
    fn conv_in(&self, x: &Tensor) -> Result<Tensor> {
        let base = self.config.latent_channels;
        let bias = self.conv_in_bias.reshape((1, (), 1, 1))?;
        let h = layers::conv2d_unfold(&x.narrow(1, 0, base)?, &self.conv_in_weight.narrow(1, 0, base)?, 1, 1)?;
        let extra = self.conv_in_channels() - base;
        let h = if extra > 0 {
            let cond = layers::conv2d_unfold(&x.narrow(1, base, extra)?, &self.conv_in_weight.narrow(1, base, extra)?, 1, 1)?;
            (h + cond)?
        } else {
            h
        };
        Ok(h.broadcast_add(&bias)?)
    }

    fn run(&self, x: &Tensor, timesteps: &Tensor, context: &Tensor, hooks: &mut Hooks<'_>, head: bool) -> Result<Tensor> {
        self.check_inputs(x, timesteps, context, hooks)?;
        let temb = self.time_embed.forward(timesteps)?;
        let mut h = self.conv_in(x)?;

        let mut skips = Vec::with_capacity(self.down.len());
        for (level, block) in self.down.iter().enumerate() {
            let site = site_id(BlockKind::Down, level);
            h = block.res.forward(&h, &temb)?;
            h = block.attn.forward(&h, context, &site, hooks)?;
            h = self.temporal_at(&site, h, hooks)?;
            skips.push(h.clone());
            if let Some(ds) = &block.downsample {
                h = ds.forward(&h)?;
            }
        }

        h = self.mid.res1.forward(&h, &temb)?;
        h = self.mid.attn.forward(&h, context, "mid", hooks)?;
        h = self.temporal_at("mid", h, hooks)?;
        h = self.mid.res2.forward(&h, &temb)?;

        let levels = self.config.levels();
        for (i, block) in self.up.iter().enumerate() {
            let level = levels - 1 - i;
            let site = site_id(BlockKind::Up, level);
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = block.res.forward(&h, &temb)?;
            h = block.attn.forward(&h, context, &site, hooks)?;
            h = self.temporal_at(&site, h, hooks)?;
            if let Some(us) = &block.upsample {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        if !head {
            return Ok(h);
        }
        let h = self.norm_out.forward(&h)?.silu()?;
        Ok(self.conv_out.forward(&h)?)
    }
}
