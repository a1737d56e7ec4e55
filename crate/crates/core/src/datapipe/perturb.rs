//! Identity perturbation plugins applied to driving clips.
//!
//! Every plugin transforms frames independently and leaves face boxes and
//! gaze untouched, so motion stays consistent while the appearance changes.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FaceBox, SourceTag, VideoClip};
use crate::frame::ImageFrame;
use crate::{Error, Result};

/// Side inputs some plugins need.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerturbContext<'a> {
    /// Reference image and its face box, for appearance transfer.
    pub reference: Option<(&'a ImageFrame, FaceBox)>,
}

pub trait Plugin: Send + Sync {
    fn id(&self) -> &'static str;
    fn tag(&self) -> SourceTag;
    fn apply_frames(&self, clip: &VideoClip, ctx: &PerturbContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<ImageFrame>>;
}

pub struct NonePlugin;

impl Plugin for NonePlugin {
    fn id(&self) -> &'static str {
        "none"
    }

    fn tag(&self) -> SourceTag {
        SourceTag::Real
    }

    fn apply_frames(&self, clip: &VideoClip, _: &PerturbContext<'_>, _: &mut dyn RngCore) -> Result<Vec<ImageFrame>> {
        Ok(clip.frames.clone())
    }
}

/// Parametric stand-in for a face swap: a colour remap and a smooth
/// geometric warp of the face region, both keyed by a fake identity seed.
pub struct WarpSwap;

#[derive(Debug, Clone, Copy)]
pub struct SwapIdentity {
    mix: [[f32; 3]; 3],
    offset: [f32; 3],
    amp: f64,
    freq: f64,
    phase: f64,
}

impl SwapIdentity {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mix = [[0f32; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.6 } else { 0.0 } + rng.gen_range(-0.35..0.35);
            }
        }
        let mut offset = [0f32; 3];
        for v in offset.iter_mut() {
            *v = rng.gen_range(-0.1..0.3);
        }
        Self {
            mix,
            offset,
            amp: rng.gen_range(0.02..0.08),
            freq: rng.gen_range(1.0..3.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn apply(&self, frame: &ImageFrame, b: &FaceBox) -> ImageFrame {
        let mut out = frame.clone();
        if b.area() == 0 {
            return out;
        }
        let tau = std::f64::consts::TAU;
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let v = (y - b.y) as f64 / b.h as f64;
                let u = (x - b.x) as f64 / b.w as f64;
                let dx = self.amp * b.w as f64 * (tau * self.freq * v + self.phase).sin();
                let dy = self.amp * b.h as f64 * (tau * self.freq * u + self.phase).cos();
                let sx = ((x as f64 + dx).round() as i64).clamp(b.x as i64, (b.x + b.w - 1) as i64) as usize;
                let sy = ((y as f64 + dy).round() as i64).clamp(b.y as i64, (b.y + b.h - 1) as i64) as usize;
                let c = frame.rgb(sy, sx);
                let mut rgb = [0f32; 3];
                for (i, o) in rgb.iter_mut().enumerate() {
                    let m = self.mix[i];
                    *o = (m[0] * c[0] + m[1] * c[1] + m[2] * c[2] + self.offset[i]).clamp(0.0, 1.0);
                }
                out.set_rgb(y, x, rgb);
            }
        }
        out
    }
}

pub fn warp_swap(clip: &VideoClip, identity_seed: u64) -> Vec<ImageFrame> {
    let id = SwapIdentity::from_seed(identity_seed);
    clip.frames
        .iter()
        .zip(&clip.meta)
        .map(|(f, m)| id.apply(f, &m.face_box))
        .collect()
}

impl Plugin for WarpSwap {
    fn id(&self) -> &'static str {
        "warp_swap"
    }

    fn tag(&self) -> SourceTag {
        SourceTag::Swapped
    }

    fn apply_frames(&self, clip: &VideoClip, _: &PerturbContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<ImageFrame>> {
        Ok(warp_swap(clip, rng.next_u64()))
    }
}

/// Per-frame random palette followed by quantisation to `levels` values per
/// channel. Deliberately incoherent from frame to frame.
pub struct PosterizeStyle {
    pub levels: usize,
}

pub fn posterize(frame: &ImageFrame, levels: usize, gain: [f32; 3], offset: [f32; 3]) -> ImageFrame {
    let mut out = frame.clone();
    let k = (levels.max(2) - 1) as f32;
    for c in 0..3 {
        for v in out.channel_mut(c) {
            let styled = (*v * gain[c] + offset[c]).clamp(0.0, 1.0);
            *v = (styled * k).round() / k;
        }
    }
    out
}

impl Plugin for PosterizeStyle {
    fn id(&self) -> &'static str {
        "posterize_style"
    }

    fn tag(&self) -> SourceTag {
        SourceTag::Stylized
    }

    fn apply_frames(&self, clip: &VideoClip, _: &PerturbContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<ImageFrame>> {
        Ok(clip
            .frames
            .iter()
            .map(|f| {
                let mut gain = [0f32; 3];
                let mut offset = [0f32; 3];
                for c in 0..3 {
                    gain[c] = rng.gen_range(0.6..1.4);
                    offset[c] = rng.gen_range(-0.2..0.2);
                }
                posterize(f, self.levels, gain, offset)
            })
            .collect())
    }
}

/// Matches per-channel mean and standard deviation of the driving face
/// regions to the reference face region.
pub struct ColorStats;

fn region_stats(frames: &[(&ImageFrame, FaceBox)]) -> [(f64, f64); 3] {
    let mut out = [(0.0, 1.0); 3];
    for (c, stat) in out.iter_mut().enumerate() {
        let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
        for (f, b) in frames {
            let plane = f.channel(c);
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    let v = plane[y * f.width() + x] as f64;
                    n += 1;
                    sum += v;
                    sq += v * v;
                }
            }
        }
        if n > 0 {
            let mean = sum / n as f64;
            *stat = (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt());
        }
    }
    out
}

impl Plugin for ColorStats {
    fn id(&self) -> &'static str {
        "color_stats"
    }

    fn tag(&self) -> SourceTag {
        SourceTag::Real
    }

    fn apply_frames(&self, clip: &VideoClip, ctx: &PerturbContext<'_>, _: &mut dyn RngCore) -> Result<Vec<ImageFrame>> {
        let (reference, ref_box) = ctx
            .reference
            .ok_or_else(|| Error::Config("plugin `color_stats` needs a reference image".into()))?;
        let target = region_stats(&[(reference, ref_box)]);
        let pairs: Vec<_> = clip.frames.iter().zip(clip.meta.iter().map(|m| m.face_box)).collect();
        let source = region_stats(&pairs);
        Ok(pairs
            .iter()
            .map(|(f, b)| {
                let mut out = (*f).clone();
                for c in 0..3 {
                    let (ms, ss) = source[c];
                    let (mt, st) = target[c];
                    let gain = if ss > 1e-6 { st / ss } else { 1.0 };
                    let w = f.width();
                    let plane = out.channel_mut(c);
                    for y in b.y..b.y + b.h {
                        for x in b.x..b.x + b.w {
                            let v = plane[y * w + x] as f64;
                            plane[y * w + x] = ((v - ms) * gain + mt).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
                out
            })
            .collect())
    }
}

pub struct PluginRegistry {
    plugins: BTreeMap<&'static str, Box<dyn Plugin>>,
}

impl Default for PluginRegistry {
    fn default() -> Self {
        let mut r = Self {
            plugins: BTreeMap::new(),
        };
        r.register(Box::new(NonePlugin));
        r.register(Box::new(WarpSwap));
        r.register(Box::new(PosterizeStyle { levels: 4 }));
        r.register(Box::new(ColorStats));
        r
    }
}

impl PluginRegistry {
    pub fn register(&mut self, plugin: Box<dyn Plugin>) {
        self.plugins.insert(plugin.id(), plugin);
    }

    pub fn get(&self, id: &str) -> Result<&dyn Plugin> {
        self.plugins
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownPlugin(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().copied()
    }
}

/// Applies plugin `plugin_id`; metadata is carried over unchanged and the
/// source tag is set from the plugin.
pub fn perturb_identity(
    clip: &VideoClip,
    plugin_id: &str,
    registry: &PluginRegistry,
    ctx: &PerturbContext<'_>,
    rng: &mut dyn RngCore,
) -> Result<VideoClip> {
    let plugin = registry.get(plugin_id)?;
    let frames = plugin.apply_frames(clip, ctx, rng)?;
    Ok(VideoClip {
        frames,
        meta: clip.meta.clone(),
        identity_id: clip.identity_id,
        source_tag: plugin.tag(),
    })
}
