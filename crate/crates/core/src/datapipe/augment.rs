use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FaceBox, VideoClip};
use crate::frame::ImageFrame;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_gray: f64,
    pub p_resize: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_gray: 0.2,
            p_resize: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_gray: 0.0,
            p_resize: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.p_gray) || !p_ok(self.p_resize) {
            return Err(Error::InvalidConfig("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::InvalidConfig(format!(
                "scale range [{}, {}] is empty or non-positive",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

/// Parameters drawn once per clip and applied to every frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub grayscale: bool,
    pub sx: f64,
    pub sy: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        grayscale: false,
        sx: 1.0,
        sy: 1.0,
    };

    pub fn draw(config: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let grayscale = rng.gen_bool(config.p_gray);
        let (sx, sy) = if rng.gen_bool(config.p_resize) {
            let mut s = || {
                if config.scale_min == config.scale_max {
                    config.scale_min
                } else {
                    rng.gen_range(config.scale_min..config.scale_max)
                }
            };
            (s(), s())
        } else {
            (1.0, 1.0)
        };
        Self { grayscale, sx, sy }
    }
}

pub fn augment_driving(clip: &VideoClip, config: &AugmentConfig, rng: &mut impl Rng) -> VideoClip {
    apply_augment(clip, &AugmentParams::draw(config, rng))
}

pub fn apply_augment(clip: &VideoClip, params: &AugmentParams) -> VideoClip {
    let mut out = clip.clone();
    for (frame, meta) in out.frames.iter_mut().zip(out.meta.iter_mut()) {
        if params.grayscale {
            *frame = grayscale(frame);
        }
        if (params.sx, params.sy) != (1.0, 1.0) {
            let (f, b) = rescale_face(frame, &meta.face_box, params.sx, params.sy);
            *frame = f;
            meta.face_box = b;
        }
    }
    out
}

/// Luminance replicated to all three channels.
pub fn grayscale(frame: &ImageFrame) -> ImageFrame {
    let (h, w) = (frame.height(), frame.width());
    let mut out = ImageFrame::zeros(h, w);
    let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
    let luma: Vec<f32> = (0..h * w)
        .map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0))
        .collect();
    for c in 0..3 {
        out.channel_mut(c).copy_from_slice(&luma);
    }
    out
}

/// Scales the face region by (sx, sy) about its center and re-places it;
/// everything outside the new box is black.
pub fn rescale_face(frame: &ImageFrame, face_box: &FaceBox, sx: f64, sy: f64) -> (ImageFrame, FaceBox) {
    let (h, w) = (frame.height(), frame.width());
    let mut out = ImageFrame::zeros(h, w);
    if face_box.area() == 0 {
        return (out, *face_box);
    }
    let cx = face_box.x as f64 + face_box.w as f64 / 2.0;
    let cy = face_box.y as f64 + face_box.h as f64 / 2.0;
    let place = |c: f64, len: usize, s: f64, limit: usize| -> (usize, usize) {
        let new_len = (len as f64 * s).round().max(1.0);
        let start = (c - new_len / 2.0).round().clamp(0.0, limit as f64) as usize;
        let end = ((c + new_len / 2.0).round().clamp(0.0, limit as f64) as usize).max(start);
        (start, end - start)
    };
    let (nx, nw) = place(cx, face_box.w, sx, w);
    let (ny, nh) = place(cy, face_box.h, sy, h);
    let new_box = FaceBox {
        x: nx,
        y: ny,
        w: nw,
        h: nh,
    };
    let (x_lo, x_hi) = (face_box.x as f64, (face_box.x + face_box.w - 1) as f64);
    let (y_lo, y_hi) = (face_box.y as f64, (face_box.y + face_box.h - 1) as f64);
    for c in 0..3 {
        let src = frame.channel(c);
        let dst = out.channel_mut(c);
        for y in ny..ny + nh {
            let v = ((y as f64 + 0.5 - cy) / sy + cy - 0.5).clamp(y_lo, y_hi);
            let (y0, fy) = (v.floor() as usize, v - v.floor());
            let y1 = (y0 + 1).min(y_hi as usize);
            for x in nx..nx + nw {
                let u = ((x as f64 + 0.5 - cx) / sx + cx - 0.5).clamp(x_lo, x_hi);
                let (x0, fx) = (u.floor() as usize, u - u.floor());
                let x1 = (x0 + 1).min(x_hi as usize);
                let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
                let val = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                dst[y * w + x] = (val as f32).clamp(0.0, 1.0);
            }
        }
    }
    (out, new_box)
}
