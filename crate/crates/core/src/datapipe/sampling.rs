use rand::Rng;

use crate::{Error, Result};

/// Frames picked from one video and the reference among them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSample {
    pub indices: Vec<usize>,
    /// Position of the reference frame within `indices`.
    pub reference: usize,
}

impl ClipSample {
    pub fn reference_frame(&self) -> usize {
        self.indices[self.reference]
    }
}

/// Frames spanned by `length` samples at `stride`.
pub fn span(length: usize, stride: usize) -> usize {
    (length - 1) * stride + 1
}

/// Picks a uniform start f0 and returns f0, f0+s, ..., f0+(L-1)s with a
/// reference chosen uniformly among them.
pub fn sample_clip(video_len: usize, length: usize, stride: usize, rng: &mut impl Rng) -> Result<ClipSample> {
    if length == 0 || stride == 0 {
        return Err(Error::InvalidConfig("clip length and stride must be positive".into()));
    }
    let needed = span(length, stride);
    if video_len < needed {
        return Err(Error::VideoTooShort {
            needed,
            available: video_len,
        });
    }
    let f0 = rng.gen_range(0..=video_len - needed);
    Ok(ClipSample {
        indices: (0..length).map(|k| f0 + k * stride).collect(),
        reference: rng.gen_range(0..length),
    })
}
