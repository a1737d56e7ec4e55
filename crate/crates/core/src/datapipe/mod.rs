//! Training data: clip sampling, masking, augmentation, identity
//! perturbation, gaze filtering, source mixing and a procedural corpus.

pub mod augment;
pub mod corpus;
pub mod gaze;
pub mod masking;
pub mod mixture;
pub mod perturb;
pub mod pipeline;
pub mod sampling;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frame::{ImageFrame, Mask};
use crate::{Error, Result};

pub use augment::{augment_driving, AugmentConfig, AugmentParams};
pub use corpus::{load_clip, synth_corpus, Corpus, ManifestRecord, SynthConfig};
pub use gaze::{filter_top_fraction, gaze_change_score, GazeSelection};
pub use masking::mask_face;
pub use mixture::MixSampler;
pub use perturb::{perturb_identity, PerturbContext, Plugin, PluginRegistry};
pub use pipeline::{Pipeline, PipelineConfig, TrainingSample};
pub use sampling::{sample_clip, ClipSample};

/// Axis-aligned pixel box, half-open: columns x..x+w, rows y..y+h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn mask(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| self.contains(y, x))
    }
}

/// Gaze direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaze {
    pub yaw: f64,
    pub pitch: f64,
}

/// Head outline in pixel coordinates (pixel centers at i + 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn mask(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub face_box: FaceBox,
    #[serde(default)]
    pub gaze: Option<Gaze>,
    #[serde(default)]
    pub head: Option<Ellipse>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    Swapped,
    Stylized,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Real => "real",
            SourceTag::Swapped => "swapped",
            SourceTag::Stylized => "stylized",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<ImageFrame>,
    pub meta: Vec<FrameMeta>,
    pub identity_id: u64,
    pub source_tag: SourceTag,
}

impl VideoClip {
    pub fn new(frames: Vec<ImageFrame>, meta: Vec<FrameMeta>, identity_id: u64, source_tag: SourceTag) -> Result<Self> {
        let clip = Self {
            frames,
            meta,
            identity_id,
            source_tag,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Shape("a clip needs at least one frame".into()))?;
        let (h, w) = (first.height(), first.width());
        if self.meta.len() != self.frames.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} metadata records",
                self.frames.len(),
                self.meta.len()
            )));
        }
        for (i, (f, m)) in self.frames.iter().zip(&self.meta).enumerate() {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::Shape(format!("frame {i} is {}x{}, frame 0 is {h}x{w}", f.height(), f.width())));
            }
            if !m.face_box.fits(h, w) {
                return Err(Error::Shape(format!("frame {i}: face box {:?} outside {h}x{w}", m.face_box)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Subclip over the given frame indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            meta: indices.iter().map(|&i| self.meta[i]).collect(),
            identity_id: self.identity_id,
            source_tag: self.source_tag,
        }
    }

    /// Foreground mask of frame `i`: the head outline when known, else the face box.
    pub fn foreground(&self, i: usize) -> Mask {
        let (h, w) = (self.height(), self.width());
        match self.meta[i].head {
            Some(head) => head.mask(h, w),
            None => self.meta[i].face_box.mask(h, w),
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for f in &self.frames {
            hasher.update(f.hash().as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Generator owned by one sampling worker, derived from the global seed.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn worker_streams_differ_and_repeat() {
        let a: u64 = worker_rng(7, 0).gen();
        let b: u64 = worker_rng(7, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, worker_rng(7, 0).gen::<u64>());
    }

    #[test]
    fn clip_validation() {
        let f = ImageFrame::zeros(8, 8);
        let m = FrameMeta {
            face_box: FaceBox { x: 4, y: 4, w: 5, h: 2 },
            gaze: None,
            head: None,
        };
        assert!(VideoClip::new(vec![f.clone()], vec![m], 0, SourceTag::Real).is_err());
        assert!(VideoClip::new(vec![], vec![], 0, SourceTag::Real).is_err());
        let ok = FrameMeta {
            face_box: FaceBox { x: 4, y: 4, w: 4, h: 4 },
            ..m
        };
        assert!(VideoClip::new(vec![f], vec![ok], 0, SourceTag::Real).is_ok());
    }
}
