use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_driving, AugmentConfig};
use super::corpus::Corpus;
use super::masking::mask_face;
use super::mixture::MixSampler;
use super::perturb::{perturb_identity, PerturbContext, PluginRegistry};
use super::sampling::{sample_clip, span};
use super::{worker_rng, FaceBox, SourceTag, VideoClip};
use crate::frame::{ImageFrame, Mask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub clip_length: usize,
    pub stride: usize,
    /// Swapped, stylized, real.
    pub proportions: [f64; 3],
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("clip length and stride must be positive".into()));
        }
        super::mixture::validate_proportions(self.proportions)?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Perturbed, face-masked and augmented driving frames.
    pub driving: VideoClip,
    pub reference: ImageFrame,
    pub reference_mask: Mask,
    pub reference_box: FaceBox,
    /// The untouched real frames the model must reproduce.
    pub target: VideoClip,
    pub source_tag: SourceTag,
    pub clip_index: usize,
    pub frame_indices: Vec<usize>,
}

pub fn plugin_for(tag: SourceTag) -> &'static str {
    match tag {
        SourceTag::Real => "none",
        SourceTag::Swapped => "warp_swap",
        SourceTag::Stylized => "posterize_style",
    }
}

/// Turns a corpus into training samples: draw a source category, sample a
/// strided clip, perturb the driving copy, mask it, augment it.
pub struct Pipeline {
    corpus: Corpus,
    config: PipelineConfig,
    registry: PluginRegistry,
    sampler: MixSampler<usize>,
    skipped: Vec<usize>,
}

impl Pipeline {
    pub fn new(corpus: Corpus, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let needed = span(config.clip_length, config.stride);
        let (eligible, skipped): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| corpus.clips[i].len() >= needed);
        if !skipped.is_empty() {
            log::warn!(
                "skipping {} of {} clips shorter than {needed} frames",
                skipped.len(),
                corpus.len()
            );
        }
        if eligible.is_empty() {
            return Err(Error::VideoTooShort {
                needed,
                available: corpus.clips.iter().map(VideoClip::len).max().unwrap_or(0),
            });
        }
        let sampler = MixSampler::new(eligible.clone(), eligible.clone(), eligible, config.proportions)?;
        Ok(Self {
            corpus,
            config,
            registry: PluginRegistry::default(),
            sampler,
            skipped,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Clips too short for the configured span.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<TrainingSample> {
        let draw = self.sampler.draw(rng);
        let clip = &self.corpus.clips[draw.item];
        let cs = sample_clip(clip.len(), self.config.clip_length, self.config.stride, rng)?;
        let mut target = clip.select(&cs.indices);
        target.source_tag = SourceTag::Real;
        let reference = target.frames[cs.reference].clone();
        let reference_mask = target.foreground(cs.reference);
        let reference_box = target.meta[cs.reference].face_box;

        let mut driving = perturb_identity(
            &target,
            plugin_for(draw.tag),
            &self.registry,
            &PerturbContext::default(),
            rng,
        )?;
        for (frame, meta) in driving.frames.iter_mut().zip(&driving.meta) {
            *frame = mask_face(frame, &meta.face_box);
        }
        let driving = augment_driving(&driving, &self.config.augment, rng);
        Ok(TrainingSample {
            driving,
            reference,
            reference_mask,
            reference_box,
            target,
            source_tag: draw.tag,
            clip_index: draw.item,
            frame_indices: cs.indices,
        })
    }

    /// `n` samples from `workers` threads; worker w draws samples w, w+workers,
    /// ... from its own generator, so the result depends only on the seed and
    /// the worker count.
    pub fn samples(&self, n: usize, seed: u64, workers: usize) -> Result<Vec<TrainingSample>> {
        let workers = workers.max(1);
        let chunks: Vec<Result<Vec<TrainingSample>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut rng = worker_rng(seed, w as u64);
                        (w..n).step_by(workers).map(|_| self.sample(&mut rng)).collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sampling worker panicked")).collect()
        });
        let mut per_worker = chunks.into_iter().collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(per_worker[i % workers].remove(0));
        }
        Ok(out)
    }
}
