//! Staged training: stage 1 (backbones and motion encoder), the gaze
//! fine-tune, and stage 2 (temporal layers only).

pub mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::config::Profile;
use crate::datapipe::{filter_top_fraction, worker_rng, AugmentConfig, Corpus, GazeSelection, Pipeline, PipelineConfig, TrainingSample};
use crate::frame::ImageFrame;
use crate::model::PortraitModel;
use crate::{motion, temporal, Error, Result};

pub use schedule::NoiseSchedule;

/// Real-data share must dominate every stage mix: swapped, stylized, real.
pub const DEFAULT_PROPORTIONS: [f64; 3] = [0.4, 0.1, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub clip_length: usize,
    pub stride: usize,
    pub proportions: [f64; 3],
    /// Micro-batches per optimizer step.
    #[serde(default = "one")]
    pub accumulate: usize,
    /// One diffusion timestep per frame instead of one per clip.
    pub timestep_per_frame: bool,
    /// Fraction of clips kept by the gaze filter (gaze fine-tune only).
    #[serde(default)]
    pub gaze_fraction: Option<f64>,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Global L2 norm cap applied to the summed gradient before each step.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn one() -> usize {
    1
}

impl StageConfig {
    pub fn defaults(stage: Stage, profile: Profile) -> Self {
        let full = profile == Profile::Full;
        let (clip_length, stride) = match (stage, full) {
            (Stage::GazeFt, true) => (16, 12),
            (_, true) => (16, 2),
            (Stage::GazeFt, false) => (4, 12),
            (Stage::Stage2, false) => (8, 2),
            (_, false) => (4, 2),
        };
        Self {
            steps: if full { 30_000 } else { 2000 },
            lr: if full { 1e-5 } else { 5e-4 },
            weight_decay: 0.0,
            clip_length,
            stride,
            proportions: DEFAULT_PROPORTIONS,
            accumulate: 1,
            timestep_per_frame: stage != Stage::Stage2,
            gaze_fraction: (stage == Stage::GazeFt).then_some(0.05),
            augment: AugmentConfig::default(),
            grad_clip: (!full).then_some(1.0),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            clip_length: self.clip_length,
            stride: self.stride,
            proportions: self.proportions,
            augment: self.augment.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.accumulate == 0 {
            return Err(Error::InvalidConfig("learning rate and accumulation must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("gradient clip {c} must be positive")));
            }
        }
        if let Some(f) = self.gaze_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("gaze fraction {f} outside (0, 1]")));
            }
        }
        self.pipeline().validate()
    }
}

/// Parameter groups a stage may update; everything else must stay bitwise fixed.
pub fn trainable_groups(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Init => &[],
        Stage::Stage1 | Stage::GazeFt => &[motion::GROUP, "unet", crate::refnet::GROUP],
        Stage::Stage2 => &[temporal::GROUP],
    }
}

pub fn trainable_names(model: &PortraitModel, stage: Stage) -> BTreeSet<String> {
    model.store.names_in_groups(trainable_groups(stage))
}

pub fn frozen_names(model: &PortraitModel, stage: Stage) -> BTreeSet<String> {
    let trainable = trainable_names(model, stage);
    model.store.names().filter(|n| !trainable.contains(*n)).map(String::from).collect()
}

/// Per-frame timesteps and unit Gaussian noise for one sample.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    /// Draws timesteps and noise shaped like `latent`.
    pub fn sample(latent: &Tensor, steps: usize, per_frame: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::with_shape(latent.dims4()?, latent.dtype(), latent.device(), steps, per_frame, rng)
    }

    pub fn with_shape(
        shape: (usize, usize, usize, usize),
        dtype: DType,
        device: &candle_core::Device,
        steps: usize,
        per_frame: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let f = shape.0;
        let t = if per_frame {
            (0..f).map(|_| rng.gen_range(0..steps)).collect()
        } else {
            vec![rng.gen_range(0..steps); f]
        };
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?;
        Ok(Self { t, eps })
    }

    pub fn timesteps(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let t: Vec<f64> = self.t.iter().map(|&t| t as f64).collect();
        Ok(Tensor::from_vec(t, self.t.len(), device)?.to_dtype(dtype)?)
    }
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_mse(pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Noises `x0`, asks `predict` for the noise and scores it.
pub fn loss_with(
    predict: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    x0: &Tensor,
    noise: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let noisy = schedule.add_noise(x0, &noise.eps, &noise.t)?;
    let t = noise.timesteps(x0.dtype(), x0.device())?;
    epsilon_mse(&predict(&noisy, &t)?, &noise.eps)
}

/// Target latents for a sample, always constant with respect to parameters.
pub fn target_latents(model: &PortraitModel, sample: &TrainingSample) -> Result<Tensor> {
    let z = model.codec.encode(&sample.target.frames, model.dtype(), model.device())?;
    Ok(z.into_tensor().detach())
}

/// Diffusion loss for one pipeline sample under a given noise draw.
pub fn sample_loss(model: &PortraitModel, sample: &TrainingSample, noise: &NoiseDraw, schedule: &NoiseSchedule) -> Result<Tensor> {
    let x0 = target_latents(model, sample)?;
    let state = model.prepare_reference(&sample.reference, &sample.reference_mask)?;
    let driving = ImageFrame::stack(&sample.driving.frames, model.dtype(), model.device())?;
    let bundle = model.bundle(&state, &driving)?;
    loss_with(|noisy, t| model.predict_noise(noisy, t, &bundle, &state.bank), &x0, noise, schedule)
}

/// Restricts a corpus to the clips with the largest gaze changes.
pub fn gaze_subset(corpus: &Corpus, fraction: f64) -> Result<(Corpus, GazeSelection)> {
    let metas: Vec<_> = corpus.clips.iter().map(|c| c.meta.clone()).collect();
    let selection = filter_top_fraction(&metas, fraction);
    Ok((corpus.subset(&selection.selected), selection))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    /// `None` when the loss was not finite and the update was skipped.
    pub loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub skipped_steps: Vec<usize>,
    pub trainable_tensors: usize,
    pub frozen_tensors: usize,
}

impl StageReport {
    /// Mean loss over the last `n` finite steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

fn sum_grads(acc: &mut BTreeMap<usize, Tensor>, vars: &[Var], grads: &GradStore, scale: f64) -> Result<()> {
    for (i, v) in vars.iter().enumerate() {
        if let Some(g) = grads.get(v.as_tensor()) {
            let g = (g * scale)?;
            let sum = match acc.remove(&i) {
                Some(prev) => (prev + g)?,
                None => g,
            };
            acc.insert(i, sum);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<usize, Tensor>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * k)?;
        }
    }
    Ok(norm)
}

/// Runs one training stage in place on `model`, whose checkpoint carried the
/// stage tag `input`. Losses go to `log` as one JSON object per line.
pub fn run_stage(
    model: &mut PortraitModel,
    input: Stage,
    stage: Stage,
    cfg: &StageConfig,
    corpus: &Corpus,
    schedule: &NoiseSchedule,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<StageReport> {
    stage.check_input(input)?;
    cfg.validate()?;
    if stage == Stage::Init {
        return Err(Error::InvalidConfig("`init` is not a trainable stage".into()));
    }
    if stage == Stage::Stage2 && !model.has_temporal() {
        model.insert_temporal()?;
    }
    let corpus = match (stage, cfg.gaze_fraction) {
        (Stage::GazeFt, Some(f)) => {
            let (subset, selection) = gaze_subset(corpus, f)?;
            log::info!("gaze filter kept clips {:?} of {}", selection.selected, corpus.len());
            subset
        }
        _ => corpus.clone(),
    };
    let pipeline = Pipeline::new(corpus, cfg.pipeline())?;

    let trainable = trainable_names(model, stage);
    let frozen = frozen_names(model, stage);
    let before = model.store.hashes(&frozen)?;
    let vars = model.store.vars_named(&trainable);
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;

    let latent = model.config().latent_size();
    let mut data_rng = worker_rng(seed, 0);
    let mut noise_rng = worker_rng(seed, 1);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped = Vec::new();
    for step in 1..=cfg.steps {
        let mut acc = BTreeMap::new();
        let mut total = 0.0;
        let mut finite = true;
        for _ in 0..cfg.accumulate {
            let sample = pipeline.sample(&mut data_rng)?;
            let shape = (sample.target.len(), model.codec.latent_channels(), latent, latent);
            let noise = NoiseDraw::with_shape(shape, model.dtype(), model.device(), schedule.len(), cfg.timestep_per_frame, &mut noise_rng)?;
            let loss = sample_loss(model, &sample, &noise, schedule)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                finite = false;
                break;
            }
            total += value / cfg.accumulate as f64;
            sum_grads(&mut acc, &vars, &loss.backward()?, 1.0 / cfg.accumulate as f64)?;
        }
        let record = if finite {
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut acc, max)?;
            }
            let mut grads = GradStore::default();
            for (i, g) in acc {
                grads.insert(vars[i].as_tensor(), g);
            }
            opt.step(&grads)?;
            losses.push(total);
            LogRecord {
                step,
                stage,
                loss: Some(total),
                lr: cfg.lr,
            }
        } else {
            log::warn!("{}", Error::NonFiniteLoss(step));
            skipped.push(step);
            LogRecord {
                step,
                stage,
                loss: None,
                lr: cfg.lr,
            }
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::json("training log", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        if step % 100 == 0 || step == cfg.steps {
            log::info!("{stage} step {step}/{} loss {total:.5}", cfg.steps);
        }
    }

    let after = model.store.hashes(&frozen)?;
    let changed: Vec<String> = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    if !changed.is_empty() {
        return Err(Error::FrozenChanged(changed));
    }
    Ok(StageReport {
        stage,
        steps: cfg.steps,
        losses,
        skipped_steps: skipped,
        trainable_tensors: trainable.len(),
        frozen_tensors: frozen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::corpus::{render_video, SynthConfig};
    use crate::context;
    use crate::model::ModelConfig;
    use candle_core::Device;

    fn tiny_corpus(n: usize) -> Corpus {
        let cfg = SynthConfig {
            n_videos: n,
            frames: 40,
            height: 32,
            width: 32,
            seed: 3,
            supersample: 1,
        };
        Corpus::from_clips((0..n).map(|i| render_video(&cfg, i).0).collect())
    }

    fn quick(stage: Stage, steps: usize) -> StageConfig {
        StageConfig {
            steps,
            clip_length: 2,
            ..StageConfig::defaults(stage, Profile::Toy)
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = BTreeMap::new();
        g.insert(0, Tensor::new(&[3f64, 0.0], &Device::Cpu).unwrap());
        g.insert(1, Tensor::new(&[4f64], &Device::Cpu).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g[&1].to_vec1::<f64>().unwrap(), [4.0]);
        clip_grad_norm(&mut g, 1.0).unwrap();
        let after = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((after - 1.0).abs() < 1e-5, "{after}");
    }

    #[test]
    fn true_noise_scores_zero_and_zero_prediction_scores_variance() {
        let x0 = Tensor::randn(0f64, 1.0, (3, 4, 2, 2), &Device::Cpu).unwrap();
        let s = NoiseSchedule::for_steps(100).unwrap();
        let noise = NoiseDraw::sample(&x0, 100, true, &mut worker_rng(0, 0)).unwrap();
        let eps = noise.eps.clone();
        let zero = loss_with(|_, _| Ok(eps.clone()), &x0, &noise, &s).unwrap();
        assert_eq!(zero.to_scalar::<f64>().unwrap(), 0.0);
        let big = Tensor::randn(0f64, 1.0, (64, 4, 8, 8), &Device::Cpu).unwrap();
        let noise = NoiseDraw::sample(&big, 100, false, &mut worker_rng(0, 0)).unwrap();
        assert!(noise.t.iter().all(|&t| t == noise.t[0]));
        let var = loss_with(|n, _| n.zeros_like().map_err(Into::into), &big, &noise, &s).unwrap();
        assert!((var.to_scalar::<f64>().unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn stage_groups() {
        assert_eq!(trainable_groups(Stage::Stage2), ["temporal"]);
        assert!(!trainable_groups(Stage::Stage1).contains(&context::GROUP));
        assert_eq!(trainable_groups(Stage::GazeFt), trainable_groups(Stage::Stage1));
    }

    #[test]
    fn defaults_follow_profile() {
        let s1 = StageConfig::defaults(Stage::Stage1, Profile::Full);
        assert_eq!((s1.clip_length, s1.stride, s1.lr), (16, 2, 1e-5));
        assert_eq!(s1.proportions, [0.4, 0.1, 0.5]);
        let g = StageConfig::defaults(Stage::GazeFt, Profile::Full);
        assert_eq!((g.clip_length, g.stride, g.gaze_fraction), (16, 12, Some(0.05)));
        assert!(!StageConfig::defaults(Stage::Stage2, Profile::Toy).timestep_per_frame);
    }

    #[test]
    fn stage_runs_are_reproducible_and_respect_freezing() {
        let corpus = tiny_corpus(3);
        let s = NoiseSchedule::for_steps(100).unwrap();
        let run = || {
            let mut m = PortraitModel::build(&ModelConfig::tiny(), 5, DType::F32, &Device::Cpu).unwrap();
            let mut buf = Vec::new();
            let r = run_stage(&mut m, Stage::Init, Stage::Stage1, &quick(Stage::Stage1, 3), &corpus, &s, 11, Some(&mut buf)).unwrap();
            (m, r, buf)
        };
        let (m, a, log_a) = run();
        let (_, b, log_b) = run();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(
            a.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            b.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(log_a, log_b);
        let first: serde_json::Value = serde_json::from_slice(log_a.split(|c| *c == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["step"], 1);
        assert_eq!(first["stage"], "stage1");
        assert!(first["loss"].is_f64() && first["lr"].is_f64());
        let fresh = PortraitModel::build(&ModelConfig::tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let enc: Vec<String> = m.store.names_in_groups(&[context::GROUP]).into_iter().collect();
        assert_eq!(m.store.hashes(&enc).unwrap(), fresh.store.hashes(&enc).unwrap());
        let moved = ["unet.conv_in.weight", "refnet.conv_in.weight", "driven_encoder.motion.0.weight"];
        for n in moved {
            assert_ne!(m.store.hash(n).unwrap(), fresh.store.hash(n).unwrap(), "{n}");
        }
    }

    #[test]
    fn stage2_touches_only_temporal_layers() {
        let corpus = tiny_corpus(2);
        let s = NoiseSchedule::for_steps(100).unwrap();
        let mut m = PortraitModel::build(&ModelConfig::tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let report = run_stage(&mut m, Stage::GazeFt, Stage::Stage2, &quick(Stage::Stage2, 2), &corpus, &s, 1, None).unwrap();
        assert!(m.has_temporal());
        assert_eq!(report.trainable_tensors, m.store.names_in_groups(&["temporal"]).len());
    }

    #[test]
    fn wrong_input_stage_is_rejected() {
        let corpus = tiny_corpus(1);
        let s = NoiseSchedule::for_steps(100).unwrap();
        let mut m = PortraitModel::build(&ModelConfig::tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let err = run_stage(&mut m, Stage::Stage1, Stage::Stage2, &quick(Stage::Stage2, 1), &corpus, &s, 1, None).unwrap_err();
        assert!(err.to_string().contains("gaze_ft"));
    }
}
