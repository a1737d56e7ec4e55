//! Inference: windowed DDIM sampling over arbitrarily long driving videos.
//!
//! The reference latent, context tokens and ReferenceNet bank are computed
//! once. At every denoising step the sequence is split into overlapping
//! windows, each window predicts noise for its frames, and overlapping
//! predictions are averaged before the sampler update.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::LatentVolume;
use crate::datapipe::{mask_face, worker_rng, FaceBox, PerturbContext, PluginRegistry, VideoClip};
use crate::frame::{ImageFrame, Mask};
use crate::model::PortraitModel;
use crate::trainer::NoiseSchedule;
use crate::{Error, Result};

/// Window start offsets covering `0..total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub total: usize,
    pub window: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
}

impl WindowPlan {
    /// Windows advance by `window - overlap`; the last one is pulled back to
    /// end exactly at `total`, replacing the previous stride when that one
    /// would be covered twice over. A sequence no longer than one window is a
    /// single window of length `total`.
    pub fn plan(total: usize, window: usize, overlap: usize) -> Result<Self> {
        if total == 0 || window == 0 || overlap >= window {
            return Err(Error::InvalidWindow { total, window, overlap });
        }
        if total <= window {
            return Ok(Self {
                total,
                window: total,
                overlap,
                starts: vec![0],
            });
        }
        let stride = window - overlap;
        let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + window < total).collect();
        let last = total - window;
        // A window the clamped one fully supersedes would triple-cover frames.
        if starts.len() >= 2 && starts[starts.len() - 2] + window > last {
            starts.pop();
        }
        starts.push(last);
        starts.dedup();
        Ok(Self {
            total,
            window,
            overlap,
            starts,
        })
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.starts.iter().map(move |&s| s..s + self.window)
    }

    /// Number of windows covering each frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.total];
        for r in self.ranges() {
            for i in r {
                c[i] += 1;
            }
        }
        c
    }
}

/// Averages per-window outputs (each (window, ...)) into one (total, ...)
/// tensor, accumulating in f64.
pub fn blend_windows(plan: &WindowPlan, outputs: &[Tensor]) -> Result<Tensor> {
    if outputs.len() != plan.starts.len() {
        return Err(Error::Shape(format!("{} outputs for {} windows", outputs.len(), plan.starts.len())));
    }
    let first = &outputs[0];
    let dtype = first.dtype();
    let frame_shape = first.dims()[1..].to_vec();
    let per_frame: usize = frame_shape.iter().product();
    let mut sum = vec![0f64; plan.total * per_frame];
    let mut count = vec![0usize; plan.total];
    for (out, range) in outputs.iter().zip(plan.ranges()) {
        if out.dims()[0] != range.len() || out.dims()[1..] != frame_shape[..] {
            return Err(Error::Shape(format!("window output {:?} for range {range:?}", out.dims())));
        }
        let values = out.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for (k, frame) in range.enumerate() {
            count[frame] += 1;
            let dst = &mut sum[frame * per_frame..(frame + 1) * per_frame];
            for (d, v) in dst.iter_mut().zip(&values[k * per_frame..(k + 1) * per_frame]) {
                *d += v;
            }
        }
    }
    if let Some(hole) = count.iter().position(|&c| c == 0) {
        return Err(Error::CoverageHole(hole));
    }
    for (frame, &c) in count.iter().enumerate() {
        for v in &mut sum[frame * per_frame..(frame + 1) * per_frame] {
            *v /= c as f64;
        }
    }
    let mut shape = vec![plan.total];
    shape.extend(frame_shape);
    Ok(Tensor::from_vec(sum, shape, first.device())?.to_dtype(dtype)?)
}

/// Deterministic DDIM (eta = 0) over evenly spaced timesteps that include T-1.
#[derive(Debug, Clone)]
pub struct DdimSampler {
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
}

impl DdimSampler {
    pub fn new(schedule: NoiseSchedule, steps: usize) -> Result<Self> {
        let t = schedule.len();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("sampler steps {steps} must lie in 1..={t}")));
        }
        let ratio = t as f64 / steps as f64;
        let timesteps = (0..steps)
            .map(|i| ((t as f64 - i as f64 * ratio).round() as usize).saturating_sub(1))
            .collect();
        Ok(Self { schedule, timesteps })
    }

    /// Descending timesteps visited by the sampler.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    fn alpha_bar_prev(&self, i: usize) -> f64 {
        match self.timesteps.get(i + 1) {
            Some(&t) => self.schedule.alpha_bar(t),
            None => 1.0,
        }
    }

    /// One update from timestep index `i` to the next one.
    pub fn step(&self, x: &Tensor, eps: &Tensor, i: usize) -> Result<Tensor> {
        self.step_eta(x, eps, i, 0.0, None)
    }

    /// Update with noise scale `eta`; `z` is fresh standard noise, required
    /// when `eta > 0` and ignored otherwise.
    pub fn step_eta(&self, x: &Tensor, eps: &Tensor, i: usize, eta: f64, z: Option<&Tensor>) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(self.timesteps[i]);
        let ab_prev = self.alpha_bar_prev(i);
        let x0 = ((x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let out = ((x0 * ab_prev.sqrt())? + (eps * dir)?)?;
        match z {
            Some(z) if sigma > 0.0 => Ok((out + (z * sigma)?)?),
            None if sigma > 0.0 => Err(Error::Config("stochastic sampler step needs noise".into())),
            _ => Ok(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimateOptions {
    pub window: usize,
    pub overlap: usize,
    pub sample_steps: usize,
    pub color_stats: bool,
    pub seed: u64,
    /// 0 keeps the sampler deterministic.
    #[serde(default)]
    pub eta: f64,
}

/// Initial noise for frame `i`, independent of the window layout.
pub fn frame_noise(seed: u64, i: usize, shape: (usize, usize, usize), dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut rng = worker_rng(seed, (1 << 40) | i as u64);
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, (1, shape.0, shape.1, shape.2), device)?.to_dtype(dtype)?)
}

/// Driving frames as the model sees them: optionally colour-matched to the
/// reference face, then masked to their face boxes.
pub fn prepare_driving(driving: &VideoClip, reference: &ImageFrame, reference_box: FaceBox, color_stats: bool) -> Result<Vec<ImageFrame>> {
    let frames = if color_stats {
        let registry = PluginRegistry::default();
        let ctx = PerturbContext {
            reference: Some((reference, reference_box)),
        };
        registry.get("color_stats")?.apply_frames(driving, &ctx, &mut worker_rng(0, 0))?
    } else {
        driving.frames.clone()
    };
    Ok(frames
        .iter()
        .zip(&driving.meta)
        .map(|(f, m)| mask_face(f, &m.face_box))
        .collect())
}

/// Animates `reference` with the motion of `driving`, one output per driving frame.
pub fn animate(
    model: &PortraitModel,
    schedule: &NoiseSchedule,
    reference: &ImageFrame,
    reference_mask: &Mask,
    reference_box: FaceBox,
    driving: &VideoClip,
    opts: &AnimateOptions,
) -> Result<Vec<ImageFrame>> {
    let total = driving.len();
    let plan = WindowPlan::plan(total, opts.window, opts.overlap)?;
    let sampler = DdimSampler::new(schedule.clone(), opts.sample_steps)?;
    let (dtype, device) = (model.dtype(), model.device().clone());

    let state = model.prepare_reference(reference, reference_mask)?;
    let frames = prepare_driving(driving, reference, reference_box, opts.color_stats)?;
    let bundle = model.bundle(&state, &ImageFrame::stack(&frames, dtype, &device)?)?;
    let windows: Vec<_> = plan
        .starts
        .iter()
        .map(|&s| bundle.frames(s, plan.window))
        .collect::<Result<_>>()?;

    let n = model.config().latent_size();
    let c = model.codec.latent_channels();
    let noise: Vec<Tensor> = (0..total)
        .map(|i| frame_noise(opts.seed, i, (c, n, n), dtype, &device))
        .collect::<Result<_>>()?;
    let mut x = Tensor::cat(&noise, 0)?;
    for (i, &t) in sampler.timesteps().iter().enumerate() {
        let mut outputs = Vec::with_capacity(windows.len());
        for (&s, b) in plan.starts.iter().zip(&windows) {
            let ts = Tensor::full(t as f64, plan.window, &device)?.to_dtype(dtype)?;
            // Detached so each window's autograd graph is freed at once.
            outputs.push(model.predict_noise(&x.narrow(0, s, plan.window)?, &ts, b, &state.bank)?.detach());
        }
        let eps = blend_windows(&plan, &outputs)?;
        x = if opts.eta > 0.0 {
            let z: Vec<Tensor> = (0..total)
                .map(|f| frame_noise(opts.seed ^ ((i as u64 + 1) << 32), f, (c, n, n), dtype, &device))
                .collect::<Result<_>>()?;
            sampler.step_eta(&x, &eps, i, opts.eta, Some(&Tensor::cat(&z, 0)?))?
        } else {
            sampler.step(&x, &eps, i)?
        };
        log::debug!("sampler step {}/{} (t={t})", i + 1, sampler.timesteps().len());
    }
    model.codec.decode(&LatentVolume::new(x, model.codec.factor())?)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &ImageFrame, b: &ImageFrame) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Writes frames as a YUV4MPEG2 stream (4:4:4, full range BT.601).
pub fn write_y4m(path: &Path, frames: &[ImageFrame], fps: u32) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Shape("no frames to write".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    write!(out, "YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 C444\n").map_err(io)?;
    for f in frames {
        out.write_all(b"FRAME\n").map_err(io)?;
        let mut planes = [vec![0u8; h * w], vec![0u8; h * w], vec![0u8; h * w]];
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = f.rgb(y, x).map(|v| v.clamp(0.0, 1.0) * 255.0);
                let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
                let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
                for (p, v) in planes.iter_mut().zip([luma, cb, cr]) {
                    p[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        for p in &planes {
            out.write_all(p).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}
