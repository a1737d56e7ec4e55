//! Procedural "face" videos and the on-disk corpus layout.
//!
//! ```text
//! <root>/manifest.jsonl            one ManifestRecord per line
//! <root>/clip_0000/meta.json       ClipMeta: identity, per-frame metadata, trajectory
//! <root>/clip_0000/frame_0000.png  8-bit RGB frames
//! ```
//!
//! Each video is one identity (skin, eye and background colours, head
//! size) following smooth random trajectories for head position, gaze and
//! mouth opening.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{worker_rng, Ellipse, FaceBox, FrameMeta, Gaze, SourceTag, VideoClip};
use crate::frame::ImageFrame;
use crate::{Error, Result};

/// Largest rendered gaze angle; the pupil sits at the rim of the eye there.
pub const MAX_GAZE_DEG: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 8,
            frames: 64,
            height: 64,
            width: 64,
            seed: 0,
            supersample: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Clip directory relative to the corpus root.
    pub clip: String,
    pub frames: usize,
    pub identity_id: u64,
    pub height: usize,
    pub width: usize,
}

/// Sum of two sinusoids over normalised time u in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub base: f64,
    pub amp: [f64; 2],
    pub cycles: [f64; 2],
    pub phase: [f64; 2],
}

impl Wave {
    fn random(rng: &mut impl Rng, base: f64, amp: f64, max_cycles: f64) -> Self {
        let split: f64 = rng.gen_range(0.3..0.7);
        Self {
            base,
            amp: [amp * split, amp * (1.0 - split)],
            cycles: [rng.gen_range(0.5..max_cycles), rng.gen_range(0.5..max_cycles)],
            phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
        }
    }

    pub fn at(&self, u: f64) -> f64 {
        self.base
            + (0..2)
                .map(|k| self.amp[k] * (TAU * self.cycles[k] * u + self.phase[k]).sin())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    pub bg_top: [f32; 3],
    pub bg_bottom: [f32; 3],
    pub rects: Vec<Rect>,
    /// Head radii as fractions of the frame width and height.
    pub rx: f64,
    pub ry: f64,
}

/// Everything the renderer needs for one video; positions are fractions of
/// the frame size, angles are degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoParams {
    pub appearance: Appearance,
    pub cx: Wave,
    pub cy: Wave,
    pub yaw: Wave,
    pub pitch: Wave,
    pub mouth: Wave,
}

impl VideoParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut color = |lo: f32, hi: f32| -> [f32; 3] { [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)] };
        let skin = color(0.45, 0.95);
        let iris = color(0.0, 0.3);
        let lips = color(0.2, 0.5);
        let bg_top = color(0.05, 0.95);
        let bg_bottom = color(0.05, 0.95);
        let rects = (0..2)
            .map(|_| {
                let x0 = rng.gen_range(0.0..0.8);
                let y0 = rng.gen_range(0.0..0.8);
                Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(0.1..0.4),
                    y1: y0 + rng.gen_range(0.1..0.4),
                    color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                }
            })
            .collect();
        let rx = rng.gen_range(0.2..0.26);
        let ry = rx * rng.gen_range(1.1..1.3);
        let gaze_amp = rng.gen_range(2.0..30.0);
        let cx_amp = rng.gen_range(0.04..0.14);
        let cy_amp = rng.gen_range(0.02..0.08);
        Self {
            appearance: Appearance {
                skin,
                iris,
                lips,
                bg_top,
                bg_bottom,
                rects,
                rx,
                ry,
            },
            cx: Wave::random(rng, 0.5, cx_amp, 2.0),
            cy: Wave::random(rng, 0.5, cy_amp, 2.0),
            yaw: Wave::random(rng, 0.0, gaze_amp, 4.0),
            pitch: Wave::random(rng, 0.0, 0.5 * gaze_amp, 4.0),
            mouth: Wave::random(rng, 0.5, 0.5, 3.0),
        }
    }

    pub fn state(&self, t: usize, frames: usize, height: usize, width: usize) -> FaceState {
        let u = t as f64 / frames.max(1) as f64;
        let a = &self.appearance;
        FaceState {
            head: Ellipse {
                cx: self.cx.at(u) * width as f64,
                cy: self.cy.at(u) * height as f64,
                rx: a.rx * width as f64,
                ry: a.ry * height as f64,
            },
            gaze: Gaze {
                yaw: self.yaw.at(u).clamp(-MAX_GAZE_DEG, MAX_GAZE_DEG),
                pitch: self.pitch.at(u).clamp(-MAX_GAZE_DEG, MAX_GAZE_DEG),
            },
            mouth: self.mouth.at(u).clamp(0.0, 1.0),
        }
    }
}

/// Geometry of one rendered frame in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceState {
    pub head: Ellipse,
    pub gaze: Gaze,
    pub mouth: f64,
}

impl FaceState {
    pub fn eyes(&self) -> [Ellipse; 2] {
        let h = &self.head;
        [-1.0, 1.0].map(|side| Ellipse {
            cx: h.cx + side * 0.4 * h.rx,
            cy: h.cy - 0.2 * h.ry,
            rx: 0.24 * h.rx,
            ry: 0.16 * h.ry,
        })
    }

    pub fn pupil_radius(&self) -> f64 {
        0.5 * self.eyes()[0].ry
    }

    /// Pupil centers: linear in gaze angle, reaching the eye rim at the
    /// maximum angle.
    pub fn pupils(&self) -> [(f64, f64); 2] {
        let r = self.pupil_radius();
        self.eyes().map(|e| {
            (
                e.cx + (e.rx - r) * self.gaze.yaw / MAX_GAZE_DEG,
                e.cy - (e.ry - r) * self.gaze.pitch / MAX_GAZE_DEG,
            )
        })
    }

    /// Inverse of [`Self::pupils`] from the left pupil center.
    pub fn gaze_from_pupil(&self, pupil: (f64, f64)) -> Gaze {
        let r = self.pupil_radius();
        let e = self.eyes()[0];
        Gaze {
            yaw: (pupil.0 - e.cx) / (e.rx - r) * MAX_GAZE_DEG,
            pitch: -(pupil.1 - e.cy) / (e.ry - r) * MAX_GAZE_DEG,
        }
    }

    pub fn mouth_ellipse(&self) -> Ellipse {
        let h = &self.head;
        Ellipse {
            cx: h.cx,
            cy: h.cy + 0.45 * h.ry,
            rx: 0.35 * h.rx,
            ry: (0.04 + 0.16 * self.mouth) * h.ry,
        }
    }

    pub fn face_box(&self, height: usize, width: usize) -> FaceBox {
        let h = &self.head;
        let x0 = (h.cx - h.rx).floor().clamp(0.0, width as f64) as usize;
        let x1 = (h.cx + h.rx).ceil().clamp(0.0, width as f64) as usize;
        let y0 = (h.cy - h.ry).floor().clamp(0.0, height as f64) as usize;
        let y1 = (h.cy + h.ry).ceil().clamp(0.0, height as f64) as usize;
        FaceBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

const WHITE: [f32; 3] = [0.96, 0.96, 0.94];

fn shade(a: &Appearance, s: &FaceState, eyes: &[Ellipse; 2], pupils: &[(f64, f64); 2], y: f64, x: f64, height: usize, width: usize) -> [f32; 3] {
    if s.head.contains(y, x) {
        let r2 = s.pupil_radius().powi(2);
        for (e, p) in eyes.iter().zip(pupils) {
            if e.contains(y, x) {
                let d2 = (x - p.0).powi(2) + (y - p.1).powi(2);
                return if d2 <= r2 { a.iris } else { WHITE };
            }
        }
        if s.mouth_ellipse().contains(y, x) {
            return a.lips;
        }
        return a.skin;
    }
    let (u, v) = (x / width as f64, y / height as f64);
    for r in &a.rects {
        if u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1 {
            return r.color;
        }
    }
    let t = v as f32;
    [0, 1, 2].map(|c| a.bg_top[c] * (1.0 - t) + a.bg_bottom[c] * t)
}

pub fn render_frame(params: &VideoParams, state: &FaceState, height: usize, width: usize, supersample: usize) -> ImageFrame {
    let ss = supersample.max(1);
    let eyes = state.eyes();
    let pupils = state.pupils();
    let mut frame = ImageFrame::zeros(height, width);
    let norm = 1.0 / (ss * ss) as f32;
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0f32; 3];
            for j in 0..ss {
                for i in 0..ss {
                    let py = y as f64 + (j as f64 + 0.5) / ss as f64;
                    let px = x as f64 + (i as f64 + 0.5) / ss as f64;
                    let c = shade(&params.appearance, state, &eyes, &pupils, py, px, height, width);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            frame.set_rgb(y, x, acc.map(|v| (v * norm).clamp(0.0, 1.0)));
        }
    }
    frame
}

/// Renders video `index` of the corpus in memory.
pub fn render_video(config: &SynthConfig, index: usize) -> (VideoClip, VideoParams) {
    let mut rng = worker_rng(config.seed, index as u64);
    let params = VideoParams::random(&mut rng);
    let (h, w) = (config.height, config.width);
    let mut frames = Vec::with_capacity(config.frames);
    let mut meta = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let s = params.state(t, config.frames, h, w);
        frames.push(render_frame(&params, &s, h, w, config.supersample));
        meta.push(FrameMeta {
            face_box: s.face_box(h, w),
            gaze: Some(s.gaze),
            head: Some(s.head),
        });
    }
    let clip = VideoClip {
        frames,
        meta,
        identity_id: index as u64,
        source_tag: SourceTag::Real,
    };
    (clip, params)
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub identity_id: u64,
    pub source_tag: SourceTag,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FrameMeta>,
    #[serde(default)]
    pub trajectory: Option<VideoParams>,
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:04}")
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the corpus under `root` and returns the manifest records.
pub fn synth_corpus(root: &Path, config: &SynthConfig) -> Result<Vec<ManifestRecord>> {
    if config.height % 16 != 0 || config.width % 16 != 0 || config.frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "corpus frames must be a positive count of multiples of 16 in size, got {} frames of {}x{}",
            config.frames, config.height, config.width
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(config.n_videos);
    for index in 0..config.n_videos {
        let (clip, params) = render_video(config, index);
        let name = clip_dir_name(index);
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in clip.frames.iter().enumerate() {
            frame.save_png(&dir.join(frame_file_name(t)))?;
        }
        let meta = ClipMeta {
            identity_id: clip.identity_id,
            source_tag: clip.source_tag,
            height: config.height,
            width: config.width,
            frames: clip.meta.clone(),
            trajectory: Some(params),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        records.push(ManifestRecord {
            clip: name,
            frames: clip.len(),
            identity_id: clip.identity_id,
            height: config.height,
            width: config.width,
        });
    }
    write_manifest(root, &records)?;
    Ok(records)
}

pub fn write_manifest(root: &Path, records: &[ManifestRecord]) -> Result<()> {
    let path = root.join("manifest.jsonl");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("manifest record", e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_clip_meta(dir: &Path) -> Result<ClipMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn clip_from_meta(dir: &Path, meta: ClipMeta) -> Result<VideoClip> {
    let frames = (0..meta.frames.len())
        .map(|t| ImageFrame::load_png(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, meta.frames, meta.identity_id, meta.source_tag)
}

/// Loads one clip directory (`meta.json` plus numbered frames).
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    clip_from_meta(dir, read_clip_meta(dir)?)
}

/// A loaded corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub clips: Vec<VideoClip>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let records = read_manifest(root)?;
        let mut clips = Vec::with_capacity(records.len());
        for r in &records {
            let dir = root.join(&r.clip);
            let meta = read_clip_meta(&dir)?;
            if meta.frames.len() != r.frames {
                return Err(Error::Config(format!(
                    "{}: manifest lists {} frames, meta.json has {}",
                    r.clip,
                    r.frames,
                    meta.frames.len()
                )));
            }
            clips.push(clip_from_meta(&dir, meta)?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
            clips,
        })
    }

    /// Per-clip frame metadata without decoding any frames.
    pub fn load_meta(root: &Path) -> Result<Vec<(ManifestRecord, ClipMeta)>> {
        read_manifest(root)?
            .into_iter()
            .map(|r| {
                let m = read_clip_meta(&root.join(&r.clip))?;
                Ok((r, m))
            })
            .collect()
    }

    pub fn from_clips(clips: Vec<VideoClip>) -> Self {
        let records = clips
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestRecord {
                clip: clip_dir_name(i),
                frames: c.len(),
                identity_id: c.identity_id,
                height: c.height(),
                width: c.width(),
            })
            .collect();
        Self {
            root: PathBuf::new(),
            records,
            clips,
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Keeps only the clips at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }
}
