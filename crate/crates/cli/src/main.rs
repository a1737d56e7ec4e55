mod summary;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use portrait_core::animate::{animate, psnr, write_y4m};
use portrait_core::audit;
use portrait_core::checkpoint::{self, parse_dtype, Stage};
use portrait_core::config::RunConfig;
use portrait_core::datapipe::corpus::{frame_file_name, SynthConfig};
use portrait_core::datapipe::{filter_top_fraction, gaze_change_score, load_clip, mask_face, synth_corpus, Corpus, FaceBox};
use portrait_core::frame::ImageFrame;
use portrait_core::model::PortraitModel;
use portrait_core::trainer::{run_stage, StageConfig};

use summary::RunSummary;

#[derive(Parser, Debug)]
#[command(name = "portrait", version, about = "Reference-conditioned portrait animation")]
struct Cli {
    /// TOML run config; profile defaults fill anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural face-video corpus with manifest.
    Synth(SynthArgs),
    /// Validate a corpus, score gaze change and write masked driving frames.
    Preprocess(PreprocessArgs),
    /// Train DrivenEncoder, UNet and ReferenceNet.
    TrainStage1(TrainArgs),
    /// Continue stage 1 on the clips with the largest gaze change.
    FinetuneGaze(TrainArgs),
    /// Insert temporal layers and train only those.
    TrainStage2(TrainArgs),
    /// Animate a reference image with a driving clip.
    Animate(AnimateArgs),
    /// Run the structural invariant checks on a fresh model.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction kept by the gaze filter.
    #[arg(long, default_value_t = 0.05)]
    gaze_fraction: f64,
    /// Skip writing masked frames; only score and validate.
    #[arg(long)]
    no_frames: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Input checkpoint. Stage 1 starts from a fresh model when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output checkpoint directory; also receives the log and run summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnimateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Driving clip directory (`meta.json` plus frames).
    #[arg(long)]
    driving: PathBuf,
    /// Reference PNG. Defaults to a frame of the driving clip.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Face box `x,y,w,h` of an external reference image.
    #[arg(long, requires = "reference")]
    face_box: Option<String>,
    /// Driving frame used as reference when `--reference` is absent.
    #[arg(long, default_value_t = 0)]
    reference_frame: usize,
    /// Only the first N driving frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a raw YUV4MPEG2 video.
    #[arg(long)]
    y4m: bool,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Directory for the run summary.
    #[arg(long)]
    out: PathBuf,
    /// Random conditioning bundles for the neutrality check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Steps of each short training run used for freeze verification.
    #[arg(long, default_value_t = 2)]
    freeze_steps: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let mut summary = RunSummary::start(&cli.command_name(), &cfg, cli.config.as_deref(), &cli.overrides);
    let started = Instant::now();
    let (out, result) = match &cli.command {
        Command::Synth(a) => (a.out.clone(), synth(&cfg, a)?),
        Command::Preprocess(a) => (a.out.clone(), preprocess(a)?),
        Command::TrainStage1(a) => (a.out.clone(), train(&cfg, Stage::Stage1, a)?),
        Command::FinetuneGaze(a) => (a.out.clone(), train(&cfg, Stage::GazeFt, a)?),
        Command::TrainStage2(a) => (a.out.clone(), train(&cfg, Stage::Stage2, a)?),
        Command::Animate(a) => (a.out.clone(), animate_cmd(&cfg, a)?),
        Command::Audit(a) => (a.out.clone(), audit_cmd(&cfg, a)?),
    };
    let passed = result.get("passed").and_then(Value::as_bool).unwrap_or(true);
    summary.finish(result, started.elapsed().as_secs_f64());
    let path = summary.write(&out)?;
    log::info!("run summary written to {}", path.display());
    if !passed {
        bail!("audit failed; see {}", path.display());
    }
    Ok(())
}

impl Cli {
    fn command_name(&self) -> String {
        match self.command {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::TrainStage1(_) => "train-stage1",
            Command::FinetuneGaze(_) => "finetune-gaze",
            Command::TrainStage2(_) => "train-stage2",
            Command::Animate(_) => "animate",
            Command::Audit(_) => "audit",
        }
        .into()
    }
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<Value> {
    let sc = SynthConfig {
        n_videos: a.videos,
        frames: a.frames,
        height: a.size,
        width: a.size,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let records = synth_corpus(&a.out, &sc)?;
    Ok(json!({ "synth": sc, "clips": records.len(), "manifest": a.out.join("manifest.jsonl") }))
}

fn preprocess(a: &PreprocessArgs) -> Result<Value> {
    let corpus = Corpus::load(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let metas: Vec<_> = corpus.clips.iter().map(|c| c.meta.clone()).collect();
    let selection = filter_top_fraction(&metas, a.gaze_fraction);
    let mut clips = Vec::new();
    for (i, (clip, record)) in corpus.clips.iter().zip(&corpus.records).enumerate() {
        if !a.no_frames {
            let dir = a.out.join(&record.clip);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (t, (f, m)) in clip.frames.iter().zip(&clip.meta).enumerate() {
                mask_face(f, &m.face_box).save_png(&dir.join(frame_file_name(t)))?;
            }
        }
        clips.push(json!({
            "clip": record.clip,
            "frames": clip.len(),
            "gaze_change": gaze_change_score(&clip.meta),
            "selected": selection.selected.contains(&i),
        }));
    }
    Ok(json!({ "corpus": a.corpus, "gaze_fraction": a.gaze_fraction, "clips": clips }))
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> &StageConfig {
    cfg.stage(stage).expect("trainable stage")
}

fn train(cfg: &RunConfig, stage: Stage, a: &TrainArgs) -> Result<Value> {
    let device = Device::Cpu;
    let (mut model, input) = match &a.ckpt {
        Some(dir) => {
            let (model, manifest) = checkpoint::load(dir, &device)?;
            (model, manifest.stage)
        }
        None if stage == Stage::Stage1 => {
            let dtype = parse_dtype(&cfg.dtype)?;
            (PortraitModel::build(&cfg.model, cfg.seed, dtype, &device)?, Stage::Init)
        }
        None => bail!("{stage} needs --ckpt pointing at a {} checkpoint", stage.prerequisite().expect("has one")),
    };
    stage.check_input(input)?;
    let corpus = Corpus::load(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let sc = stage_config(cfg, stage);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = run_stage(&mut model, input, stage, sc, &corpus, &cfg.schedule()?, cfg.seed, Some(&mut log))?;
    drop(log);
    let prior = match &a.ckpt {
        Some(dir) => checkpoint::read_manifest(dir)?.step_count,
        None => 0,
    };
    let run = json!({ "config": cfg, "input": a.ckpt, "corpus": a.corpus });
    checkpoint::save(&a.out, &model, stage, prior + report.steps as u64, run)?;
    let head = report.losses.iter().take(50).sum::<f64>() / report.losses.len().clamp(1, 50) as f64;
    Ok(json!({
        "stage": stage,
        "input_stage": input,
        "steps": report.steps,
        "skipped_steps": report.skipped_steps,
        "loss_first50": head,
        "loss_last100": report.tail_mean(100),
        "trainable_tensors": report.trainable_tensors,
        "frozen_tensors": report.frozen_tensors,
        "log": log_path,
        "checkpoint": a.out,
    }))
}

fn parse_box(s: &str) -> Result<FaceBox> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("face box `{s}` must be x,y,w,h"))?;
    match v[..] {
        [x, y, w, h] => Ok(FaceBox { x, y, w, h }),
        _ => bail!("face box `{s}` must have four fields"),
    }
}

fn animate_cmd(cfg: &RunConfig, a: &AnimateArgs) -> Result<Value> {
    let (model, manifest) = checkpoint::load(&a.ckpt, &Device::Cpu)?;
    let mut driving = load_clip(&a.driving).with_context(|| format!("loading driving clip {}", a.driving.display()))?;
    if let Some(n) = a.frames {
        let n = n.min(driving.len());
        driving = driving.select(&(0..n).collect::<Vec<_>>());
    }
    let (reference, mask, face_box) = match &a.reference {
        Some(path) => {
            let image = ImageFrame::load_png(path)?;
            let b = match &a.face_box {
                Some(s) => parse_box(s)?,
                None => FaceBox::full(image.height(), image.width()),
            };
            let mask = b.mask(image.height(), image.width());
            (image, mask, b)
        }
        None => {
            let k = a.reference_frame;
            if k >= driving.len() {
                bail!("reference frame {k} outside the {}-frame driving clip", driving.len());
            }
            (driving.frames[k].clone(), driving.foreground(k), driving.meta[k].face_box)
        }
    };
    let opts = cfg.animate_options();
    let out = animate(&model, &cfg.schedule()?, &reference, &mask, face_box, &driving, &opts)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (t, f) in out.iter().enumerate() {
        f.save_png(&a.out.join(frame_file_name(t)))?;
    }
    if a.y4m {
        write_y4m(&a.out.join("animation.y4m"), &out, 25)?;
    }
    let frame_psnr: Vec<f64> = out.iter().zip(&driving.frames).map(|(o, d)| psnr(o, d)).collect();
    Ok(json!({
        "checkpoint": a.ckpt,
        "checkpoint_stage": manifest.stage,
        "driving": a.driving,
        "frames": out.len(),
        "options": opts,
        "psnr_vs_driving": frame_psnr,
    }))
}

fn audit_cmd(cfg: &RunConfig, a: &AuditArgs) -> Result<Value> {
    let mut report = audit::run_audit(&cfg.model, cfg.seed, a.trials)?;
    if a.freeze_steps > 0 {
        report.checks.extend(freeze_checks(cfg, a.freeze_steps, &a.out)?);
    }
    for c in &report.checks {
        log::info!("{} {}: {} (bound {}) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound, c.detail);
    }
    Ok(json!({ "passed": report.passed(), "checks": report.checks }))
}

/// Short stage-1 and stage-2 runs on a small synthetic corpus.
fn freeze_checks(cfg: &RunConfig, steps: usize, scratch: &Path) -> Result<Vec<audit::CheckResult>> {
    let size = cfg.model.image_size;
    let corpus_dir = scratch.join("audit_corpus");
    synth_corpus(
        &corpus_dir,
        &SynthConfig {
            n_videos: 2,
            frames: 24,
            height: size,
            width: size,
            seed: cfg.seed,
            supersample: 1,
        },
    )?;
    let corpus = Corpus::load(&corpus_dir)?;
    let schedule = cfg.schedule()?;
    let mut model = PortraitModel::build(&cfg.model, cfg.seed, parse_dtype(&cfg.dtype)?, &Device::Cpu)?;
    let short = |stage| StageConfig {
        steps,
        ..stage_config(cfg, stage).clone()
    };
    let s1 = audit::freeze_verification(&mut model, Stage::Init, Stage::Stage1, &short(Stage::Stage1), &corpus, &schedule, cfg.seed)?;
    let s2 = audit::freeze_verification(&mut model, Stage::GazeFt, Stage::Stage2, &short(Stage::Stage2), &corpus, &schedule, cfg.seed)?;
    fs::remove_dir_all(&corpus_dir).ok();
    Ok(vec![s1, s2])
}
