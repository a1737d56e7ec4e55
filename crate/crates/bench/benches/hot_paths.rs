use candle_core::{DType, Device, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;

use portrait_core::animate::{blend_windows, WindowPlan};
use portrait_core::datapipe::corpus::{render_video, SynthConfig};
use portrait_core::datapipe::{Corpus, Pipeline};
use portrait_core::frame::{ImageFrame, Mask};
use portrait_core::layers::conv2d_unfold;
use portrait_core::model::{ModelConfig, PortraitModel};
use portrait_core::trainer::StageConfig;

fn denoiser(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let model = PortraitModel::build(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
    let s = cfg.image_size;
    let reference = ImageFrame::filled(s, s, [0.4, 0.5, 0.6]);
    let mask = Mask::from_fn(s, s, |y, x| (16..48).contains(&y) && (16..48).contains(&x));
    let state = model.prepare_reference(&reference, &mask).unwrap();
    let frames = 4;
    let driving = Tensor::zeros((frames, 3, s, s), DType::F32, &Device::Cpu).unwrap();
    let bundle = model.bundle(&state, &driving).unwrap();
    let n = cfg.latent_size();
    let x = Tensor::randn(0f32, 1.0, (frames, 48, n, n), &Device::Cpu).unwrap();
    let t = Tensor::full(50f32, frames, &Device::Cpu).unwrap();
    c.bench_function("toy_predict_noise_4_frames", |b| {
        b.iter(|| model.predict_noise(black_box(&x), &t, &bundle, &state.bank).unwrap())
    });
    c.bench_function("toy_prepare_reference", |b| b.iter(|| model.prepare_reference(black_box(&reference), &mask).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = Tensor::randn(0f32, 1.0, (4, 64, 16, 16), &Device::Cpu).unwrap();
    let w = Tensor::randn(0f32, 0.1, (64, 64, 3, 3), &Device::Cpu).unwrap();
    c.bench_function("conv3x3_64ch_16px", |b| b.iter(|| conv2d_unfold(black_box(&x), &w, 1, 1).unwrap()));
}

fn blending(c: &mut Criterion) {
    let plan = WindowPlan::plan(200, 16, 8).unwrap();
    let outputs: Vec<Tensor> = plan
        .starts
        .iter()
        .map(|_| Tensor::randn(0f32, 1.0, (16, 4, 8, 8), &Device::Cpu).unwrap())
        .collect();
    c.bench_function("blend_200_frames_w16_o8", |b| b.iter(|| blend_windows(black_box(&plan), &outputs).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let sc = SynthConfig {
        n_videos: 4,
        ..SynthConfig::default()
    };
    let corpus = Corpus::from_clips((0..4).map(|i| render_video(&sc, i).0).collect());
    let cfg = StageConfig::defaults(portrait_core::checkpoint::Stage::Stage1, portrait_core::config::Profile::Toy);
    let pipe = Pipeline::new(corpus, cfg.pipeline()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    c.bench_function("pipeline_sample_toy", |b| b.iter(|| pipe.sample(&mut rng).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = denoiser, conv, blending, pipeline
}
criterion_main!(benches);
