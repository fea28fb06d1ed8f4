use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pfcpgan_core::data::to_batch;
use pfcpgan_core::layers::{Conv2d, ConvPath, Param};
use pfcpgan_core::{
    generate_synthetic_dataset, init_model, DatasetSpec, GeneratorConfig, ImageSample, Tensor,
    TrainConfig, Trainer,
};

/// Deterministic values in `[-scale, scale)`.
fn pattern(len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|i| ((i * 7919) % 97) as f32 / 48.5 * scale - scale).collect()
}

fn conv_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    for (in_ch, out_ch, hw) in [(8, 4, 64), (16, 4, 32), (8, 8, 64)] {
        let conv = Conv2d {
            in_ch,
            out_ch,
            stride: 1,
            weight: Param {
                shape: vec![out_ch, in_ch, 3, 3],
                data: pattern(out_ch * in_ch * 9, 0.1),
            },
            bias: Param::zeros(&[out_ch]),
        };
        let x = Tensor::from_vec(in_ch, 16, hw, hw, pattern(in_ch * 16 * hw * hw, 1.0)).unwrap();
        let y = conv.forward(&x);
        for path in [ConvPath::Im2col, ConvPath::Direct] {
            let id = BenchmarkId::new(format!("{path:?}"), format!("{in_ch}->{out_ch}@{hw}"));
            group.bench_function(id, |b| {
                b.iter(|| {
                    let out = conv.forward_via(path, black_box(&x));
                    let mut g = conv.zeros_like();
                    black_box(conv.backward_via(path, &x, &y, Some(&mut g), true));
                    out
                })
            });
        }
    }
    group.finish();
}

fn reference_model() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        n_down: 5,
        embedding_dim: 128,
        ..GeneratorConfig::default()
    }
}

fn generator(c: &mut Criterion) {
    let samples = generate_synthetic_dataset(&DatasetSpec::default()).unwrap();
    let refs: Vec<&ImageSample> = samples.iter().take(32).collect();
    let x = to_batch::<f32>(&refs).unwrap();
    let state = init_model::<f32>(&reference_model(), 0).unwrap();
    c.bench_function("generator_forward_b32", |b| {
        b.iter(|| state.gen_profile.forward(black_box(&x)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let samples = generate_synthetic_dataset(&DatasetSpec::default()).unwrap();
    let config = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(&reference_model(), config).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("full_step_b32", |b| b.iter(|| trainer.step(&samples).unwrap()));
    group.finish();
}

criterion_group!(benches, conv_paths, generator, train_step);
criterion_main!(benches);
