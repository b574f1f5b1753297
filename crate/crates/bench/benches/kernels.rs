use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use trajguide_core::attention::{aligned_attention, AttentionTensors};
use trajguide_core::spectral::mix_latents;
use trajguide_core::{FilterSpec, LatentShape, LatentVideo, Tensor};

fn attention(c: &mut Criterion) {
    let frame = |seed: usize| {
        let m = |rows: usize, cols: usize, salt: usize| {
            Tensor::from_fn([rows, cols], |i| (((i[0] * 31 + i[1] * 17 + salt * 7 + seed) % 23) as f64 - 11.0) / 11.0)
        };
        AttentionTensors::new(m(256, 16, 0), m(256, 16, 1), m(256, 16, 2)).unwrap()
    };
    let frames: Vec<_> = (0..8).map(frame).collect();
    c.bench_function("aligned_attention 8x256x16", |b| b.iter(|| aligned_attention(black_box(&frames)).unwrap()));
}

fn mixing(c: &mut Criterion) {
    let shape = LatentShape {
        frames: 8,
        channels: 4,
        height: 32,
        width: 32,
    };
    let a = LatentVideo::noise(shape, 1.0, Tensor::zeros([4, 32, 32]), 0).unwrap();
    let b = LatentVideo::noise(shape, 1.0, Tensor::zeros([4, 32, 32]), 1).unwrap();
    let filter = FilterSpec::default();
    c.bench_function("mix_latents 8x4x32x32", |bench| {
        bench.iter(|| mix_latents(black_box(&a), black_box(&b), &filter).unwrap())
    });
}

criterion_group!(benches, attention, mixing);
criterion_main!(benches);
