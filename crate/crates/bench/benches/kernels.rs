//! Microbenchmarks for the training hot paths: convolution forward and
//! backward, a full generator pass, SSIM, phantom synthesis and one Adam
//! update.

use cfsynth::eval::ssim;
use cfsynth::graph::Graph;
use cfsynth::models::{build_generator, GeneratorArch, TargetClass};
use cfsynth::params::{adam_step, AdamHp, GradMap, ParamStore};
use cfsynth::phantom::{synthesize_subject, GenParams};
use cfsynth::tensor::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

fn conv_store(rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(rng, &[16, 64, 64]));
    s.insert("w", rand_tensor(rng, &[16, 16, 3, 3]));
    s.insert("b", rand_tensor(rng, &[16]));
    s
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = conv_store(&mut rng);
    c.bench_function("conv2d_16x64x64_forward", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.param(&store, "x").unwrap();
            let w = g.param(&store, "w").unwrap();
            let bb = g.param(&store, "b").unwrap();
            black_box(g.conv2d(x, w, bb, 1, 1).unwrap());
        })
    });
    let target = rand_tensor(&mut rng, &[16, 64, 64]);
    c.bench_function("conv2d_16x64x64_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.param(&store, "x").unwrap();
            let w = g.param(&store, "w").unwrap();
            let bb = g.param(&store, "b").unwrap();
            let y = g.conv2d(x, w, bb, 1, 1).unwrap();
            let t = g.input(target.clone());
            let loss = g.mse_mean(y, t).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn bench_generator(c: &mut Criterion) {
    let arch = GeneratorArch::desk();
    let store: ParamStore<f32> = arch.init_params(7);
    let img = synthesize_subject(3, &GenParams::default()).unwrap().baseline;
    c.bench_function("generator_forward_64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.input(img.to_tensor());
            black_box(build_generator(&mut g, &arch, &store, x, TargetClass::Inactive).unwrap());
        })
    });
}

fn bench_ssim(c: &mut Criterion) {
    let a = synthesize_subject(3, &GenParams::default()).unwrap().baseline;
    let b2 = synthesize_subject(4, &GenParams::default()).unwrap().baseline;
    c.bench_function("ssim_64", |b| b.iter(|| black_box(ssim(&a, &b2).unwrap())));
}

fn bench_phantom(c: &mut Criterion) {
    let params = GenParams::default();
    let mut seed = 0u64;
    c.bench_function("synthesize_subject_64", |b| {
        b.iter(|| {
            seed = seed.wrapping_add(1);
            black_box(synthesize_subject(seed, &params).unwrap());
        })
    });
}

fn bench_adam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.insert("w", rand_tensor(&mut rng, &[128, 128, 3, 3]));
    let mut grads = GradMap::new();
    grads.insert("w".into(), rand_tensor(&mut rng, &[128, 128, 3, 3]));
    c.bench_function("adam_step_147k_params", |b| {
        b.iter(|| adam_step(&mut store, &grads, AdamHp::gan()).unwrap())
    });
}

criterion_group!(benches, bench_conv2d, bench_generator, bench_ssim, bench_phantom, bench_adam);
criterion_main!(benches);
