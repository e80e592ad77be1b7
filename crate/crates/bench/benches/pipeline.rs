//! Pipeline-level benchmarks: dense optical flow between frames, blur
//! synthesis, and one pyramid inference step at a reduced width.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deblurnet_core::dataset::blur::{apply_blur, random_blur_kernel};
use deblurnet_core::dataset::flow::estimate_flow;
use deblurnet_core::dataset::synthetic::textured_image;
use deblurnet_core::{DeblurNet, ImageBuf};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_flow(c: &mut Criterion) {
    let a = textured_image(128, 96, 1);
    let b_img: ImageBuf = a.shift_by(0.7, -0.4);
    c.bench_function("lk flow @128×96", |bench| {
        bench.iter(|| estimate_flow(black_box(&a), black_box(&b_img)).unwrap())
    });
}

fn bench_blur_synthesis(c: &mut Criterion) {
    let sharp = textured_image(128, 96, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kernel = random_blur_kernel(&mut rng);
    c.bench_function("apply_blur random PSF @128×96", |bench| {
        bench.iter(|| apply_blur(black_box(&sharp), &kernel))
    });
}

fn bench_pyramid_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = DeblurNet::<f32>::new(0.25, false, &mut rng).unwrap();
    let g = textured_image(128, 128, 5).to_tensor();
    c.bench_function("pyramid forward width¼ @128²", |bench| {
        bench.iter(|| net.forward_pyramid(black_box(&g), false).unwrap())
    });
}

criterion_group!(pipeline, bench_flow, bench_blur_synthesis, bench_pyramid_step);
criterion_main!(pipeline);
