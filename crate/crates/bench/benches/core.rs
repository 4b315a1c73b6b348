use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use crg_bench::{face, generator};
use crg_core::gbt::{invert_latent_gbt, GbtConfig};
use crg_core::image::ImageTensor;
use crg_core::metrics::{dhash, phash, whash};
use crg_core::models::{sample_latents, LatentGenerator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn hashes(c: &mut Criterion) {
    let img = face(64);
    c.bench_function("dhash 64px", |b| b.iter(|| dhash(black_box(&img)).unwrap()));
    c.bench_function("phash 64px", |b| b.iter(|| phash(black_box(&img)).unwrap()));
    c.bench_function("whash 64px", |b| b.iter(|| whash(black_box(&img)).unwrap()));
}

fn generator_forward(c: &mut Criterion) {
    let g = generator(32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for batch in [1usize, 32] {
        let z = sample_latents::<f32>(batch, 32, &mut rng);
        c.bench_function(&format!("generator forward 32px batch {batch}"), |b| {
            b.iter(|| g.generate(black_box(&z)).unwrap())
        });
    }
}

fn gradient_inversion(c: &mut Criterion) {
    let g = generator(32);
    let target = ImageTensor::stack(&[face(32)]).unwrap();
    let cfg = GbtConfig { steps: 10, ..Default::default() };
    c.bench_function("gradient inversion 10 steps", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| invert_latent_gbt(&g, &target, &cfg).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, hashes, generator_forward, gradient_inversion);
criterion_main!(benches);
