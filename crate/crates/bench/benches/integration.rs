use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use vio_bench::{imu, offset_sweep};
use vio_core::geometry::Vec3;
use vio_core::integration_cache::CacheBank;
use vio_core::preintegration::{integrate_delta, NoiseParams};

fn sweep(c: &mut Criterion) {
    let samples = imu(3.0);
    let noise = NoiseParams::default();
    let z = Vec3::zeros();
    let anchor = 1.5;
    let targets = offset_sweep(anchor, 0.2, 50);
    let bank = CacheBank::new(noise, 0.05, CacheBank::capacity_for(0.2, 0.005))
        .with_samples(samples.clone())
        .unwrap();

    let mut g = c.benchmark_group("offset_sweep");
    g.bench_function("cached", |b| {
        b.iter_batched(
            || {
                let mut bank = bank.clone();
                bank.insert_frame(anchor, z, z);
                bank
            },
            |mut bank| {
                for &t in &targets {
                    black_box(bank.integrate_cached(anchor, t, &z, &z).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.bench_function("naive", |b| {
        b.iter(|| {
            for &t in &targets {
                black_box(integrate_delta(&samples, &z, &z, anchor, t, &noise).unwrap());
            }
        })
    });
    g.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
