use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use vio_bench::dataset;
use vio_core::pipeline::warm_window;

fn optimize(c: &mut Criterion) {
    let (data, config) = dataset(4.0);
    let mut g = c.benchmark_group("window");
    g.sample_size(20);
    for (name, enabled) in [("optimize_cached", true), ("optimize_uncached", false)] {
        let mut cfg = config.clone();
        cfg.cache_enabled = enabled;
        let window = warm_window(&data, &cfg, 60).unwrap();
        g.bench_function(name, |b| {
            b.iter_batched(|| window.clone(), |mut w| w.optimize().unwrap(), BatchSize::LargeInput)
        });
    }
    g.finish();
}

criterion_group!(benches, optimize);
criterion_main!(benches);
