use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nvs_bench::fixture;
use nvs_core::model::forward_full;
use nvs_core::Paradigm;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_full");
    group.sample_size(10);
    for paradigm in [Paradigm::CoRefinement, Paradigm::LvsmDecoderOnly] {
        for n in [2, 4, 8, 16] {
            let f = fixture(paradigm, n, 1);
            group.bench_with_input(BenchmarkId::new(paradigm.name(), n), &f, |b, f| {
                b.iter(|| forward_full(&f.inputs, &f.targets, &f.params, &f.cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
