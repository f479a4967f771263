use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use procam_bench::{batch, dataset, model};
use procam_core::training::ModelConfig;

fn full_vs_simplified(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for size in [64usize, 128] {
        let (_, data) = dataset(size, 4);
        let full = model(&data, ModelConfig::default());
        let simple = full.simplify().expect("simplify");
        let x = batch(&data.val_cam);
        group.throughput(Throughput::Elements(x.n() as u64));
        group.bench_with_input(BenchmarkId::new("full", size), &x, |b, x| b.iter(|| full.predict(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("simplified", size), &x, |b, x| b.iter(|| simple.predict(x).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, full_vs_simplified);
criterion_main!(benches);
