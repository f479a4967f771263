use criterion::{criterion_group, criterion_main, Criterion};
use procam_bench::dataset;
use procam_core::baseline::structured_light;
use procam_core::calib::{fov_mask, optimal_rect};
use procam_core::diffcore::sampler::grid_sample;
use procam_core::imaging::ssim;
use procam_core::warp::{tps_grid, TpsParams};
use procam_core::SamplingGrid;

fn primitives(c: &mut Criterion) {
    let (setup, data) = dataset(128, 2);
    let img = data.val_cam[0].to_tensor::<f32>();
    let grid = SamplingGrid::<f32>::identity(128, 128);
    c.bench_function("grid_sample 128²", |b| b.iter(|| grid_sample(&img, &grid)));
    let p = TpsParams::identity().0;
    c.bench_function("tps_grid 128²", |b| b.iter(|| tps_grid(&p, 128, 128)));
    c.bench_function("ssim 128²", |b| b.iter(|| ssim(&data.val_cam[0], &data.val_proj[0]).unwrap()));
    c.bench_function("fov_mask 128²", |b| b.iter(|| fov_mask(&data.surface, &data.dark).unwrap()));
    let mask = fov_mask(&data.surface, &data.dark).unwrap();
    c.bench_function("optimal_rect 128²", |b| b.iter(|| optimal_rect(&mask, 1.0).unwrap()));
    let mut group = c.benchmark_group("structured_light");
    group.sample_size(10);
    group.bench_function("decode 128²", |b| b.iter(|| structured_light(&setup, 0.05).unwrap()));
    group.finish();
}

criterion_group!(benches, primitives);
criterion_main!(benches);
