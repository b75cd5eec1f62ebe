use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use psrp_core::data::{generate_synthetic, SynthConfig};
use psrp_core::decode::PostprocessConfig;
use psrp_core::eval::evaluate;
use psrp_core::model::infer_image;
use psrp_core::parallel;
use psrp_core::train::{batch_gradients, prepare_images, LossMode, PreparedImage};
use psrp_core::{Detector, RunConfig};

fn config() -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.toml");
    RunConfig::load(Some(&path), &[], None).unwrap()
}

fn gradients(c: &mut Criterion) {
    let cfg = config();
    let manifest = generate_synthetic(&SynthConfig::default(), 7, None).unwrap();
    let images = prepare_images(&manifest, cfg.train.input_size).unwrap();
    let model = Detector::new(&cfg.model, 0).unwrap();
    let ranges = cfg.assign.level_ranges(cfg.train.input_size).unwrap();
    let batch: Vec<&PreparedImage> = images.iter().take(4).collect();
    let mode = LossMode::for_iteration(0, &cfg);
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for deterministic in [true, false] {
        let mut cfg = cfg.clone();
        cfg.train.deterministic = deterministic;
        let name = if deterministic { "serial" } else { "parallel" };
        group.bench_function(BenchmarkId::new(name, batch.len()), |b| {
            b.iter(|| batch_gradients(&model, black_box(&batch), &cfg, &ranges, mode).unwrap())
        });
    }
    group.finish();

    let pp = PostprocessConfig::default();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.bench_function("serial", |b| {
        b.iter(|| images.iter().map(|i| infer_image(&model, i.id, &i.pixels, &pp).unwrap()).collect::<Vec<_>>())
    });
    group.bench_function("parallel", |b| {
        b.iter(|| parallel::map(&images, |i| infer_image(&model, i.id, &i.pixels, &pp).unwrap()))
    });
    group.finish();

    let sets: Vec<_> = images.iter().map(|i| infer_image(&model, i.id, &i.pixels, &PostprocessConfig { score_threshold: 0.0, ..pp.clone() }).unwrap()).collect();
    c.bench_function("evaluate", |b| b.iter(|| evaluate(black_box(&sets), &manifest).unwrap()));
}

criterion_group!(benches, gradients);
criterion_main!(benches);
