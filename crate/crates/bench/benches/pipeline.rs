use std::hint::black_box;

use compat_reason_core::autodiff::Graph;
use compat_reason_core::colorfeat::{build_color_feature, color_histogram};
use compat_reason_core::compatnet::{forward_batch, forward_record};
use compat_reason_core::reasoning::{total_loss, RegularizerKind};
use compat_reason_core::record::OutfitRecord;
use compat_reason_core::training::{train, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn forward_passes(c: &mut Criterion) {
    let model = compat_reason_bench::model();
    let records = compat_reason_bench::corpus(64);
    let batch: Vec<&OutfitRecord> = records.iter().collect();

    c.bench_function("forward one outfit", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let pass = forward_record(&mut g, &model, &records[0]).unwrap();
            black_box(g.value(pass.y).data()[0])
        })
    });

    c.bench_function("forward batch of 64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let pass = forward_batch(&mut g, &model, &batch).unwrap();
            black_box(g.value(pass.y).data()[0])
        })
    });
}

fn gradient_passes(c: &mut Criterion) {
    let model = compat_reason_bench::model();
    let partition = model.config.partition();
    let records = compat_reason_bench::corpus(64);
    let batch: Vec<&OutfitRecord> = records.iter().collect();

    // alpha 0 stops at plain backprop; alpha 1 adds the two per-judgment
    // gradient passes and differentiates through them.
    for (name, alpha) in [("judgment gradients, batch 64", 0.0), ("reason gradients, batch 64", 1.0)]
    {
        c.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let pass = forward_batch(&mut g, &model, &batch).unwrap();
                let loss =
                    total_loss(
                        &mut g,
                        &pass,
                        &batch,
                        alpha,
                        RegularizerKind::CrossEntropy,
                        &partition,
                    )
                    .unwrap();
                let grads = g.grad(loss.total, &pass.vars.all(), false).unwrap();
                black_box(g.value(grads[0]).data()[0])
            })
        });
    }
}

fn training_epoch(c: &mut Criterion) {
    let records = compat_reason_bench::corpus(200);
    let config = TrainConfig { epochs: 1, alpha: 1.0, ..TrainConfig::default() };

    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("one epoch, 200 outfits", |b| {
        b.iter(|| {
            let outcome =
                train(&records, None, &compat_reason_bench::model().config, &config).unwrap();
            black_box(outcome.metrics[0].loss)
        })
    });
    group.finish();
}

fn color_features(c: &mut Criterion) {
    let pixels: Vec<(f64, f64, f64)> = (0..4096)
        .map(|i| {
            let t = i as f64 / 4096.0;
            (t, (t * 7.0).fract(), 1.0 - t * 0.5)
        })
        .collect();

    c.bench_function("color feature, 4096 pixels", |b| {
        b.iter(|| {
            let histogram = color_histogram(&pixels).unwrap();
            black_box(build_color_feature(&histogram).len())
        })
    });
}

criterion_group!(benches, forward_passes, gradient_passes, training_epoch, color_features);
criterion_main!(benches);
