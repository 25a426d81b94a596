use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use stsens_core::data::{
    generate_synthetic, prepare, DateRange, PrepareConfig, Prepared, SplitSpec, SynthConfig, WindowSpec,
};
use stsens_core::model::{Mode, ModelConfig, Tft};
use stsens_core::sensitivity::{delta_sweep, evaluation_windows, FeatureRef, MorrisTarget};
use stsens_core::WindowBatch;

fn fixture() -> (Tft, WindowBatch, Prepared, DateRange) {
    let panel = generate_synthetic(&SynthConfig {
        counties: 4,
        days: 120,
        ..Default::default()
    })
    .unwrap();
    let split = SplitSpec::tail(&panel.dates, 15, 15).unwrap();
    let p = prepare(&panel, &PrepareConfig::new(split, WindowSpec::default())).unwrap();
    let batch = p.train.select(&(0..64).collect::<Vec<_>>());
    let model = Tft::new(ModelConfig::for_batch(&batch, 16, 4, 0.1, 0)).unwrap();
    (model, batch, p, split.train)
}

fn forward(c: &mut Criterion) {
    let (model, batch, ..) = fixture();
    c.bench_function("forward_eval_64_windows", |b| {
        b.iter(|| model.forward(black_box(&batch), Mode::Eval, 0).unwrap())
    });
}

fn backward(c: &mut Criterion) {
    let (model, batch, ..) = fixture();
    c.bench_function("loss_and_grads_64_windows", |b| {
        b.iter(|| model.loss_and_grads(black_box(&batch), 7).unwrap())
    });
}

fn morris(c: &mut Criterion) {
    let (model, _, p, range) = fixture();
    let windows = evaluation_windows(&p.scaled, &range, &WindowSpec::default()).unwrap();
    c.bench_function("morris_one_feature_three_deltas", |b| {
        b.iter(|| {
            delta_sweep(
                &model,
                black_box(&windows),
                FeatureRef::Observed(0),
                "obs_0",
                &[0.001, 0.005, 0.05],
                MorrisTarget::Column(0),
                1.0,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, backward, morris
}
criterion_main!(benches);
