use criterion::{criterion_group, criterion_main, Criterion};
use vip_bench::{crescent, decoder};
use vip_core::forward::{ForwardKind, MeasurementSet};
use vip_core::{rng, GaussianVariational, TrainConfig, TrainState, Trainer};

fn joint_step(c: &mut Criterion) {
    let images: Vec<_> = (0..8).map(|_| crescent(16)).collect();
    let set = MeasurementSet::synthesize(&images, ForwardKind::Denoise, 15.0, &mut rng::seeded(0)).unwrap();
    let cfg = TrainConfig {
        iterations: usize::MAX,
        ..TrainConfig::default()
    };
    let mut r = rng::seeded(1);
    let g = decoder(32, 16);
    let qs = (0..8).map(|_| GaussianVariational::init(40, &mut r)).collect();
    let mut trainer = Trainer::new(TrainState::new(g, qs, &cfg), &set, cfg.clone()).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("joint_step_n8_ch32_16", |b| b.iter(|| trainer.step().unwrap()));
    group.finish();
}

criterion_group!(benches, joint_step);
criterion_main!(benches);
