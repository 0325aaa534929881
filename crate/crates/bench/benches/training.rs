use criterion::{criterion_group, criterion_main, Criterion};
use stylegraph_core::config::TrainConfig;
use stylegraph_core::data::{generate_toy_dataset, ToyDatasetSpec};
use stylegraph_core::segmentation::PluginRegistry;
use stylegraph_core::training::Trainer;

fn train_step(c: &mut Criterion) {
    let toy = generate_toy_dataset(&ToyDatasetSpec {
        n_images_per_domain: 32,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        base_width: 8,
        max_width: 32,
        mapping_hidden: 64,
        extractor_steps: 20,
        ..Default::default()
    };
    let mut trainer = Trainer::new(&cfg, &toy.dataset, &PluginRegistry::default()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("step_64px_b8_desk_widths", |bn| bn.iter(|| trainer.train_step(&toy.dataset).unwrap()));
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
