use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use mcn_core::data::{generate, sample_negative, Dataset, GenConfig};
use mcn_core::evaluation::auc;
use mcn_core::model::{Model, Scorer};
use mcn_core::param::seeded_rng;
use mcn_core::training::{batch_step, initial_model, Example, TrainConfig};

fn setup() -> (Dataset, Model, TrainConfig) {
    let ds = generate(&GenConfig { train: 40, val: 4, test: 4, ..GenConfig::default() }).unwrap();
    let cfg = TrainConfig::default();
    let model = initial_model(&ds, &cfg).unwrap();
    (ds, model, cfg)
}

fn backbone(c: &mut Criterion) {
    let (ds, model, _) = setup();
    let pixels = ds.train.items[0].pixels();
    c.bench_function("backbone forward 32x32", |b| b.iter(|| model.features_of(black_box(&pixels)).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let (ds, model, cfg) = setup();
    let mut rng = seeded_rng(1, 1);
    let pool = ds.train.pool();
    let mut batch = Vec::new();
    for o in &ds.train.outfits[..16] {
        batch.push(Example { items: ds.train.outfit_items(o), label: 1 });
        let neg = sample_negative(o, &ds.train.items, &pool, &mut rng).unwrap();
        batch.push(Example { items: ds.train.outfit_items(&neg), label: 0 });
    }
    let mut group = c.benchmark_group("batch step");
    group.sample_size(10);
    group.bench_function("32 outfits with gradients", |b| {
        b.iter(|| batch_step(&model, black_box(&batch), &cfg.weights, true).unwrap())
    });
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (ds, model, _) = setup();
    let items = ds.train.outfit_items(&ds.train.outfits[0]);
    c.bench_function("score outfit, cold features", |b| {
        b.iter_batched(|| Scorer::new(&model).unwrap(), |s| s.score(black_box(&items)).unwrap(), BatchSize::SmallInput)
    });
    let warm = Scorer::new(&model).unwrap();
    warm.score(&items).unwrap();
    c.bench_function("score outfit, cached features", |b| b.iter(|| warm.score(black_box(&items)).unwrap()));
}

fn ranking(c: &mut Criterion) {
    let mut rng = seeded_rng(2, 2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
    c.bench_function("auc 10k", |b| b.iter(|| auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, backbone, training_step, scoring, ranking);
criterion_main!(benches);
