use std::hint::black_box;

use aide_core::detection::nms;
use aide_core::evalcost::average_precision;
use aide_core::feeder::{EmbeddingStore, EmbeddingVector};
use aide_core::geometry::iou;
use aide_core::rng::stream;
use aide_core::worldsim::{generate_world, SimWorldConfig, Split};
use aide_core::{BoundingBox, CategoryId, Detection};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = stream(seed, "bench-boxes", 0);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..280.0);
            let y = rng.random_range(0.0..200.0);
            let b = BoundingBox::new(x, y, x + rng.random_range(8.0..40.0), y + rng.random_range(8.0..40.0)).unwrap();
            Detection::new(b, CategoryId(0), rng.random_range(0.0..1.0)).unwrap()
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let dets = random_detections(1000, 1);
    c.bench_function("iou/1000-pairs", |b| {
        b.iter(|| dets.windows(2).map(|w| iou(&w[0].bbox, &w[1].bbox)).sum::<f64>())
    });
    let mut group = c.benchmark_group("nms");
    for n in [50, 200, 800] {
        let d = random_detections(n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &d, |b, d| b.iter(|| nms(black_box(d), 0.5)));
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let world = generate_world(&SimWorldConfig::reference(0)).unwrap();
    let store = world.embedding_store(Split::Pool).unwrap();
    let query = world.embed_text("a photo of a trailer").unwrap();
    c.bench_function("top_k/pool-100", |b| b.iter(|| store.top_k(black_box(&query), 100).unwrap()));

    let mut rng = stream(3, "bench-store", 0);
    let mut big = EmbeddingStore::new(32);
    for i in 0..20_000 {
        big.insert(format!("s{i}"), EmbeddingVector::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .unwrap();
    }
    c.bench_function("top_k/20k-100", |b| b.iter(|| big.top_k(black_box(&query), 100).unwrap()));
}

fn ap(c: &mut Criterion) {
    let preds = random_detections(500, 4);
    let gts: Vec<Detection> = random_detections(200, 5)
        .into_iter()
        .map(|d| Detection::ground_truth(d.bbox, d.category))
        .collect();
    c.bench_function("average_precision/500x200", |b| {
        b.iter(|| average_precision(black_box(&preds), black_box(&gts), 0.5))
    });
}

criterion_group!(benches, geometry, retrieval, ap);
criterion_main!(benches);
