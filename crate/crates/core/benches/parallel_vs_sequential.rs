//! Data-parallel loops under both execution policies: dataset rendering and
//! R-precision. On a single core the two should be close; the gap grows with
//! the number of rayon threads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use storyviz::data::{generate_shape_story_splits, SynthConfig};
use storyviz::eval::r_precision;
use storyviz::par::Exec;

const POLICIES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_200_stories");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let cfg = SynthConfig {
            num_stories: 200,
            exec,
            ..SynthConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| generate_shape_story_splits(cfg, 7).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..64).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let (visual, text) = (rows(500), rows(500));
    let mut group = c.benchmark_group("r_precision_500");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| r_precision(&visual, &text, 10, 3, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, render, retrieval);
criterion_main!(benches);
