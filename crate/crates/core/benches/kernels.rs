//! Hot kernels under the default rayon pool and under a single-thread pool.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dtlns_core::backbone::{init_params, propagate, Backbone, Graph};
use dtlns_core::dataset::{split, SplitRatios};
use dtlns_core::eval::{evaluate, EvalSplit};
use dtlns_core::spectral::{jaccard_similarity, normalized_laplacian};
use dtlns_core::synth::{generate_blocks, BlockSpec};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn kernels(c: &mut Criterion) {
    let spec = BlockSpec { users: 2000, items: 1500, density: 0.03, cross_density: 0.002, seed: 1, ..BlockSpec::default() };
    let edges = generate_blocks(&spec).unwrap();
    let (ds, _) = split(&edges, spec.users, spec.items, SplitRatios::default(), 1).unwrap();
    let graph = Graph::from_dataset(&ds);
    let state = init_params(ds.user_count, ds.item_count, 64, Backbone::LightGcn { layers: 3 }, 1).unwrap();
    let forward = propagate(&state, &graph);
    let lap = normalized_laplacian(&jaccard_similarity(&ds).unwrap());
    let x: Vec<f64> = (0..lap.n()).map(|i| (i as f64).sin()).collect();

    for (name, pool) in pools() {
        c.bench_with_input(BenchmarkId::new("laplacian_matvec", name), &x, |b, x| {
            b.iter(|| pool.install(|| black_box(lap.matrix.matvec(x))))
        });
        c.bench_function(&format!("propagate/{name}"), |b| b.iter(|| pool.install(|| black_box(propagate(&state, &graph)))));
        c.bench_function(&format!("jaccard/{name}"), |b| b.iter(|| pool.install(|| black_box(jaccard_similarity(&ds).unwrap()))));
        c.bench_function(&format!("evaluate/{name}"), |b| {
            b.iter(|| pool.install(|| black_box(evaluate(&forward, &ds, EvalSplit::Test, &[10, 20]))))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
