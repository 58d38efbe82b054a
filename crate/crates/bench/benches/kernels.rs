use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use kvlp_bench::{gnn_fixture, memory, small_config, trainer, uniform};
use kvlp_core::gnn::gnn_layer;
use kvlp_core::harness::Config;
use kvlp_core::retriever::retrieve;
use kvlp_core::Graph;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [16, 64, 128] {
        let a = uniform(n, n, 1);
        let b = uniform(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(a.clone());
                let y = g.param(b.clone());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z).unwrap();
                black_box(g.backward(s).unwrap().wrt(x));
            })
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve");
    for entities in [200, 5000] {
        let mem = memory(entities, 16, 3);
        let queries = uniform(16, 16, 4);
        group.bench_with_input(BenchmarkId::from_parameter(entities), &entities, |bench, _| {
            bench.iter(|| black_box(retrieve(&queries, &mem, 4, 8).unwrap()))
        });
    }
    group.finish();
}

fn gnn(c: &mut Criterion) {
    let f = gnn_fixture(24, 6, 80, 16, 5);
    c.bench_function("gnn_layer_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = f.store.bind(&mut g);
            let x = g.param(f.nodes.clone());
            let y = gnn_layer(&mut g, &bound, &f.sub, &f.table, x, &f.layer).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap().wrt(x));
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, config) in [("small", small_config()), ("default", Config::default())] {
        let (t, corpus) = trainer(&config);
        group.bench_function(name, |bench| {
            bench.iter_batched(
                || t.clone(),
                |mut t| black_box(t.train_step(&corpus).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, retrieval, gnn, train_step);
criterion_main!(benches);
