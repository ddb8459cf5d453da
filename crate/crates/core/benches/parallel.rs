use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stmom::features::{assemble_tensor, ex_ante_volatility, FeatureSpec};
use stmom::models::ArchitectureKind;
use stmom::pipeline::{train_on_panel, RunConfig};
use stmom::synthetic::SyntheticMarket;
use stmom::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn features(c: &mut Criterion) {
    let panel = SyntheticMarket {
        n_assets: 20,
        n_days: 252 * 8,
        ..SyntheticMarket::default()
    }
    .generate(1)
    .unwrap();
    let spec = FeatureSpec::default();
    let vol = ex_ante_volatility(&panel, spec.vol_span).unwrap();
    let mut g = c.benchmark_group("assemble_tensor");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| assemble_tensor(black_box(&panel), &vol, &spec, 5, exec).unwrap())
        });
    }
    g.finish();
}

fn search(c: &mut Criterion) {
    let panel = SyntheticMarket {
        n_assets: 10,
        n_days: 252 * 4,
        ..SyntheticMarket::default()
    }
    .generate(2)
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.training.iterations = 8;
    cfg.training.base.epochs = 5;
    let mut g = c.benchmark_group("random_search");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_on_panel(&cfg, black_box(&panel), ArchitectureKind::Slp, false, 1, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, features, search);
criterion_main!(benches);
