use criterion::{criterion_group, criterion_main, Criterion};

use adaptive_safety::config::Config;
use adaptive_safety::env::Condition;
use adaptive_safety::harness::experiment::run_cell;
use adaptive_safety::harness::{Experiment, MethodSpec};
use adaptive_safety::parallel;

fn bench_cells(c: &mut Criterion) {
    let mut cfg = Config::default();
    cfg.agent.train_episodes = 20;
    let methods: Vec<MethodSpec> = Experiment::C8Main.methods(&cfg);
    let cells: Vec<(usize, u64)> = (0..methods.len()).flat_map(|m| (0..4u64).map(move |s| (m, s))).collect();
    let work = |(m, s): (usize, u64)| {
        run_cell(&cfg, Experiment::C8Main, &methods[m], m, Condition::Unseen, s as usize, s, 2).unwrap().len()
    };

    let mut group = c.benchmark_group("c8_cells");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| parallel::map_sequential(cells.clone(), work)));
    group.bench_function("parallel", |b| b.iter(|| parallel::map(cells.clone(), work)));
    group.finish();
}

criterion_group!(benches, bench_cells);
criterion_main!(benches);
