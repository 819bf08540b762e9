//! Per-iteration cost of the branch-reconnection step across bond
//! dimensions. The central bond of a balanced 64-leaf tree keeps all four
//! working legs saturated at chi.

use att_core::{reconnect_step, DataBatch, TensorTreeModel, TrainConfig, TreeTopology};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_batch(n: usize, rows: usize, seed: u64) -> DataBatch {
    let mut rng = StdRng::seed_from_u64(seed);
    let data: Vec<u8> = (0..n * rows).map(|_| rng.gen_range(0..2u8)).collect();
    DataBatch::new(n, data).unwrap()
}

fn bench_reconnect(c: &mut Criterion) {
    let n = 64;
    let data = random_batch(n, 32, 9);
    let mut group = c.benchmark_group("reconnect_step");
    group.sample_size(20);
    for chi in [4usize, 8, 16] {
        group.bench_with_input(BenchmarkId::from_parameter(chi), &chi, |b, &chi| {
            let topo = TreeTopology::balanced(n).unwrap();
            let mut model = TensorTreeModel::init(topo, chi, 3).unwrap();
            let bond = model.topology().root_edge();
            let cfg = TrainConfig {
                chi,
                learning_rate: 0.01,
                batch_size: 32,
                ..Default::default()
            };
            let mut iteration = 0u64;
            b.iter(|| {
                iteration += 1;
                reconnect_step(&mut model, &data, &cfg, bond, iteration).unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_reconnect);
criterion_main!(benches);
