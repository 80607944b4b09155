use criterion::{criterion_group, criterion_main, Criterion};
use defkt_bench::mlp_setup;
use defkt_core::{select_round, FusionStrategy, Simulation};

fn rounds(c: &mut Criterion) {
    let setup = mlp_setup(60, 1_000_000);
    let mut group = c.benchmark_group("round_mnist_mlp_48_samples_per_client");
    group.sample_size(10);
    for strategy in FusionStrategy::ALL {
        group.bench_function(strategy.name(), |b| {
            let mut sim = Simulation::new(&setup, strategy).unwrap();
            b.iter(|| sim.step().unwrap())
        });
    }
    group.finish();

    c.bench_function("select_round_k100_q10", |b| {
        let mut t = 0;
        b.iter(|| {
            t += 1;
            select_round(100, 10, t, 7).unwrap()
        })
    });
}

criterion_group!(benches, rounds);
criterion_main!(benches);
