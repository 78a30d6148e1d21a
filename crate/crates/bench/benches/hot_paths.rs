use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use trajdistill::distill::{ge3d_gradient, DBCSchedule, ResidualScaling};
use trajdistill::metrics::sliced_wasserstein;
use trajdistill::{
    Condition, Denoiser, GuidanceConfig, Latent, TimestepTrajectory, TrajectoryPair,
};
use trajdistill_bench::{network, oracle, samples, schedule};

fn trajectory_pair(c: &mut Criterion) {
    let sched = schedule();
    let den = oracle();
    let g = GuidanceConfig::new(7.5).unwrap();
    let x0 = Latent::clean(vec![0.9, 0.1]).unwrap();
    let mut group = c.benchmark_group("trajectory_pair");
    for n in [1usize, 6, 24] {
        let traj = TimestepTrajectory::uniform(n, 480 / n).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &traj, |b, traj| {
            b.iter(|| {
                TrajectoryPair::build(black_box(&x0), traj, &den, Condition::Class(0), g, &sched)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let sched = schedule();
    let den = oracle();
    let g = GuidanceConfig::new(7.5).unwrap();
    let traj = TimestepTrajectory::uniform(6, 70).unwrap();
    let weights = DBCSchedule::with_default_sigma(2000, 6)
        .unwrap()
        .weights(500)
        .unwrap();
    c.bench_function("ge3d_gradient_n6", |b| {
        b.iter(|| {
            ge3d_gradient(
                black_box(&[0.9, 0.1]),
                &traj,
                &den,
                Condition::Class(0),
                g,
                &weights,
                ResidualScaling::None,
                &sched,
            )
            .unwrap()
        })
    });
}

fn mlp_forward(c: &mut Criterion) {
    let net = network();
    c.bench_function("mlp_predict_noise", |b| {
        b.iter(|| {
            net.predict_noise(black_box(&[0.3, -0.7]), 500, Condition::Class(1))
                .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let a = samples(0, 1000, 1);
    let b = samples(0, 32, 2);
    c.bench_function("sliced_wasserstein_1000x32", |bench| {
        bench.iter(|| sliced_wasserstein(black_box(&a), black_box(&b), 64, 0).unwrap())
    });
}

criterion_group!(benches, trajectory_pair, gradient, mlp_forward, metrics);
criterion_main!(benches);
