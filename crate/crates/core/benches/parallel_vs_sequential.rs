use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use rail_core::density::{fit_gmm_with, GmmConfig};
use rail_core::envs::{EnvId, EnvSpec};
use rail_core::evaluation::evaluate_policy;
use rail_core::parallel::Parallelism;
use rail_core::policy::GaussianPolicy;
use rail_core::rng::RngStream;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn states(n: usize) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(11, 0);
    (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect()
}

fn gmm(c: &mut Criterion) {
    let data = states(4000);
    let cfg = GmmConfig::default();
    let model = fit_gmm_with(&data, &cfg, 1, "bench", Parallelism::Sequential).unwrap().model;
    let mut g = c.benchmark_group("gmm");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::new("log_density_batch", name), &mode, |b, &m| {
            b.iter(|| model.log_density_batch(black_box(&data), m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fit", name), &mode, |b, &m| {
            b.iter(|| fit_gmm_with(black_box(&data), &cfg, 1, "bench", m).unwrap())
        });
    }
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let spec = EnvSpec::new(EnvId::PointMass2d);
    let mut rng = RngStream::new(3, 0);
    let policy = GaussianPolicy::new(spec.state_dim, &[64, 64], spec.action_bounds.clone(), &mut rng).unwrap();
    let mut g = c.benchmark_group("evaluate_policy");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::new("20_episodes", name), &mode, |b, &m| {
            b.iter(|| evaluate_policy(&policy, &spec, 0.1, 20, 0, m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gmm, rollouts);
criterion_main!(benches);
