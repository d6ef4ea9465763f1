use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajreg_bench::{policy, samples};
use trajreg_core::advreg::{ar_policy_gradient, policy_gradient_parts, sar_policy_gradient};
use trajreg_core::PerturbationConfig;

fn gradients(c: &mut Criterion) {
    let data = samples(1024);
    let net = policy(32);
    let mut g = c.benchmark_group("policy_gradient_1024");
    g.bench_function("bc", |b| {
        b.iter(|| policy_gradient_parts(&data, &net, &PerturbationConfig::default(), None, false).unwrap())
    });
    for k in [1, 3] {
        let cfg = PerturbationConfig {
            k_steps: k,
            ..Default::default()
        };
        g.bench_with_input(BenchmarkId::new("ar", k), &cfg, |b, cfg| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| ar_policy_gradient(&data, &net, cfg, &mut rng).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sar", k), &cfg, |b, cfg| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| sar_policy_gradient(&data, &net, cfg, &mut rng).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
