//! Metric evaluation with the rayon pool against the sequential path.

use cfasl::data::{generate_synthetic, SyntheticGrid};
use cfasl::metrics::{aligned_encoder, fvm, m_fvm, Protocol};
use cfasl::ExecMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn metrics(c: &mut Criterion) {
    let (ds, _) = generate_synthetic(&SyntheticGrid::DESK, 16, 0).unwrap();
    let encoder = aligned_encoder(&ds, 6, &[4, 1, 2], 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let protocol = Protocol::with_seed(0);
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    for mode in [ExecMode::Parallel, ExecMode::Sequential] {
        let name = format!("{mode:?}").to_lowercase();
        group.bench_function(BenchmarkId::new("fvm", &name), |b| b.iter(|| fvm(&encoder, &ds, &protocol, mode).unwrap()));
        group.bench_function(BenchmarkId::new("m_fvm2", &name), |b| b.iter(|| m_fvm(&encoder, &ds, 2, &protocol, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
