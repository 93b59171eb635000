//! Sum form `exp(Σ w·A)` against the ordered product of element exponentials.

use candle_core::Tensor;
use cfasl::codebook::{matrix_exponential, SymmetryCodebook};
use cfasl::composition::{compose, product_form_elements, weighted_section_sum, AttentionHeads, PairStatistics, SwitchMode};
use cfasl::nn::normal_tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn composition(c: &mut Criterion) {
    let mut group = c.benchmark_group("composition");
    group.sample_size(20);
    for &(s, d, pairs) in &[(3usize, 3usize, 32usize), (10, 10, 32)] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = SymmetryCodebook::init_with_rng(s, s, d, 1.0, &mut rng).unwrap();
        let heads = AttentionHeads::init(s, s, d, &mut rng).unwrap();
        let mu1 = normal_tensor(&[pairs, d], 1.0, &mut rng).unwrap();
        let mu2 = normal_tensor(&[pairs, d], 1.0, &mut rng).unwrap();
        let lv = normal_tensor(&[pairs, d], 0.3, &mut rng).unwrap();
        let stats = PairStatistics::from_posteriors(&mu1, &lv, &mu2, &lv).unwrap();
        let g = compose(&cb, &heads, &stats, SwitchMode::Gumbel { temperature: 1e-4 }, &mut rng).unwrap();
        let label = format!("S{s}_D{d}_P{pairs}");
        group.bench_with_input(BenchmarkId::new("sum_form", &label), &g, |b, g| {
            b.iter(|| -> Tensor { matrix_exponential(&weighted_section_sum(&g.switch_values, &g.section_algebra).unwrap()).unwrap() })
        });
        group.bench_with_input(BenchmarkId::new("product_form", &label), &g, |b, g| {
            b.iter(|| product_form_elements(&cb, g).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, composition);
criterion_main!(benches);
