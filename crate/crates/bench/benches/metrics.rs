use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csmn_core::metrics::auc;
use csmn_core::urmn::Memory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rank_sum_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("auc");
    for n in [1_000usize, 100_000] {
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| auc(&scores, &labels).unwrap()));
    }
    group.finish();
}

fn memory_read(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("memory_read");
    for q in [64usize, 1_000] {
        let mem = Memory::new(q, 16, 16, 0.3, 0.3, &mut rng).unwrap();
        let key: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(q), &q, |b, _| b.iter(|| mem.read_plain(&key).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rank_sum_auc, memory_read);
criterion_main!(benches);
