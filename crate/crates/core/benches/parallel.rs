//! Sequential vs parallel execution of the hot paths. Without the `parallel`
//! feature both arms run the sequential code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use coded_offload::codec::privacy::mutual_information_for_subset;
use coded_offload::codec::EncodingCoeffs;
use coded_offload::exec::Parallelism;
use coded_offload::field::{FieldMatrix, Prime};
use coded_offload::seed::rng_from_seed;
use coded_offload::trainer::{encoded_train, Dataset, ModelState, TrainConfig};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn matmul(c: &mut Criterion) {
    let p = Prime::p25();
    let mut rng = rng_from_seed(1);
    let mut g = c.benchmark_group("field_matmul");
    for n in [64usize, 192] {
        let a = FieldMatrix::random(&mut rng, n, n, p);
        let b = FieldMatrix::random(&mut rng, n, n, p);
        for (name, mode) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| {
                bch.iter(|| black_box(a.matmul_with(&b, mode).unwrap()))
            });
        }
    }
    g.finish();
}

fn exact_mi(c: &mut Criterion) {
    let mut rng = rng_from_seed(2);
    let coeffs = EncodingCoeffs::generate(&mut rng, 2, 2, Prime::new(7).unwrap()).unwrap();
    let mut g = c.benchmark_group("exact_mi_p7_k2_m2");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(name, |bch| {
            bch.iter(|| {
                black_box(mutual_information_for_subset(&coeffs, 1, &[0, 1, 2], mode).unwrap())
            })
        });
    }
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let data = Dataset::two_moons(200, 0.1, 3);
    let model = ModelState::mlp(2, 16, 2, 0.3, 3).unwrap();
    let mut g = c.benchmark_group("encoded_epoch_moons200");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            integrity: true,
            workers: 4,
            mode,
            ..TrainConfig::default()
        };
        g.bench_function(name, |bch| {
            bch.iter(|| black_box(encoded_train(&model, &data, &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, exact_mi, training_epoch);
criterion_main!(benches);
