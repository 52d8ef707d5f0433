use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use gqsgd_bench::{shards, SIZES};
use gqsgd_core::quantizer::{global_norm, quantize_shard, to_sparse};
use gqsgd_core::wire::{encode_dense, encode_sparse};
use gqsgd_core::{CounterRng, LevelScheme, NormSpec, Width};

fn quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize");
    for d in SIZES {
        let x = shards(1, d);
        let norm = global_norm(&x, NormSpec::LINF).unwrap();
        g.throughput(Throughput::Bytes(4 * d as u64));
        for scheme in [LevelScheme::standard(255).unwrap(), LevelScheme::exponential(7).unwrap()] {
            let id = BenchmarkId::new(format!("{:?}", scheme.kind()).to_lowercase(), d);
            g.bench_with_input(id, &x[0], |b, x| {
                b.iter(|| quantize_shard(black_box(x), norm, &scheme, CounterRng::new(1)).unwrap())
            });
        }
    }
    g.finish();
}

fn encode(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode");
    let scheme = LevelScheme::exponential(7).unwrap();
    for d in SIZES {
        let x = shards(1, d);
        let norm = global_norm(&x, NormSpec::L2).unwrap();
        let q = quantize_shard(&x[0], norm, &scheme, CounterRng::new(2)).unwrap();
        let sparse = to_sparse(&q, &scheme);
        g.throughput(Throughput::Elements(d as u64));
        g.bench_with_input(BenchmarkId::new("dense", d), &q, |b, q| {
            b.iter(|| encode_dense(black_box(q), Width::W8).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sparse", d), &sparse, |b, p| {
            b.iter(|| encode_sparse(norm, black_box(p), Width::W8).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, quantize, encode);
criterion_main!(benches);
