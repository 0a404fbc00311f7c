//! Thread-pool vs single-thread timings for the hot kernels.
//!
//! `pool` runs inside the default rayon pool, `single` inside a one-thread
//! pool. Building with `--no-default-features` removes rayon entirely and both
//! groups then measure the plain sequential loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use restormer_core::model::{self, ModelConfig};
use restormer_core::{nn, par, Tape, Tensor};
use std::hint::black_box;

const MODES: [(&str, usize); 2] = [("pool", 0), ("single", 1)];

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&[2, 16, 64, 64], &mut rng);
    let w = randn(&[16, 16, 3, 3], &mut rng);
    let dw = randn(&[16, 1, 3, 3], &mut rng);
    let mut g = c.benchmark_group("conv2d");
    for (mode, threads) in MODES {
        g.bench_function(BenchmarkId::new("dense3x3", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::inference();
                    let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                    black_box(t.conv2d(&x, &w, None, 1).unwrap());
                })
            })
        });
        g.bench_function(BenchmarkId::new("depthwise3x3", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::inference();
                    let (x, w) = (t.constant(x.clone()), t.constant(dw.clone()));
                    black_box(t.conv2d(&x, &w, None, 16).unwrap());
                })
            })
        });
    }
    g.finish();
}

fn matmul_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&[4, 128, 256], &mut rng);
    let bm = randn(&[4, 256, 128], &mut rng);
    // Channel attention shape: heads x (c/heads) x hw.
    let q = randn(&[2, 4, 12, 1024], &mut rng);
    let k = randn(&[2, 4, 12, 1024], &mut rng);
    let v = randn(&[2, 4, 12, 1024], &mut rng);
    let mut g = c.benchmark_group("dense");
    for (mode, threads) in MODES {
        g.bench_function(BenchmarkId::new("matmul", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::inference();
                    let (x, y) = (t.constant(a.clone()), t.constant(bm.clone()));
                    black_box(t.matmul(&x, &y).unwrap());
                })
            })
        });
        g.bench_function(BenchmarkId::new("attention", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::inference();
                    let (q, k, v) = (
                        t.constant(q.clone()),
                        t.constant(k.clone()),
                        t.constant(v.clone()),
                    );
                    black_box(t.attention(&q, &k, &v, 1.0).unwrap());
                })
            })
        });
    }
    g.finish();
}

fn model_step(c: &mut Criterion) {
    let params = model::build(&ModelConfig::toy(), 3).unwrap();
    let x = randn(&[1, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    for (mode, threads) in MODES {
        g.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::inference();
                    let p = nn::constants(&mut t, &params);
                    let x = t.constant(x.clone());
                    black_box(model::forward(&mut t, &p, &x).unwrap());
                })
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", mode), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let mut t = Tape::new();
                    let p = nn::leaves(&mut t, &params);
                    let x = t.constant(x.clone());
                    let y = model::forward(&mut t, &p, &x).unwrap();
                    let loss = t.mean(&y).unwrap();
                    t.backward(&loss).unwrap();
                    black_box(loss);
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, matmul_attention, model_step);
criterion_main!(benches);
