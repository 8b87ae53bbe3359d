//! Criterion benchmarks for the hot kernels: tape matmul (forward and
//! forward+backward), one mixture-layer forward, and a full toy image
//! encode through the mixture-bearing dual encoder.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use moa_bench::{mixture_fixture, random_matrix, toy_encoder, toy_image};
use moa_core::adapter::sma_forward;
use moa_core::Tape;

fn bench_matmul(c: &mut Criterion) {
    let a = random_matrix(64, 64, "bench/matmul-a");
    let b_data = random_matrix(64, 64, "bench/matmul-b");

    c.bench_function("matmul_64x64x64_forward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let a = tape.constant(black_box(a.clone()), &[64, 64]).unwrap();
            let b = tape.constant(black_box(b_data.clone()), &[64, 64]).unwrap();
            let y = tape.matmul(a, b).unwrap();
            black_box(tape.data(y)[0])
        })
    });

    c.bench_function("matmul_64x64x64_with_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let a = tape.leaf(black_box(a.clone()), &[64, 64], true).unwrap();
            let b = tape.constant(black_box(b_data.clone()), &[64, 64]).unwrap();
            let y = tape.matmul(a, b).unwrap();
            let loss = tape.sum_all(y).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(a).unwrap()[0])
        })
    });
}

fn bench_mixture_forward(c: &mut Criterion) {
    let d = 64;
    let tokens = 9;
    let (store, layer, cfg) = mixture_fixture(d);
    let x_data = random_matrix(tokens, d, "bench/mixture-x");
    let h_data = random_matrix(tokens, d, "bench/mixture-h");

    c.bench_function("mixture_forward_9tok_d64_n6_k2", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, false).unwrap();
            let x = tape.constant(black_box(x_data.clone()), &[tokens, d]).unwrap();
            let h = tape.constant(black_box(h_data.clone()), &[tokens, d]).unwrap();
            let (y, outcome) = sma_forward(&mut tape, &binding, x, h, &layer, &cfg).unwrap();
            black_box((tape.data(y)[0], outcome.f[0]))
        })
    });
}

fn bench_encode_image(c: &mut Criterion) {
    let model = toy_encoder();
    let pixels = toy_image(&model.cfg);

    c.bench_function("encode_image_toy_backbone_with_mixture", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false).unwrap();
            let out = model
                .encode_image(&mut tape, &binding, black_box(&pixels))
                .unwrap();
            black_box(tape.data(out.feature)[0])
        })
    });
}

criterion_group!(benches, bench_matmul, bench_mixture_forward, bench_encode_image);
criterion_main!(benches);
