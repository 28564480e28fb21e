use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gald::ops::activation::softmax_rows_forward;
use gald::ops::conv::{conv2d_forward, ConvGeometry};
use gald::ops::layout::to_rows;
use gald::ops::local_attention::{local_attention_forward, BorderMode, LocalWindow};
use gald::ops::matmul::{matmul_nn, matmul_nt};
use gald::parallel::set_parallel;
use gald::{Shape4, Tensor};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    g.sample_size(10).measurement_time(Duration::from_secs(3));
    let x = Tensor::uniform(Shape4::new(4, 16, 64, 64), 1, -1.0, 1.0);
    let k = Tensor::uniform(Shape4::new(16, 16, 3, 3), 2, -0.1, 0.1);
    let geometry = ConvGeometry {
        padding: 1,
        ..ConvGeometry::default()
    };
    for (name, on) in MODES {
        g.bench_function(name, |b| {
            set_parallel(on);
            b.iter(|| conv2d_forward(&x, &k, None, geometry).unwrap())
        });
    }
    set_parallel(true);
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    g.sample_size(10).measurement_time(Duration::from_secs(3));
    let window = LocalWindow::new(5, 3).unwrap();
    for side in [16usize, 32] {
        let s = Shape4::new(1, 16, side, side);
        let (q, k, v) = (
            Tensor::uniform(s, 3, -1.0, 1.0),
            Tensor::uniform(s, 4, -1.0, 1.0),
            Tensor::uniform(s, 5, -1.0, 1.0),
        );
        for (name, on) in MODES {
            g.bench_with_input(
                BenchmarkId::new(format!("local_{name}"), side),
                &side,
                |b, _| {
                    set_parallel(on);
                    b.iter(|| {
                        local_attention_forward(&q, &k, &v, window, BorderMode::MaskedSoftmax)
                            .unwrap()
                    })
                },
            );
            g.bench_with_input(
                BenchmarkId::new(format!("dense_{name}"), side),
                &side,
                |b, _| {
                    set_parallel(on);
                    b.iter(|| {
                        let logits = matmul_nt(&to_rows(&q), &to_rows(&k)).unwrap();
                        matmul_nn(&softmax_rows_forward(&logits), &to_rows(&v)).unwrap()
                    })
                },
            );
        }
    }
    set_parallel(true);
    g.finish();
}

criterion_group!(benches, conv, attention);
criterion_main!(benches);
