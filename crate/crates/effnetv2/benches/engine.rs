//! Parallel vs. sequential throughput of the hot engine paths.
//!
//! Each benchmark runs the identical workload twice: once with rayon dispatch
//! enabled and once forced onto the sequential fallback. Outputs are
//! bit-identical between the two; only wall-clock differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use effnetv2::parallel::set_parallel_enabled;
use effnetv2::rng::RngStream;
use effnetv2::tensor::{Mode, Padding, Shape, Tape, Tensor};

use rand::Rng;

fn rand_tensor(shape: Shape, rng: &mut RngStream) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn conv_forward(c: &mut Criterion) {
    let mut rng = RngStream::derive(0, "bench", &[0]);
    let x = rand_tensor(Shape::new(4, 32, 56, 56), &mut rng);
    let w = rand_tensor(Shape::new(64, 32, 3, 3), &mut rng);
    let mut group = c.benchmark_group("conv2d_forward");
    for &par in &[true, false] {
        group.bench_with_input(BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""), &par, |b, &par| {
            set_parallel_enabled(par);
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), false);
                let wv = tape.leaf(w.clone(), true);
                tape.conv2d(xv, wv, 1, Padding::Same).unwrap()
            });
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

fn conv_train_step(c: &mut Criterion) {
    let mut rng = RngStream::derive(0, "bench", &[1]);
    let x = rand_tensor(Shape::new(4, 16, 32, 32), &mut rng);
    let w1 = rand_tensor(Shape::new(32, 16, 3, 3), &mut rng);
    let w2 = rand_tensor(Shape::new(32, 1, 3, 3), &mut rng);
    let mut group = c.benchmark_group("conv_forward_backward");
    for &par in &[true, false] {
        group.bench_with_input(BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""), &par, |b, &par| {
            set_parallel_enabled(par);
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), false);
                let w1v = tape.leaf(w1.clone(), true);
                let w2v = tape.leaf(w2.clone(), true);
                let y = tape.conv2d(xv, w1v, 2, Padding::Same).unwrap();
                let y = tape.silu(y).unwrap();
                let y = tape.depthwise_conv2d(y, w2v, 1, Padding::Same).unwrap();
                let loss = tape.sum(y).unwrap();
                tape.backward(loss).unwrap();
                tape.grad(w1v).unwrap()[0]
            });
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

fn batch_norm_train(c: &mut Criterion) {
    let mut rng = RngStream::derive(0, "bench", &[2]);
    let x = rand_tensor(Shape::new(8, 64, 28, 28), &mut rng);
    let gamma = Tensor::full(Shape::channels(64), 1.0f32);
    let beta = Tensor::zeros(Shape::channels(64));
    let mut group = c.benchmark_group("batch_norm_train");
    for &par in &[true, false] {
        group.bench_with_input(BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""), &par, |b, &par| {
            set_parallel_enabled(par);
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), false);
                let g = tape.leaf(gamma.clone(), true);
                let bt = tape.leaf(beta.clone(), true);
                let mut rm = vec![0.0f32; 64];
                let mut rv = vec![1.0f32; 64];
                tape.batch_norm(xv, g, bt, &mut rm, &mut rv, 0.99, 1e-3, Mode::Train).unwrap()
            });
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

criterion_group!(benches, conv_forward, conv_train_step, batch_norm_train);
criterion_main!(benches);
