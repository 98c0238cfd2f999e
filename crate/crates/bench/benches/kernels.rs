use adverseg_bench::noise;
use adverseg_core::tensor::Graph;
use adverseg_core::Shape;
use criterion::{criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let x = noise(Shape::new(3, 16, 64, 64), 1);
    let w = noise(Shape::new(16, 16, 3, 3), 2);
    c.bench_function("conv2d 3x16x64x64 k3 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
            g.conv2d(xi, wi, None, 1, 1).unwrap()
        })
    });
    c.bench_function("conv2d 3x16x64x64 k3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xi, wi) = (g.variable(x.clone()), g.variable(w.clone()));
            let y = g.conv2d(xi, wi, None, 1, 1).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap()
        })
    });
}

fn deconv(c: &mut Criterion) {
    let x = noise(Shape::new(3, 32, 32, 32), 3);
    let w = noise(Shape::new(32, 16, 4, 4), 4);
    c.bench_function("deconv2d 3x32x32x32 k4 s2 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xi, wi) = (g.variable(x.clone()), g.variable(w.clone()));
            let y = g.deconv2d(xi, wi, None, 2, 1).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap()
        })
    });
}

criterion_group!(benches, conv, deconv);
criterion_main!(benches);
