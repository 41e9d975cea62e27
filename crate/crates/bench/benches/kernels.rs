use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pseudoseg::fuselabel::weighted_bce_slices;
use pseudoseg::netops::{conv3d_backward_with, conv3d_with, maxpool, ConvGeometry, Tensor};
use pseudoseg_bench::random_tensor;
use std::hint::black_box;

fn conv3d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d_3x3x3");
    g.sample_size(10);
    for ch in [4usize, 8, 16] {
        let shape = [16usize, 32, 32];
        let x = random_tensor(vec![1, ch, shape[0], shape[1], shape[2]], 1);
        let k = random_tensor(vec![ch, ch, 3, 3, 3], 2);
        let b = Tensor::zeros(vec![ch]);
        let geom = ConvGeometry::same([3, 3, 3]);
        let flops = 2 * 27 * ch * ch * shape.iter().product::<usize>();
        g.throughput(Throughput::Elements(flops as u64));
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |bench, _| {
            bench.iter(|| conv3d_with(black_box(&x), &k, &b, geom).unwrap())
        });
        let y = conv3d_with(&x, &k, &b, geom).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", ch), &ch, |bench, _| {
            bench.iter(|| conv3d_backward_with(black_box(&x), &k, &y, geom, true).unwrap())
        });
    }
    g.finish();
}

fn pooling(c: &mut Criterion) {
    let x = random_tensor(vec![1, 8, 32, 64, 64], 3);
    c.bench_function("maxpool_2x2x2_8x32x64x64", |b| b.iter(|| maxpool(black_box(&x), &[2, 2, 2]).unwrap()));
}

fn loss(c: &mut Criterion) {
    let n = 50 * 114 * 114;
    let p: Vec<f32> = random_tensor(vec![n], 4).data().iter().map(|v| 0.5 + 0.45 * v).collect();
    let t: Vec<f32> = p.iter().map(|&v| if v > 0.6 { 1.0 } else { 0.0 }).collect();
    let w: Vec<f32> = (0..n).map(|i| [1.0, 0.5, 0.0][i % 3]).collect();
    let mut g = c.benchmark_group("weighted_bce");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("volume_50x114x114", |b| b.iter(|| weighted_bce_slices(black_box(&p), &t, &w).unwrap()));
    g.finish();
}

criterion_group!(benches, conv3d, pooling, loss);
criterion_main!(benches);
