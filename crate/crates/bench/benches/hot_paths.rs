use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gift_bench::fixture;
use gift_core::gift::{estimate_direction, estimate_direction_fd, eval_in_situ};
use gift_core::gradients::{backward, batch_gradient};
use gift_core::model::forward_noisy;
use gift_core::noise::sample_noise;
use gift_core::{Device, NoiseModel, RngStream};
use ndarray::s;

const SHALLOWER: [usize; 5] = [784, 500, 100, 100, 10];
const SMALL: [usize; 4] = [16, 32, 16, 4];

fn single_sample(c: &mut Criterion) {
    let (params, data) = fixture(&SHALLOWER, 64);
    let model = NoiseModel::gaussian(0.1).unwrap();
    let noise = sample_noise(params.arch(), &model, RngStream::root(3)).unwrap();
    c.bench_function("forward_backward/shallower/1", |b| {
        b.iter(|| {
            let trace = forward_noisy(&params, data.input(0), &noise).unwrap();
            backward(&trace, data.target(0), &params).unwrap()
        })
    });
}

fn minibatch(c: &mut Criterion) {
    let (params, data) = fixture(&SHALLOWER, 64);
    let x = data.inputs().slice(s![..32, ..]);
    let y = data.targets().slice(s![..32, ..]);
    c.bench_function("batch_gradient/shallower/32", |b| {
        b.iter(|| batch_gradient(&params, x, y, 0.1, RngStream::root(4)).unwrap())
    });
}

fn directions(c: &mut Criterion) {
    let (params, data) = fixture(&SMALL, 1000);
    let mut g = c.benchmark_group("direction/small/100x10");
    g.bench_function("score_function", |b| {
        b.iter(|| estimate_direction(&params, &data, 0.2, 100, 10, RngStream::root(5)).unwrap())
    });
    g.bench_function("common_noise_fd", |b| {
        b.iter(|| estimate_direction_fd(&params, &data, 0.2, 0.1, 100, 10, RngStream::root(5)).unwrap())
    });
    g.finish();
}

fn in_situ(c: &mut Criterion) {
    let (params, data) = fixture(&SMALL, 1000);
    let model = NoiseModel::gaussian(0.3).unwrap();
    c.bench_function("eval_in_situ/small/200x20", |b| {
        b.iter_batched(
            || Device::new(params.clone(), model, 7).unwrap(),
            |mut dev| eval_in_situ(&mut dev, &params, &data, 200, 20, RngStream::root(6)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, single_sample, minibatch, directions, in_situ);
criterion_main!(benches);
