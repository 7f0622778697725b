use std::hint::black_box;

use attentionet::dsp::{bandpass_filter, FilterSpec, SAMPLE_RATE};
use attentionet::gradcheck::random_batch;
use attentionet::model::network::build_forward;
use attentionet::model::{init_params, Mode, ModelConfig};
use attentionet::ops::{conv1d, Padding};
use attentionet_bench::{noise, recording};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv1d");
    // (batch, in, out, kernel): the low-level extractor and a dense-layer 3-tap conv
    for (b, cin, cout, k) in [(32, 1, 8, 7), (32, 32, 8, 3), (32, 64, 32, 1)] {
        let x = noise(&[b, cin, 128], 1);
        let w = noise(&[cout, cin, k], 2);
        g.throughput(Throughput::Elements((b * cout * 128 * cin * k) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(format!("{cin}x{cout}k{k}")), &(x, w), |bench, (x, w)| {
            bench.iter(|| conv1d(black_box(x), black_box(w), 1, Padding::Same).unwrap())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let params = init_params(0, &ModelConfig::tiny()).unwrap();
    let (x, labels) = random_batch(32, 128, 3);
    let codes: Vec<usize> = labels.iter().map(|l| l.code()).collect();
    let mut g = c.benchmark_group("tiny_model_batch32");
    g.sample_size(20);
    g.bench_function("forward_eval", |b| {
        b.iter(|| build_forward(&params, black_box(x.clone()), Mode::Eval, false).unwrap())
    });
    g.bench_function("forward_backward_train", |b| {
        b.iter(|| {
            let mut pass = build_forward(&params, black_box(x.clone()), Mode::Train, true).unwrap();
            let probs = pass.nodes.probs;
            let l = pass.builder.graph.cross_entropy(probs, &codes).unwrap();
            pass.builder.graph.backward(l).unwrap()
        })
    });
    g.finish();
}

fn filter(c: &mut Criterion) {
    let spec = FilterSpec::default();
    let x = recording(60);
    let mut g = c.benchmark_group("bandpass");
    g.throughput(Throughput::Elements(x.len() as u64));
    g.bench_function("one_minute_14ch", |b| {
        b.iter(|| bandpass_filter(black_box(&x), &spec, SAMPLE_RATE as f64).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, model, filter);
criterion_main!(benches);
