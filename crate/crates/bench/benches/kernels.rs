use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use warpkit::correspondence::{extract_flow, FlowDirection};
use warpkit::mmdit::{attend, ModelInput, TraceSpec};
use warpkit_bench::{random_correlation, random_matrix, toy_model};

fn kernels(c: &mut Criterion) {
    let a = random_matrix(264, 64, 1);
    let b = random_matrix(64, 64, 2);
    c.bench_function("matmul_264x64x64", |bench| bench.iter(|| black_box(a.matmul(&b).unwrap())));

    let (q, k, v) = (random_matrix(264, 64, 3), random_matrix(264, 64, 4), random_matrix(264, 64, 5));
    c.bench_function("attend_264_tokens_4_heads", |bench| {
        bench.iter(|| black_box(attend(&q, &k, &v, 4, None).unwrap()))
    });

    let corr = random_correlation(4, 8, 8, 6);
    c.bench_function("extract_flow_4x8x8", |bench| {
        bench.iter(|| black_box(extract_flow(&corr, FlowDirection::GenToRef).unwrap()))
    });

    let (model, prompt, x) = toy_model(0);
    let input = || ModelInput {
        latent: &x,
        t: 25,
        prompt: &prompt,
    };
    c.bench_function("predict_toy_defaults", |bench| bench.iter(|| black_box(model.predict(input()).unwrap())));
    let traced = TraceSpec::all(model.config().layers, true);
    c.bench_function("forward_traced_toy_defaults", |bench| {
        bench.iter(|| black_box(model.forward(input(), None, &traced).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
