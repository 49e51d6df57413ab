use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use semcom_bench::{models, random_frame, random_tokens, rng};
use semcom_core::bra::{gather_kv, region_routing, token_attention};
use semcom_core::codec::ModelConfig;
use semcom_core::kan::{kan_forward, CrClass, KanLayer, SplineBasis};
use semcom_core::metrics::ms_ssim;
use semcom_core::osms::{BaselineConfig, Sensor, DEFAULT_EPSILON};
use semcom_core::ChannelConfig;

fn kan(c: &mut Criterion) {
    let mut r = rng(1);
    let layer = KanLayer::new("k", 64, 16, SplineBasis::default(), &mut r);
    let x: Vec<f64> = (0..64).map(|_| r.gen_range(-2.0..2.0)).collect();
    c.bench_function("kan_forward 64->16", |b| {
        b.iter(|| kan_forward(black_box(&x), &layer).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let (q, k, v) = (
        random_tokens(8, 4, 64, 1),
        random_tokens(8, 4, 64, 2),
        random_tokens(8, 4, 64, 3),
    );
    c.bench_function("routing attention 64 tokens top-4", |b| {
        b.iter(|| {
            let routing = region_routing(&q, &k, 4).unwrap();
            let gathered = gather_kv(&k, &v, &routing).unwrap();
            token_attention(black_box(&q), &gathered, &v, None, 1).unwrap()
        })
    });
}

fn transmit(c: &mut Criterion) {
    let pair = models(ModelConfig::default(), 0);
    let geom = pair.config.geometry().unwrap();
    let frame = random_frame(64, 64, 3, 4);
    let channel = ChannelConfig::default();
    let mut r = rng(5);
    let mut group = c.benchmark_group("transmit_frame 64x64");
    for cr in [CrClass::DynamicLowCr, CrClass::StaticHighCr] {
        group.bench_function(cr.as_str(), |b| {
            b.iter(|| {
                pair.codec(cr)
                    .transmit_frame(
                        &frame,
                        &geom,
                        &pair.config.lengths,
                        &channel,
                        &mut r,
                        pair.shared_extractor(cr),
                    )
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn metrics_and_sensing(c: &mut Criterion) {
    let (x, y) = (random_frame(64, 64, 3, 6), random_frame(64, 64, 3, 7));
    c.bench_function("ms_ssim 64x64", |b| b.iter(|| ms_ssim(black_box(&x), &y).unwrap()));
    c.bench_function("sense 64x64", |b| {
        let mut sensor = Sensor::baseline(BaselineConfig::default(), DEFAULT_EPSILON).unwrap();
        b.iter(|| sensor.sense(black_box(&x)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kan, attention, transmit, metrics_and_sensing
}
criterion_main!(benches);
