use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use iavf_core::pipeline::synth::synth_pair;
use iavf_core::{akm_forward, dwt2_channelwise, wdaf_forward, AttentionP, FeatureMap, Model, ModelConfig, SynthConfig, WdafParams};

fn wavelet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("dwt2_channelwise");
    for (ch, s) in [(8, 32), (16, 16), (32, 8)] {
        let f = FeatureMap::random(ch, s, s, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{s}x{s}")), &f, |b, f| {
            b.iter(|| dwt2_channelwise(black_box(f)))
        });
    }
    g.finish();
}

fn akm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = AttentionP::centered(3).unwrap();
    let mut g = c.benchmark_group("akm_forward");
    for (ch, s) in [(8, 32), (32, 8)] {
        let fx = FeatureMap::random(ch, s, s, &mut rng);
        let fy = FeatureMap::random(ch, s, s, &mut rng);
        g.bench_function(format!("{ch}x{s}x{s}"), |b| b.iter(|| akm_forward(black_box(&fx), black_box(&fy), &p, 3)));
    }
    g.finish();
}

fn wdaf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("wdaf_forward");
    for (ch, s) in [(8, 32), (32, 8)] {
        let params = WdafParams::init(ch, 2 * ch, 0.01, &mut rng);
        let fx = FeatureMap::random(ch, s, s, &mut rng);
        let ft = FeatureMap::random(ch, s, s, &mut rng);
        g.bench_function(format!("{ch}x{s}x{s}"), |b| b.iter(|| wdaf_forward(black_box(&fx), black_box(&ft), &params)));
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let m = Model::new(ModelConfig::default(), 4).unwrap();
    let s = synth_pair(4, &SynthConfig::default());
    c.bench_function("detect_64x64", |b| b.iter(|| m.detect(black_box(&s.visible), black_box(&s.infrared))));
    c.bench_function("loss_and_grad_64x64", |b| b.iter(|| m.loss_and_grad(black_box(&s))));
}

criterion_group!(benches, wavelet, akm, wdaf, model);
criterion_main!(benches);
