use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use weave_core::data::make_sample;
use weave_core::data::{random_character, random_garment};
use weave_core::diffusion::NoiseSchedule;
use weave_core::metric::{mp_lpips, FeatureExtractor, MatchConfig};
use weave_core::model::{init_denoiser, init_extractor_from_denoiser, Conditioning, DenoiserConfig, Network};
use weave_core::{Ctx, SeededRng, Tensor};

fn toy() -> DenoiserConfig {
    DenoiserConfig {
        patch_size: 4,
        ..Default::default()
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = SeededRng::new(0);
    let a: Tensor<f32> = rng.normal_tensor(&[256, 256]);
    let b: Tensor<f32> = rng.normal_tensor(&[256, 256]);
    let ctx = Ctx::inference();
    c.bench_function("matmul 256x256 f32", |bch| {
        bch.iter(|| ctx.matmul(black_box(&a), black_box(&b)).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let cfg = toy();
    let mut rng = SeededRng::new(1);
    let den = init_denoiser::<f32>(&cfg, &mut rng).unwrap();
    let (ext, fus) = init_extractor_from_denoiser(&cfg, &den).unwrap();
    let z: Tensor<f32> = rng.normal_tensor(&[8, 3, 32, 32]);
    let garments: Tensor<f32> = rng.normal_tensor(&[8, 3, 32, 32]);
    let (db, eb, fb) = (den.bind_frozen(), ext.bind_frozen(), fus.bind_frozen());
    let ctx = Ctx::inference();
    let features = Network::new(&cfg, &eb, None).extract(&ctx, &garments).unwrap();
    let conds: Vec<Conditioning> = (0..8)
        .map(|i| Conditioning {
            tokens: Some(vec![1, 5, 9, 12]),
            garment: Some(i),
        })
        .collect();
    let net = Network::new(&cfg, &db, Some(&fb));
    c.bench_function("fused denoiser forward, batch 8", |bch| {
        bch.iter(|| {
            net.predict(&ctx, black_box(&z), &[50; 8], &conds, Some(&features))
                .unwrap()
        })
    });
    c.bench_function("garment extraction, batch 8", |bch| {
        bch.iter(|| {
            Network::new(&cfg, &eb, None)
                .extract(&ctx, black_box(&garments))
                .unwrap()
        })
    });
}

fn metric(c: &mut Criterion) {
    let cfg = toy();
    let mut rng = SeededRng::new(2);
    let den = init_denoiser::<f32>(&cfg, &mut rng).unwrap();
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let s = make_sample(random_garment(&mut rng), random_character(&mut rng), 32).unwrap();
    let (g, c_img) = (s.garment.to_tensor(), s.character.to_tensor());
    let mc = MatchConfig::toy(200, &cfg);
    let ext = FeatureExtractor {
        cfg: &cfg,
        sched: &sched,
        denoiser: &den,
        seed: 0,
    };
    c.bench_function("mp_lpips 32x32 toy", |bch| {
        bch.iter(|| mp_lpips(black_box(&g), &s.garment_mask, &c_img, &s.character_mask, &mc, &ext).unwrap())
    });
}

criterion_group!(benches, matmul, forward, metric);
criterion_main!(benches);
