use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use posetune::backbone::{ConditioningBundle, LatentCodec, LatentTensor, LATENT_CHANNELS};
use posetune::oneshot::{tune, Subject, TuneConfig};
use posetune::pipeline::{ModelSpec, Models};
use posetune::tensor::{randn, rng_for};
use posetune::toolkit::{psnr, ssim, sprite_fixture};

fn backbone(c: &mut Criterion) {
    let mut m = Models::build(ModelSpec::default()).unwrap();
    let f = sprite_fixture();
    let tokens = m.encode_text(&f.description);
    let l = m.spec.unet.latent_size();
    let z = LatentTensor::new(randn(&mut rng_for(0, "bench"), &[1, LATENT_CHANNELS, l, l], 1.0)).unwrap();
    c.bench_function("unet_forward_64px", |b| {
        b.iter(|| m.unet.unet_forward(black_box(&z), &[50], &tokens, &ConditioningBundle::default()).unwrap())
    });

    let codec = LatentCodec::default();
    c.bench_function("codec_roundtrip_64px", |b| b.iter(|| codec.decode_rgba(&codec.encode_image(black_box(&f.source)))));
}

fn tuning(c: &mut Criterion) {
    let mut m = Models::build(ModelSpec::default()).unwrap();
    let f = sprite_fixture();
    let tokens = m.encode_text(&f.description);
    let cfg = TuneConfig {
        iterations: 1,
        ..TuneConfig::default()
    };
    let mut group = c.benchmark_group("tune");
    group.sample_size(10);
    group.bench_function("single_step_rank32_batch2", |b| {
        b.iter(|| {
            let subject = Subject {
                source_fg: &f.source,
                tokens: &tokens,
            };
            tune(&mut m.unet, &m.vcm, &m.codec, &m.schedule, &Default::default(), subject, None, &cfg).unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let f = sprite_fixture();
    let a = f.source.rgb().index_axis_move(ndarray::Axis(0), 0);
    let b = f.target.rgb().index_axis_move(ndarray::Axis(0), 0);
    c.bench_function("ssim_64px", |bench| bench.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("psnr_64px", |bench| bench.iter(|| psnr(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, backbone, tuning, metrics);
criterion_main!(benches);
