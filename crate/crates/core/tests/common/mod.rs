#![allow(dead_code)]

use ndarray::Array1;
use posetune::backbone::{LatentTensor, TokenSequence, LATENT_CHANNELS};
use posetune::pipeline::{ModelSpec, Models};
use posetune::tensor::{randn, rng_for};
use posetune::toolkit::{fixture, Fixture};
use posetune::vcm::FaceEmbedding;

pub fn tiny_models() -> Models {
    Models::build(ModelSpec::tiny()).unwrap()
}

/// A sprite fixture sized for the tiny backbone, with its encoded description.
pub fn tiny_subject(models: &Models, index: usize) -> (Fixture, TokenSequence) {
    let f = fixture(index, 0, models.spec.unet.image_size).unwrap();
    let tokens = models.encode_text(&f.description);
    (f, tokens)
}

pub fn face(dim: usize, seed: u64) -> FaceEmbedding {
    let v = randn(&mut rng_for(seed, "test.face"), &[dim], 1.0);
    FaceEmbedding::normalized(Array1::from(v.iter().copied().collect::<Vec<_>>())).unwrap()
}

pub fn latent(models: &Models, batch: usize, seed: u64) -> LatentTensor {
    let l = models.spec.unet.latent_size();
    LatentTensor::new(randn(&mut rng_for(seed, "test.latent"), &[batch, LATENT_CHANNELS, l, l], 1.0)).unwrap()
}

/// A briefly tuned checkpoint for fixture `index` (tiny rank, few steps).
pub fn tuned(models: &mut Models, index: usize, iterations: usize) -> posetune::adapters::AdapterCheckpoint {
    use posetune::oneshot::{tune, Subject, TuneConfig};
    let (f, tokens) = tiny_subject(models, index);
    let cfg = TuneConfig {
        rank: 4,
        iterations,
        learning_rate: 1e-2,
        ..TuneConfig::default()
    };
    let subject = Subject {
        source_fg: &f.source,
        tokens: &tokens,
    };
    tune(&mut models.unet, &models.vcm, &models.codec, &models.schedule, &Default::default(), subject, None, &cfg)
        .unwrap()
        .checkpoint
}

/// Replaces the zero-initialised control branch with a briefly pretrained one.
pub fn pretrain(models: &mut Models) {
    use posetune::control::{pretrain_control, render_pose, ControlPair, ControlPretrainConfig};
    let size = models.spec.unet.image_size;
    let dataset: Vec<ControlPair> = (0..3)
        .map(|i| {
            let (f, tokens) = tiny_subject(models, i);
            ControlPair {
                pose: render_pose(&f.source_pose, size).unwrap(),
                image: f.source,
                tokens,
            }
        })
        .collect();
    let cfg = ControlPretrainConfig {
        steps: 12,
        lr: 1e-2,
        seed: 0,
    };
    let Models {
        unet,
        control,
        codec,
        schedule,
        ..
    } = models;
    pretrain_control(unet, control, &dataset, codec, schedule, &cfg).unwrap();
}
