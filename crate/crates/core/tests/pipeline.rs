mod common;

use common::{face, pretrain, tiny_models, tiny_subject, tuned};
use ndarray::{Array3, ArrayD, IxDyn};
use posetune::adapters::{load_checkpoint, save_checkpoint, AdapterCheckpoint, ScaleMap, FULL_SCALE_BLOCK, REDUCED_SCALE};
use posetune::backbone::{ddim_sample_with, ConditioningBundle, ImageRGBA, LatentTensor, LATENT_CHANNELS};
use posetune::control::{render_pose, ControlNet, PoseInput};
use posetune::pipeline::{
    composite, opaque, refine, refine_start, transfer, Mechanisms, Models, PipelineConfig, RefineRequest, RunManifest,
    RunOutput, TransferRequest,
};
use posetune::tensor::{max_abs_diff, rng_for};
use posetune::toolkit::io::rgba_png_bytes;
use posetune::vcm::{FaceEmbedding, IdentityStrategy, STYLE_BLOCKS};
use posetune::Error;
use rand_distr::{Distribution, StandardNormal};

struct Scene {
    models: Models,
    checkpoint: AdapterCheckpoint,
    source: ImageRGBA,
    tokens: posetune::backbone::TokenSequence,
    pose: PoseInput,
    face: FaceEmbedding,
}

fn scene(iterations: usize, trained_control: bool) -> Scene {
    let mut models = tiny_models();
    if trained_control {
        pretrain(&mut models);
    }
    let checkpoint = tuned(&mut models, 0, iterations);
    let (f, tokens) = tiny_subject(&models, 0);
    Scene {
        face: face(models.spec.vcm.d_face, 2),
        pose: PoseInput::Keypoints(f.target_pose.clone()),
        source: f.source,
        tokens,
        checkpoint,
        models,
    }
}

impl Scene {
    fn transfer(&mut self, cfg: &PipelineConfig) -> RunOutput {
        self.try_transfer(cfg, &self.pose.clone()).unwrap()
    }

    fn try_transfer(&mut self, cfg: &PipelineConfig, pose: &PoseInput) -> posetune::Result<RunOutput> {
        let req = TransferRequest {
            checkpoint: &self.checkpoint,
            source_fg: &self.source,
            tokens: &self.tokens,
            pose,
            face: &self.face,
        };
        transfer(&mut self.models, req, cfg)
    }
}

fn diff(a: &ImageRGBA, b: &ImageRGBA) -> f64 {
    max_abs_diff(a.pixels(), b.pixels())
}

fn rgba(fill: [f64; 4], size: usize) -> ImageRGBA {
    let mut px = ArrayD::zeros(IxDyn(&[1, 4, size, size]));
    for (c, v) in fill.iter().enumerate() {
        px.index_axis_mut(ndarray::Axis(1), c).fill(*v);
    }
    ImageRGBA::new(px).unwrap()
}

#[test]
fn composite_closed_cases() {
    let bg = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| (c + y + x) as f64 / 20.0);
    let fg = rgba([0.3, 0.6, 0.9, 1.0], 8);
    let out = composite(&fg, &bg).unwrap();
    assert!(out.indexed_iter().all(|((c, _, _), &v)| v == [0.3, 0.6, 0.9][c]));
    assert_eq!(composite(&rgba([0.3, 0.6, 0.9, 0.0], 8), &bg).unwrap(), bg);
    let half = composite(&rgba([1.0, 1.0, 1.0, 0.5], 8), &Array3::zeros((3, 8, 8))).unwrap();
    assert!(half.iter().all(|&v| v == 0.5));
    assert!(matches!(composite(&fg, &Array3::zeros((3, 4, 8))), Err(Error::Dimension(_))));
}

#[test]
fn refine_start_rounds_and_rejects_zero() {
    assert_eq!(refine_start(0.3, 100).unwrap(), 30);
    assert_eq!(refine_start(0.255, 100).unwrap(), 26);
    assert!(matches!(refine_start(0.004, 100), Err(Error::Configuration(_))));
}

#[test]
fn transfer_is_deterministic_and_alpha_valid() {
    let mut s = scene(3, true);
    let cfg = PipelineConfig::default();
    let a = s.transfer(&cfg);
    let b = s.transfer(&cfg);
    assert_eq!(rgba_png_bytes(&a.image), rgba_png_bytes(&b.image));
    assert_eq!(a.image, b.image);
    let alpha = a.image.alpha(0);
    assert!(alpha.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn transfer_restores_the_backbone_after_the_offset() {
    let mut s = scene(3, false);
    let before = s.models.unet.params().clone();
    s.transfer(&PipelineConfig::default());
    assert_eq!(s.models.unet.params(), &before);
}

#[test]
fn transfer_audit_shows_routing() {
    let mut s = scene(3, true);
    let out = s.transfer(&PipelineConfig::default());
    let blocks = s.models.unet.list_blocks().len();
    let steps = PipelineConfig::default().ddim_steps;
    for (path, values) in out.audit.values_by_path("lora_scale") {
        let want = if path == FULL_SCALE_BLOCK { 1.0 } else { REDUCED_SCALE };
        assert_eq!(values, vec![want], "{path}");
    }
    let summary = out.audit.summary();
    assert!(summary["lora_scale"].values().all(|&n| n == steps));
    assert_eq!(out.audit.values_by_path("lora_scale").len(), blocks);
    let mut style = out.audit.paths_with("style_injection");
    style.sort();
    assert_eq!(style, STYLE_BLOCKS.to_vec());
    assert_eq!(out.audit.paths_with("face_value_replacement").len(), blocks);
    assert_eq!(out.audit.paths_with("control_residual").len(), 4);
}

#[test]
fn untrained_control_makes_output_pose_independent() {
    let mut s = scene(3, false);
    let cfg = PipelineConfig::default();
    let a = s.transfer(&cfg);
    let other = PoseInput::Keypoints(posetune::toolkit::random_pose(99));
    let blank = PoseInput::Image(Array3::zeros((3, 16, 16)));
    assert_eq!(s.try_transfer(&cfg, &other).unwrap().image, a.image);
    assert_eq!(s.try_transfer(&cfg, &blank).unwrap().image, a.image);
}

#[test]
fn trained_control_responds_to_pose_and_accepts_rendered_images() {
    let mut s = scene(3, true);
    let cfg = PipelineConfig::default();
    let a = s.transfer(&cfg);
    let blank = PoseInput::Image(Array3::zeros((3, 16, 16)));
    assert_ne!(s.try_transfer(&cfg, &blank).unwrap().image, a.image);
    let PoseInput::Keypoints(p) = s.pose.clone() else { unreachable!() };
    let rendered = PoseInput::Image(render_pose(&p, 16).unwrap());
    assert_eq!(s.try_transfer(&cfg, &rendered).unwrap().image, a.image);
    let wrong = PoseInput::Image(Array3::zeros((3, 8, 8)));
    assert!(matches!(s.try_transfer(&cfg, &wrong), Err(Error::Dimension(_))));
}

/// Turning a mechanism off through `mechanisms` matches a pipeline in which
/// that mechanism is present but has no effect, and every mechanism does
/// change the output when it is on.
#[test]
fn mechanism_isolation() {
    let mut s = scene(6, true);
    let full = s.transfer(&PipelineConfig::default()).image;
    let off = |f: fn(&mut Mechanisms)| {
        let mut cfg = PipelineConfig::default();
        f(&mut cfg.mechanisms);
        cfg
    };

    let without = s.transfer(&off(|m| m.offset = false)).image;
    let reference = s.transfer(&PipelineConfig {
        offset: None,
        ..Default::default()
    });
    assert!(diff(&without, &reference.image) <= 1e-6);
    assert_ne!(without, full, "offset");

    let without = s.transfer(&off(|m| m.lora = false)).image;
    let reference = s.transfer(&PipelineConfig {
        scale_map: ScaleMap::uniform(0.0).unwrap(),
        ..Default::default()
    });
    assert!(diff(&without, &reference.image) <= 1e-6);
    assert_ne!(without, full, "lora");

    let without = s.transfer(&off(|m| m.style = false)).image;
    let mut cfg = PipelineConfig::default();
    cfg.injection.lambda_style = 0.0;
    assert!(diff(&without, &s.transfer(&cfg).image) <= 1e-6);
    assert_ne!(without, full, "style");

    let without = s.transfer(&off(|m| m.face = false)).image;
    let reference = s.transfer(&PipelineConfig {
        identity_neutral: true,
        ..Default::default()
    });
    assert!(diff(&without, &reference.image) <= 1e-6);
    assert_ne!(without, full, "face");

    let without = s.transfer(&off(|m| m.control = false)).image;
    let trained = std::mem::replace(&mut s.models.control, ControlNet::from_backbone(&s.models.unet, 0));
    assert!(diff(&without, &s.transfer(&PipelineConfig::default()).image) <= 1e-6);
    s.models.control = trained;
    assert_ne!(without, full, "control");
}

#[test]
fn all_inactive_matches_bare_ddim_bitwise() {
    let mut s = scene(0, false);
    let mut cfg = PipelineConfig {
        offset: None,
        ..Default::default()
    };
    cfg.injection.lambda_style = 0.0;
    cfg.injection.s = 0.0;
    cfg.mechanisms.face = false;
    let out = s.transfer(&cfg).image;

    let m = &mut s.models;
    let l = m.spec.unet.latent_size();
    let mut rng = rng_for(cfg.seed, "transfer.noise");
    let z = ArrayD::zeros(IxDyn(&[1, LATENT_CHANNELS, l, l])).mapv(|_: f64| StandardNormal.sample(&mut rng));
    let z = LatentTensor::new(z).unwrap();
    let bare = ConditioningBundle::default();
    let tokens = &s.tokens;
    let unet = &mut m.unet;
    let sampled = ddim_sample_with(&m.schedule, &z, m.schedule.num_steps(), cfg.ddim_steps, |z, t| {
        unet.unet_forward(z, &[t], tokens, &bare)
    })
    .unwrap();
    assert_eq!(out, m.codec.decode_rgba(&sampled));
}

#[test]
fn identity_neutral_strategies_coincide() {
    let mut s = scene(4, true);
    let outs: Vec<ImageRGBA> = IdentityStrategy::ALL
        .iter()
        .map(|&strategy| {
            let mut cfg = PipelineConfig {
                identity_neutral: true,
                ..Default::default()
            };
            cfg.injection.strategy = strategy;
            s.transfer(&cfg).image
        })
        .collect();
    assert!(diff(&outs[0], &outs[1]) <= 1e-6);
    assert!(diff(&outs[0], &outs[2]) <= 1e-6);
    let plain: Vec<ImageRGBA> = IdentityStrategy::ALL
        .iter()
        .map(|&strategy| {
            let mut cfg = PipelineConfig::default();
            cfg.injection.strategy = strategy;
            s.transfer(&cfg).image
        })
        .collect();
    assert_ne!(plain[0], plain[1]);
    assert_ne!(plain[0], plain[2]);
}

#[test]
fn missing_face_slot_is_a_configuration_error() {
    let mut s = scene(0, false);
    s.tokens = s.models.encode_text("a person in a red shirt");
    assert!(s.tokens.face_slot().is_none());
    let err = s.try_transfer(&PipelineConfig::default(), &s.pose.clone()).unwrap_err();
    assert!(matches!(err, Error::Configuration(_)), "{err}");
    let mut cfg = PipelineConfig::default();
    cfg.injection.strategy = IdentityStrategy::AddedCrossAttention;
    assert!(s.try_transfer(&cfg, &s.pose.clone()).is_ok());
}

#[test]
fn checkpoint_replay_reproduces_transfer() {
    let mut s = scene(5, true);
    let cfg = PipelineConfig::default();
    let before = s.transfer(&cfg).image;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("subject.ckpt");
    save_checkpoint(&path, &s.checkpoint).unwrap();
    s.checkpoint = load_checkpoint(&path).unwrap();
    assert!(diff(&s.transfer(&cfg).image, &before) <= 1e-6);
}

#[test]
fn refine_is_control_free_deterministic_and_identity_at_zero() {
    let mut s = scene(3, true);
    let fg = s.transfer(&PipelineConfig::default()).image;
    let bg = posetune::toolkit::background(0, 16);
    let composited = opaque(&composite(&fg, &bg).unwrap()).unwrap();
    let run = |s: &mut Scene, cfg: &PipelineConfig| {
        let req = RefineRequest {
            checkpoint: &s.checkpoint,
            composited: &composited,
            style_source: &fg,
            tokens: &s.tokens,
            face: Some(&s.face),
        };
        refine(&mut s.models, req, cfg).unwrap()
    };
    let zero = run(
        &mut s,
        &PipelineConfig {
            refine_strength: 0.0,
            ..Default::default()
        },
    );
    assert_eq!(zero.image, composited);

    let cfg = PipelineConfig::default();
    let a = run(&mut s, &cfg);
    let b = run(&mut s, &cfg);
    assert_eq!(a.image, b.image);
    assert_ne!(a.image, composited);
    assert!(a.audit.paths_with("control_residual").is_empty());
    assert!(!a.audit.paths_with("style_injection").is_empty());
    assert!(!a.audit.paths_with("face_value_replacement").is_empty());
    // 0.3 of 20 steps, all below t* = 30
    assert_eq!(a.audit.summary()["lora_scale"][FULL_SCALE_BLOCK], 6);
}

#[test]
fn invalid_pipeline_configs_are_rejected() {
    let mut s = scene(0, false);
    for cfg in [
        PipelineConfig {
            ddim_steps: 0,
            ..Default::default()
        },
        PipelineConfig {
            refine_strength: 1.5,
            ..Default::default()
        },
        PipelineConfig {
            ddim_steps: 500,
            ..Default::default()
        },
    ] {
        assert!(matches!(s.try_transfer(&cfg, &s.pose.clone()), Err(Error::Configuration(_))));
    }
}

#[test]
fn manifest_roundtrips_through_json() {
    let mut s = scene(2, false);
    let out = s.transfer(&PipelineConfig::default());
    let manifest = RunManifest {
        command: "transfer".into(),
        seed: 0,
        config: serde_json::to_value(PipelineConfig::default()).unwrap(),
        inputs: [("source".to_string(), "a.png".to_string())].into(),
        outputs: vec!["out.png".into()],
        timings_ms: out.timings_ms.clone(),
        audit_summary: out.audit.summary(),
    };
    let back: RunManifest = serde_json::from_str(&manifest.to_json()).unwrap();
    assert_eq!(back, manifest);
    assert!(out.timings_ms.contains_key("total"));
    assert_eq!(manifest.audit_summary["lora_scale"][FULL_SCALE_BLOCK], 20);
}
