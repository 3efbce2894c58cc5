mod common;

use std::collections::BTreeSet;

use common::tiny_models;
use ndarray::{ArrayD, IxDyn};
use posetune::oneshot::TuneConfig;
use posetune::pipeline::PipelineConfig;
use posetune::pipeline::{ModelSpec, Models};
use posetune::tensor::rng_for;
use posetune::toolkit::io::{load_rgba_png, rgba_png_bytes, save_rgb_png, save_rgba_png};
use posetune::toolkit::{
    evaluate_pairs, feature_similarity, fixture, fixture_set, generate_sprite, load_pairs, perceptual_distance, psnr,
    random_pose, run_ablation, ssim, EvalReport, EvalRow, ExtractorRegistry, FeatureExtractor, Identity, Scores,
    SpriteSpec, ToyLinear, ToyRandProj, DEFAULT_EXTRACTOR, LINEAR_EXTRACTOR, PSNR_CAP_DB, TOY_FACE_DIM,
};
use posetune::vcm::IdentityStrategy;
use posetune::Error;
use proptest::prelude::*;

/// Direct two-pass SSIM: every 8×8 window visited explicitly, moments from
/// deviations about the window mean.
fn reference_ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let gray = |x: &ArrayD<f64>| {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut g = vec![vec![0.0; w]; h];
        for (y, row) in g.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                *v = (0..c).map(|ch| x[[ch, y, xx]]).sum::<f64>() / c as f64;
            }
        }
        g
    };
    let (ga, gb) = (gray(a), gray(b));
    let (h, w, k) = (ga.len(), ga[0].len(), 8);
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let px: Vec<(f64, f64)> = (i..i + k)
                .flat_map(|y| (j..j + k).map(move |x| (y, x)))
                .map(|(y, x)| (ga[y][x], gb[y][x]))
                .collect();
            let n = px.len() as f64;
            let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
            let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
            let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
            let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

fn uniform_image(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    use rand::Rng;
    let mut rng = rng_for(seed, "test.image");
    ArrayD::zeros(IxDyn(shape)).mapv(|_: f64| rng.random::<f64>())
}

#[test]
fn psnr_closed_forms() {
    let a = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.25);
    let b = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 0.75);
    assert!((psnr(&a, &b).unwrap() - 6.0206).abs() <= 1e-3);
    let zeros = ArrayD::zeros(IxDyn(&[3, 8, 8]));
    let mut half = zeros.clone();
    for ((_, y, _), v) in half.indexed_iter_mut().map(|(i, v)| ((i[0], i[1], i[2]), v)) {
        if y < 4 {
            *v = 1.0;
        }
    }
    assert!((psnr(&zeros, &half).unwrap() - 3.0103).abs() <= 1e-3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
}

#[test]
fn ssim_matches_the_reference_routine() {
    for seed in 0..10 {
        let a = uniform_image(seed, &[3, 20, 17]);
        let b = uniform_image(seed + 100, &[3, 20, 17]);
        let blended = (&a * 0.7) + &(&b * 0.3);
        for (x, y) in [(&a, &b), (&a, &blended)] {
            let got = ssim(x, y).unwrap();
            let want = reference_ssim(x, y);
            assert!((got - want).abs() <= 1e-6, "seed {seed}: {got} vs {want}");
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }
    let small = ArrayD::zeros(IxDyn(&[3, 7, 9]));
    assert!(matches!(ssim(&small, &small), Err(Error::Configuration(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_self_maximal(seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let a = uniform_image(seed_a, &[3, 12, 12]);
        let b = uniform_image(seed_b + 5000, &[3, 12, 12]);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn report_aggregates_are_row_means(values in proptest::collection::vec((0.0f64..50.0, 0usize..3), 1..20)) {
        let rows: Vec<EvalRow> = values
            .iter()
            .enumerate()
            .map(|(i, &(v, g))| EvalRow {
                pair_id: format!("p{i}"),
                group: format!("g{g}"),
                scores: Scores { psnr_db: v, ssim: v / 50.0, perceptual: 1.0 - v / 50.0, feature_cosine: -v / 50.0 },
            })
            .collect();
        let report = EvalReport::from_rows("toy", rows.clone()).unwrap();
        let mean = |f: &dyn Fn(&Scores) -> f64, rs: &[&EvalRow]| rs.iter().map(|r| f(&r.scores)).sum::<f64>() / rs.len() as f64;
        let all: Vec<&EvalRow> = rows.iter().collect();
        prop_assert!((report.overall.means.psnr_db - mean(&|s| s.psnr_db, &all)).abs() <= 1e-9);
        prop_assert_eq!(report.overall.count, rows.len());
        for g in &report.groups {
            let members: Vec<&EvalRow> = rows.iter().filter(|r| r.group == g.group).collect();
            prop_assert_eq!(g.count, members.len());
            prop_assert!((g.means.psnr_db - mean(&|s| s.psnr_db, &members)).abs() <= 1e-9);
            prop_assert!((g.means.ssim - mean(&|s| s.ssim, &members)).abs() <= 1e-9);
            prop_assert!((g.means.perceptual - mean(&|s| s.perceptual, &members)).abs() <= 1e-9);
            prop_assert!((g.means.feature_cosine - mean(&|s| s.feature_cosine, &members)).abs() <= 1e-9);
        }
    }
}

#[test]
fn feature_similarity_axioms() {
    let a = uniform_image(1, &[3, 16, 16]).mapv(|v| v - 0.5);
    let lin = ToyLinear::new(0);
    assert!((feature_similarity(&a, &a, &lin).unwrap() - 1.0).abs() <= 1e-12);
    assert!((feature_similarity(&a, &a.mapv(|v| -v), &lin).unwrap() + 1.0).abs() <= 1e-12);
    let rp = ToyRandProj::new(0);
    let b = uniform_image(2, &[3, 16, 16]);
    let s = feature_similarity(&a, &b, &rp).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert_eq!(s.to_bits(), feature_similarity(&a, &b, &ToyRandProj::new(0)).unwrap().to_bits());
    assert!(perceptual_distance(&a, &a, &rp).unwrap().abs() <= 1e-12);
    assert!(perceptual_distance(&a, &b, &rp).unwrap() > 0.0);
    let reg = ExtractorRegistry::with_defaults(0);
    assert_eq!(reg.get(DEFAULT_EXTRACTOR).unwrap().name(), "toy-randproj");
    assert_eq!(reg.get(LINEAR_EXTRACTOR).unwrap().name(), LINEAR_EXTRACTOR);
    assert!(matches!(reg.get("dino-v2"), Err(Error::Configuration(_))));
}

#[test]
fn toy_extractor_depends_only_on_its_seed() {
    // features depend only on the seed
    let img = uniform_image(9, &[3, 16, 16]).into_dimensionality::<ndarray::Ix3>().unwrap();
    let f = ToyRandProj::new(0).layers(&img).unwrap();
    let g = ToyRandProj::new(0).layers(&img).unwrap();
    assert_eq!(f, g);
    assert_ne!(f, ToyRandProj::new(1).layers(&img).unwrap());
}

#[test]
fn same_identity_in_two_poses_has_equal_colour_support() {
    let support = |seed: u64, pose: u64| {
        let (img, _) = generate_sprite(&SpriteSpec {
            identity_seed: seed,
            pose: random_pose(pose),
            size: 64,
        })
        .unwrap();
        let px = img.pixels();
        let mut colours = BTreeSet::new();
        for y in 0..64 {
            for x in 0..64 {
                if px[[0, 3, y, x]] > 0.0 {
                    colours.insert([0, 1, 2].map(|c| (px[[0, c, y, x]] * 255.0).round() as u8));
                }
            }
        }
        colours
    };
    for seed in 0..8 {
        let a = support(seed, 2 * seed);
        let b = support(seed, 2 * seed + 1);
        assert_eq!(a, b, "identity {seed}");
        assert!(a.is_subset(&Identity::from_seed(seed).colors()));
    }
}

#[test]
fn sprites_roundtrip_through_png_and_alpha_marks_the_body() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(3, 1, 64).unwrap();
    let path = dir.path().join("s.png");
    save_rgba_png(&path, &f.source).unwrap();
    assert_eq!(load_rgba_png(&path).unwrap(), f.source);
    assert_eq!(rgba_png_bytes(&fixture(3, 1, 64).unwrap().source), rgba_png_bytes(&f.source));
    let px = f.source.pixels();
    for y in 0..64 {
        for x in 0..64 {
            let a = px[[0, 3, y, x]];
            assert!(a == 0.0 || a == 1.0);
            if a == 0.0 {
                assert!((0..3).all(|c| px[[0, c, y, x]] == 0.0));
            }
        }
    }
}

#[test]
fn pair_files_are_scored() {
    let dir = tempfile::tempdir().unwrap();
    let fs = fixture_set(2, 0, 32).unwrap();
    let mut entries = Vec::new();
    for f in &fs {
        save_rgba_png(&dir.path().join(format!("{}_gen.png", f.id)), &f.source).unwrap();
        save_rgba_png(&dir.path().join(format!("{}_tgt.png", f.id)), &f.target).unwrap();
        save_rgb_png(&dir.path().join(format!("{}_bg.png", f.id)), &f.background).unwrap();
        entries.push(serde_json::json!({
            "id": f.id,
            "generated": format!("{}_gen.png", f.id),
            "target": format!("{}_tgt.png", f.id),
            "background": format!("{}_bg.png", f.id),
        }));
    }
    entries.push(serde_json::json!({"id": "self", "generated": "pair000_tgt.png", "target": "pair000_tgt.png"}));
    let list = dir.path().join("pairs.json");
    std::fs::write(&list, serde_json::to_string(&entries).unwrap()).unwrap();
    let pairs = load_pairs(&list).unwrap();
    assert!(pairs[0].generated.starts_with(dir.path()));
    let reg = ExtractorRegistry::with_defaults(0);
    let report = evaluate_pairs(&pairs, &reg, DEFAULT_EXTRACTOR).unwrap();
    assert_eq!(report.rows.len(), 3);
    let own = &report.rows[2].scores;
    assert_eq!(own.psnr_db, PSNR_CAP_DB);
    assert!((own.ssim - 1.0).abs() <= 1e-12);
    assert!(report.rows[0].scores.psnr_db < PSNR_CAP_DB);

    let out = dir.path().join("report");
    report.write(&out).unwrap();
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with("# ssim: uniform 8x8 window"));
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(back, report);
    assert!(matches!(evaluate_pairs(&[], &reg, DEFAULT_EXTRACTOR), Err(Error::Configuration(_))));
}

#[test]
fn ablation_groups_by_strategy_and_replays() {
    let fixtures = fixture_set(2, 0, 16).unwrap();
    let tune = TuneConfig {
        rank: 4,
        iterations: 3,
        ..Default::default()
    };
    let reg = ExtractorRegistry::with_defaults(0);
    // the toy face embedder emits 64 dimensions; the tiny VCM must accept them
    let mut spec = ModelSpec::tiny();
    spec.vcm.d_face = TOY_FACE_DIM;
    let run = |cfg: &PipelineConfig| {
        let mut m = Models::build(spec).unwrap();
        common::pretrain(&mut m);
        run_ablation(&mut m, &fixtures, &IdentityStrategy::ALL, &tune, cfg, &reg, DEFAULT_EXTRACTOR).unwrap()
    };
    let report = run(&PipelineConfig::default());
    let labels: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(labels, ["VCM (Ours)", "Full Token Replacement", "Cross-Attention"]);
    assert!(report.groups.iter().all(|g| g.count == 2));
    let g = &report.groups;
    assert_ne!(g[0].means.psnr_db, g[1].means.psnr_db, "strategies should diverge without the neutral control");
    assert_ne!(g[0].means.psnr_db, g[2].means.psnr_db);
    let again = run(&PipelineConfig::default());
    for (a, b) in report.rows.iter().zip(&again.rows) {
        assert!((a.scores.psnr_db - b.scores.psnr_db).abs() <= 1e-9);
        assert!((a.scores.ssim - b.scores.ssim).abs() <= 1e-9);
        assert!((a.scores.perceptual - b.scores.perceptual).abs() <= 1e-9);
        assert!((a.scores.feature_cosine - b.scores.feature_cosine).abs() <= 1e-9);
    }

    let neutral = run(&PipelineConfig {
        identity_neutral: true,
        ..Default::default()
    });
    let g = &neutral.groups;
    for other in &g[1..] {
        assert!((other.means.psnr_db - g[0].means.psnr_db).abs() <= 1e-9);
        assert!((other.means.ssim - g[0].means.ssim).abs() <= 1e-9);
    }
    let mut m = tiny_models();
    assert!(matches!(
        run_ablation(&mut m, &[], &IdentityStrategy::ALL, &tune, &PipelineConfig::default(), &reg, DEFAULT_EXTRACTOR),
        Err(Error::Configuration(_))
    ));
}
