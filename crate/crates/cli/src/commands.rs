use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use posetune::adapters::{load_checkpoint, save_checkpoint};
use posetune::control::{pretrain_control as train_control, render_pose, ControlNet, ControlPair, ControlPretrainConfig};
use posetune::oneshot::{tune as tune_adapters, Subject};
use posetune::pipeline::{self, Models, PipelineConfig, RefineRequest, RunManifest, RunOutput, TransferRequest};
use posetune::toolkit::io::{load_rgb_png, load_rgba_png, save_rgb_png, save_rgba_png, segment};
use posetune::toolkit::{
    evaluate_pairs, load_description, load_face_embedding, load_mask, load_pairs, load_pose, run_ablation,
    toy_face_embed, ExtractorRegistry, ProjectConfig,
};
use posetune::vcm::IdentityStrategy;

use crate::Common;

fn load_config(path: Option<&Path>) -> Result<ProjectConfig> {
    Ok(match path {
        Some(p) => ProjectConfig::load(p)?,
        None => ProjectConfig::default(),
    })
}

fn build_models(cfg: &ProjectConfig, control: Option<&Path>) -> Result<Models> {
    let mut models = Models::build(cfg.backbone)?;
    if let Some(p) = control {
        models
            .set_control(ControlNet::load(p)?)
            .with_context(|| format!("control branch {}", p.display()))?;
    }
    Ok(models)
}

fn setup(common: &Common) -> Result<(ProjectConfig, Models)> {
    let cfg = load_config(common.config.as_deref())?;
    let models = build_models(&cfg, common.control.as_deref())?;
    Ok((cfg, models))
}

fn source_foreground(source: &Path, mask: Option<&Path>) -> Result<posetune::backbone::ImageRGBA> {
    let img = load_rgba_png(source)?;
    let mask = mask.map(load_mask).transpose()?;
    Ok(segment(&img, mask.as_ref())?)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &PipelineConfig,
    inputs: BTreeMap<String, String>,
    run: &RunOutput,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        inputs,
        outputs: vec![show(out)],
        timings_ms: run.timings_ms.clone(),
        audit_summary: run.audit.summary(),
    };
    let path = out.with_extension("json");
    std::fs::write(&path, manifest.to_json()).with_context(|| format!("writing {}", path.display()))
}

pub fn tune(common: &Common, source: &Path, mask: Option<&Path>, desc: &Path, out: &Path) -> Result<()> {
    let (cfg, mut m) = setup(common)?;
    let fg = source_foreground(source, mask)?;
    let tokens = m.encode_text(&load_description(desc)?);
    let start = Instant::now();
    let outcome = tune_adapters(
        &mut m.unet,
        &m.vcm,
        &m.codec,
        &m.schedule,
        &cfg.injection,
        Subject {
            source_fg: &fg,
            tokens: &tokens,
        },
        None,
        &cfg.tune,
    )?;
    save_checkpoint(out, &outcome.checkpoint)?;
    let csv = out.with_extension("loss.csv");
    std::fs::write(&csv, outcome.loss_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "tuned {} steps in {:.1} s, final loss {last:.5}; wrote {} and {}",
        outcome.losses.len(),
        start.elapsed().as_secs_f64(),
        out.display(),
        csv.display()
    );
    Ok(())
}

pub struct TransferArgs<'a> {
    pub checkpoint: &'a Path,
    pub source: &'a Path,
    pub mask: Option<&'a Path>,
    pub pose: &'a Path,
    pub face: Option<&'a Path>,
    pub desc: &'a Path,
    pub out: &'a Path,
}

pub fn transfer(common: &Common, a: &TransferArgs<'_>) -> Result<()> {
    let (cfg, mut m) = setup(common)?;
    let pipe = cfg.pipeline_config();
    let ckpt = load_checkpoint(a.checkpoint)?;
    let fg = source_foreground(a.source, a.mask)?;
    let tokens = m.encode_text(&load_description(a.desc)?);
    let pose = load_pose(a.pose)?;
    let face = match a.face {
        Some(p) => load_face_embedding(p)?,
        None => toy_face_embed(&fg)?,
    };
    let run = pipeline::transfer(
        &mut m,
        TransferRequest {
            checkpoint: &ckpt,
            source_fg: &fg,
            tokens: &tokens,
            pose: &pose,
            face: &face,
        },
        &pipe,
    )?;
    save_rgba_png(a.out, &run.image)?;
    let mut inputs = BTreeMap::from([
        ("checkpoint".to_string(), show(a.checkpoint)),
        ("source".to_string(), show(a.source)),
        ("pose".to_string(), show(a.pose)),
        ("desc".to_string(), show(a.desc)),
    ]);
    if let Some(p) = a.mask {
        inputs.insert("mask".into(), show(p));
    }
    if let Some(p) = a.face {
        inputs.insert("face".into(), show(p));
    }
    if let Some(p) = &common.control {
        inputs.insert("control".into(), show(p));
    }
    write_manifest(a.out, "transfer", &pipe, inputs, &run)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn composite(fg: &Path, bg: &Path, out: &Path) -> Result<()> {
    let rgb = pipeline::composite(&load_rgba_png(fg)?, &load_rgb_png(bg)?)?;
    save_rgb_png(out, &rgb)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub struct RefineArgs<'a> {
    pub input: &'a Path,
    pub bg: &'a Path,
    pub checkpoint: &'a Path,
    pub strength: Option<f64>,
    pub desc: Option<&'a Path>,
    pub face: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn refine(common: &Common, a: &RefineArgs<'_>) -> Result<()> {
    let (cfg, mut m) = setup(common)?;
    let mut pipe = cfg.pipeline_config();
    if let Some(s) = a.strength {
        pipe.refine_strength = s;
    }
    let ckpt = load_checkpoint(a.checkpoint)?;
    let fg = load_rgba_png(a.input)?;
    let composited = pipeline::opaque(&pipeline::composite(&fg, &load_rgb_png(a.bg)?)?)?;
    let text = a.desc.map(load_description).transpose()?.unwrap_or_default();
    let tokens = m.encode_text(&text);
    let face = a.face.map(load_face_embedding).transpose()?;
    let run = pipeline::refine(
        &mut m,
        RefineRequest {
            checkpoint: &ckpt,
            composited: &composited,
            style_source: &fg,
            tokens: &tokens,
            face: face.as_ref(),
        },
        &pipe,
    )?;
    save_rgba_png(a.out, &run.image)?;
    let mut inputs = BTreeMap::from([
        ("in".to_string(), show(a.input)),
        ("bg".to_string(), show(a.bg)),
        ("checkpoint".to_string(), show(a.checkpoint)),
    ]);
    if let Some(p) = a.desc {
        inputs.insert("desc".into(), show(p));
    }
    if let Some(p) = a.face {
        inputs.insert("face".into(), show(p));
    }
    write_manifest(a.out, "refine", &pipe, inputs, &run)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn extractors(cfg: &ProjectConfig) -> ExtractorRegistry {
    ExtractorRegistry::with_defaults(cfg.eval.extractor_seed)
}

fn print_report(report: &posetune::toolkit::EvalReport, stem: &Path) -> Result<()> {
    report.write(stem)?;
    let overall = (report.groups.len() > 1).then_some(&report.overall);
    for g in report.groups.iter().chain(overall) {
        let s = &g.means;
        println!(
            "{:<24} n={:<3} psnr {:>7.3} dB  ssim {:.4}  perceptual {:.4}  feature {:.4}",
            g.group, g.count, s.psnr_db, s.ssim, s.perceptual, s.feature_cosine
        );
    }
    println!("wrote {} and {}", stem.with_extension("csv").display(), stem.with_extension("json").display());
    Ok(())
}

pub fn eval(common: &Common, pairs: &Path, extractor: Option<&str>, report: &Path) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let name = extractor.unwrap_or(&cfg.eval.extractor);
    let r = evaluate_pairs(&load_pairs(pairs)?, &extractors(&cfg), name)?;
    print_report(&r, report)
}

pub fn ablate(common: &Common, dir: &Path, strategies: &[String], limit: Option<usize>, report: &Path) -> Result<()> {
    let (cfg, mut m) = setup(common)?;
    let strategies: Vec<IdentityStrategy> = if strategies.is_empty() {
        IdentityStrategy::ALL.to_vec()
    } else {
        strategies.iter().map(|s| s.parse()).collect::<posetune::Result<_>>()?
    };
    let mut fixtures = crate::fixtures::load(dir)?;
    if let Some(n) = limit {
        fixtures.truncate(n);
    }
    if fixtures.is_empty() {
        bail!("no fixtures selected from {}", dir.display());
    }
    let r = run_ablation(
        &mut m,
        &fixtures,
        &strategies,
        &cfg.tune,
        &cfg.pipeline_config(),
        &extractors(&cfg),
        &cfg.eval.extractor,
    )?;
    print_report(&r, report)
}

pub fn pretrain_control(config: Option<&Path>, dir: &Path, out: &Path, steps: usize, lr: f64, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let mut m = build_models(&cfg, None)?;
    let size = cfg.backbone.unet.image_size;
    let dataset = crate::fixtures::load(dir)?
        .into_iter()
        .flat_map(|f| {
            let tokens = m.encode_text(&f.description);
            [(f.source_pose, f.source), (f.target_pose, f.target)].map(|(pose, image)| (pose, image, tokens.clone()))
        })
        .map(|(pose, image, tokens)| {
            Ok(ControlPair {
                pose: render_pose(&pose, size)?,
                image,
                tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pc = ControlPretrainConfig { steps, lr, seed };
    let losses = train_control(&mut m.unet, &mut m.control, &dataset, &m.codec, &m.schedule, &pc)?;
    m.control.save(out)?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    println!(
        "trained control for {steps} steps on {} pairs, mean loss over the last {} steps {:.5}; wrote {}",
        dataset.len(),
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        out.display()
    );
    Ok(())
}
