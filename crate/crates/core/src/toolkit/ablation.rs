//! Identity-strategy ablation and pairwise evaluation over sprite fixtures.

use ndarray::Array3;

use super::features::ExtractorRegistry;
use super::providers::toy_face_embed;
use super::report::{score_pair, EvalReport, EvalRow};
use super::sprites::Fixture;
use crate::backbone::ImageRGBA;
use crate::control::PoseInput;
use crate::oneshot::{tune, Subject, TuneConfig};
use crate::pipeline::{composite, transfer, Models, PipelineConfig, TransferRequest};
use crate::vcm::IdentityStrategy;
use crate::{Error, Result};

/// The RGB a viewer sees: the foreground composited over the background.
pub fn viewable(fg: &ImageRGBA, bg: &Array3<f64>) -> Result<ndarray::ArrayD<f64>> {
    Ok(composite(fg, bg)?.into_dyn())
}

/// Tunes once per fixture, then transfers to the target pose under each
/// strategy with shared seeds and scores the result against the target.
/// Rows are grouped by the strategy's report label.
pub fn run_ablation(
    models: &mut Models,
    fixtures: &[Fixture],
    strategies: &[IdentityStrategy],
    tune_cfg: &TuneConfig,
    pipeline: &PipelineConfig,
    extractors: &ExtractorRegistry,
    extractor: &str,
) -> Result<EvalReport> {
    if fixtures.is_empty() {
        return Err(Error::config("ablation needs at least one fixture"));
    }
    if strategies.is_empty() {
        return Err(Error::config("ablation needs at least one strategy"));
    }
    let ex = extractors.get(extractor)?;
    let mut rows = Vec::new();
    for f in fixtures {
        let tokens = models.encode_text(&f.description);
        let subject = Subject {
            source_fg: &f.source,
            tokens: &tokens,
        };
        let tuned = tune(
            &mut models.unet,
            &models.vcm,
            &models.codec,
            &models.schedule,
            &pipeline.injection,
            subject,
            None,
            tune_cfg,
        )?;
        let face = toy_face_embed(&f.source)?;
        let pose = PoseInput::Keypoints(f.target_pose.clone());
        let target = viewable(&f.target, &f.background)?;
        for &strategy in strategies {
            let mut cfg = pipeline.clone();
            cfg.injection.strategy = strategy;
            let out = transfer(
                models,
                TransferRequest {
                    checkpoint: &tuned.checkpoint,
                    source_fg: &f.source,
                    tokens: &tokens,
                    pose: &pose,
                    face: &face,
                },
                &cfg,
            )?;
            rows.push(EvalRow {
                pair_id: f.id.clone(),
                group: strategy.label().to_string(),
                scores: score_pair(&viewable(&out.image, &f.background)?, &target, ex)?,
            });
        }
    }
    EvalReport::from_rows(extractor, rows)
}

/// One line of an evaluation pairs file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub generated: std::path::PathBuf,
    pub target: std::path::PathBuf,
    /// Both images are composited over this before scoring; black if absent.
    #[serde(default)]
    pub background: Option<std::path::PathBuf>,
}

/// Reads a JSON array of [`PairEntry`]; relative paths resolve against the
/// file's directory.
pub fn load_pairs(path: &std::path::Path) -> Result<Vec<PairEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs: Vec<PairEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("pairs file: {e}")))?;
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    for p in &mut pairs {
        p.generated = base.join(&p.generated);
        p.target = base.join(&p.target);
        p.background = p.background.as_ref().map(|b| base.join(b));
    }
    Ok(pairs)
}

/// Scores every pair of image files.
pub fn evaluate_pairs(pairs: &[PairEntry], extractors: &ExtractorRegistry, extractor: &str) -> Result<EvalReport> {
    use super::io::{load_rgb_png, load_rgba_png};
    if pairs.is_empty() {
        return Err(Error::config("no pairs to evaluate"));
    }
    let ex = extractors.get(extractor)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let g = load_rgba_png(&p.generated)?;
        let t = load_rgba_png(&p.target)?;
        let bg = match &p.background {
            Some(b) => load_rgb_png(b)?,
            None => Array3::zeros((3, t.height(), t.width())),
        };
        rows.push(EvalRow {
            pair_id: p.id.clone(),
            group: "all".into(),
            scores: score_pair(&viewable(&g, &bg)?, &viewable(&t, &bg)?, ex)?,
        });
    }
    EvalReport::from_rows(extractor, rows)
}
