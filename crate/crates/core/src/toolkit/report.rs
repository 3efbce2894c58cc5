//! Per-pair metric rows with group and overall means, as CSV and JSON.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::features::{feature_similarity, perceptual_distance, FeatureExtractor};
use super::metrics::{psnr, ssim};
use crate::{Error, Result};

pub const SSIM_NOTE: &str = "ssim: uniform 8x8 window, C1=0.01^2, C2=0.03^2, grayscale=channel mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub feature_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pair_id: String,
    pub group: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub count: usize,
    #[serde(flatten)]
    pub means: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: String,
    pub notes: Vec<String>,
    pub rows: Vec<EvalRow>,
    /// One entry per group, in order of first appearance.
    pub groups: Vec<Aggregate>,
    pub overall: Aggregate,
}

/// All four scores of `generated` against `target` (RGB `[3, H, W]`).
pub fn score_pair(generated: &ArrayD<f64>, target: &ArrayD<f64>, extractor: &dyn FeatureExtractor) -> Result<Scores> {
    Ok(Scores {
        psnr_db: psnr(generated, target)?,
        ssim: ssim(generated, target)?,
        perceptual: perceptual_distance(generated, target, extractor)?,
        feature_cosine: feature_similarity(generated, target, extractor)?,
    })
}

fn mean_of<'a>(group: &str, rows: impl Iterator<Item = &'a EvalRow>) -> Aggregate {
    let mut n = 0usize;
    let mut sums = [0.0; 4];
    for r in rows {
        n += 1;
        let s = &r.scores;
        for (acc, v) in sums.iter_mut().zip([s.psnr_db, s.ssim, s.perceptual, s.feature_cosine]) {
            *acc += v;
        }
    }
    let d = n.max(1) as f64;
    Aggregate {
        group: group.to_string(),
        count: n,
        means: Scores {
            psnr_db: sums[0] / d,
            ssim: sums[1] / d,
            perceptual: sums[2] / d,
            feature_cosine: sums[3] / d,
        },
    }
}

impl EvalReport {
    pub fn from_rows(extractor: &str, rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("a report needs at least one row"));
        }
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.group) {
                order.push(r.group.clone());
            }
        }
        let groups = order
            .iter()
            .map(|g| mean_of(g, rows.iter().filter(|r| &r.group == g)))
            .collect();
        Ok(Self {
            extractor: extractor.to_string(),
            notes: vec![SSIM_NOTE.to_string(), format!("features: {extractor}")],
            overall: mean_of("all", rows.iter()),
            groups,
            rows,
        })
    }

    pub fn group(&self, label: &str) -> Option<&Aggregate> {
        self.groups.iter().find(|g| g.group == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out.push_str("pair_id,group,psnr_db,ssim,perceptual,feature_cosine\n");
        let line = |id: &str, group: &str, s: &Scores| {
            format!("{id},{group},{},{},{},{}\n", s.psnr_db, s.ssim, s.perceptual, s.feature_cosine)
        };
        for r in &self.rows {
            out.push_str(&line(&r.pair_id, &r.group, &r.scores));
        }
        for g in &self.groups {
            out.push_str(&line("mean", &g.group, &g.means));
        }
        out.push_str(&line("mean", "all", &self.overall.means));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json`; `path`'s extension is replaced.
    pub fn write(&self, path: &Path) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let p = path.with_extension(ext);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
