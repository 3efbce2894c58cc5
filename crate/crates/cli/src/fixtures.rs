//! Fixture directories: one set of files per sprite pair plus `fixtures.json`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use posetune::control::PoseSpec;
use posetune::toolkit::io::{load_rgb_png, load_rgba_png, save_rgb_png, save_rgba_png, segment};
use posetune::toolkit::{fixture, load_description, save_face_embedding, toy_face_embed, Fixture};

pub const INDEX: &str = "fixtures.json";

/// File names of one pair, relative to the fixture directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub identity_seed: u64,
    pub description: PathBuf,
    pub source: PathBuf,
    pub source_pose: PathBuf,
    pub target: PathBuf,
    pub target_pose: PathBuf,
    pub background: PathBuf,
    pub face: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write(count: usize, seed: u64, size: usize, outdir: &Path) -> Result<()> {
    anyhow::ensure!(count > 0, "--count must be positive");
    std::fs::create_dir_all(outdir).with_context(|| format!("creating {}", outdir.display()))?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let f = fixture(index, seed, size)?;
        let name = |suffix: &str| PathBuf::from(format!("{}_{suffix}", f.id));
        let e = Entry {
            id: f.id.clone(),
            identity_seed: f.identity_seed,
            description: name("desc.txt"),
            source: name("source.png"),
            source_pose: name("source_pose.json"),
            target: name("target.png"),
            target_pose: name("target_pose.json"),
            background: name("bg.png"),
            face: name("face.json"),
        };
        write_text(&outdir.join(&e.description), &format!("{}\n", f.description))?;
        save_rgba_png(&outdir.join(&e.source), &f.source)?;
        save_rgba_png(&outdir.join(&e.target), &f.target)?;
        save_rgb_png(&outdir.join(&e.background), &f.background)?;
        write_text(&outdir.join(&e.source_pose), &f.source_pose.to_json())?;
        write_text(&outdir.join(&e.target_pose), &f.target_pose.to_json())?;
        save_face_embedding(&outdir.join(&e.face), &toy_face_embed(&segment(&f.source, None)?)?)?;
        entries.push(e);
    }
    write_text(&outdir.join(INDEX), &serde_json::to_string_pretty(&entries)?)?;
    println!("wrote {count} fixture pairs to {}", outdir.display());
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<Fixture>> {
    let index = dir.join(INDEX);
    let text = std::fs::read_to_string(&index).with_context(|| format!("reading {}", index.display()))?;
    let entries: Vec<Entry> = serde_json::from_str(&text).with_context(|| format!("parsing {}", index.display()))?;
    entries
        .into_iter()
        .map(|e| {
            Ok(Fixture {
                id: e.id,
                identity_seed: e.identity_seed,
                description: load_description(&dir.join(&e.description))?,
                source: load_rgba_png(&dir.join(&e.source))?,
                source_pose: PoseSpec::load(&dir.join(&e.source_pose))?,
                target: load_rgba_png(&dir.join(&e.target))?,
                target_pose: PoseSpec::load(&dir.join(&e.target_pose))?,
                background: load_rgb_png(&dir.join(&e.background))?,
            })
        })
        .collect()
}
