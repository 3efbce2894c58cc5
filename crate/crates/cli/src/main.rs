use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod fixtures;

#[derive(Parser)]
#[command(name = "posetune", version, about = "One-shot pose transfer on a toy latent-diffusion backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds the models.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML project configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained control branch (from `pretrain-control`); zero-initialised otherwise.
    #[arg(long)]
    pub control: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes procedural sprite pairs and an index file.
    Fixtures {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Tunes LoRA and style adapters on one source image.
    Tune {
        #[arg(long)]
        source: PathBuf,
        /// Mask PNG; the source's own alpha is used when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Text file with the appearance description.
        #[arg(long)]
        desc: PathBuf,
        /// Adapter checkpoint to write; the loss curve goes next to it as `.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generates the tuned subject in a target pose.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Keypoint JSON or rendered skeleton PNG.
        #[arg(long)]
        pose: PathBuf,
        /// Face embedding (JSON or raw fp32); the toy embedder runs when omitted.
        #[arg(long)]
        face: Option<PathBuf>,
        #[arg(long)]
        desc: PathBuf,
        /// RGBA PNG to write; a manifest is written beside it as `.json`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Alpha-composites a foreground over a background.
    Composite {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composites a foreground over a background, then refines it without pose control.
    Refine {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the configured refine strength.
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        desc: Option<PathBuf>,
        #[arg(long)]
        face: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Scores generated/target image pairs listed in a JSON file.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// Feature extractor; the configured one when omitted.
        #[arg(long)]
        extractor: Option<String>,
        /// Report path stem; `.csv` and `.json` are written.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compares identity strategies over a fixture directory.
    Ablate {
        /// Directory written by `fixtures`.
        #[arg(long)]
        fixtures: PathBuf,
        /// Comma-separated strategies; all three when omitted.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        /// Use only the first N fixtures.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the pose control branch on a fixture directory, backbone frozen.
    PretrainControl {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Fixtures { count, seed, outdir, size } => fixtures::write(count, seed, size, &outdir),
        Command::Tune { source, mask, desc, out, common } => commands::tune(&common, &source, mask.as_deref(), &desc, &out),
        Command::Transfer {
            checkpoint,
            source,
            mask,
            pose,
            face,
            desc,
            out,
            common,
        } => commands::transfer(
            &common,
            &commands::TransferArgs {
                checkpoint: &checkpoint,
                source: &source,
                mask: mask.as_deref(),
                pose: &pose,
                face: face.as_deref(),
                desc: &desc,
                out: &out,
            },
        ),
        Command::Composite { fg, bg, out } => commands::composite(&fg, &bg, &out),
        Command::Refine {
            input,
            bg,
            checkpoint,
            strength,
            desc,
            face,
            out,
            common,
        } => commands::refine(
            &common,
            &commands::RefineArgs {
                input: &input,
                bg: &bg,
                checkpoint: &checkpoint,
                strength,
                desc: desc.as_deref(),
                face: face.as_deref(),
                out: &out,
            },
        ),
        Command::Eval {
            pairs,
            extractor,
            report,
            common,
        } => commands::eval(&common, &pairs, extractor.as_deref(), &report),
        Command::Ablate {
            fixtures,
            strategies,
            report,
            limit,
            common,
        } => commands::ablate(&common, &fixtures, &strategies, limit, &report),
        Command::PretrainControl {
            fixtures,
            out,
            steps,
            lr,
            seed,
            config,
        } => commands::pretrain_control(config.as_deref(), &fixtures, &out, steps, lr, seed),
    }
}
