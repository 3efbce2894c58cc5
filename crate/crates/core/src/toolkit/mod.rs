//! Evaluation and fixture tooling: procedural sprites, metrics, feature
//! extractors, input providers, image IO, configuration and reports.

pub mod ablation;
pub mod config;
pub mod features;
pub mod io;
pub mod metrics;
pub mod providers;
pub mod report;
pub mod sprites;

pub use ablation::{evaluate_pairs, load_pairs, run_ablation, viewable, PairEntry};
pub use config::{EvalConfig, PipelineSection, ProjectConfig};
pub use features::{
    feature_similarity, perceptual_distance, ExtractorRegistry, FeatureExtractor, ToyLinear, ToyRandProj,
    DEFAULT_EXTRACTOR, LINEAR_EXTRACTOR,
};
pub use metrics::{psnr, ssim, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use providers::{
    load_description, load_face_embedding, load_mask, load_pose, save_face_embedding, toy_face_embed, TOY_FACE_DIM,
};
pub use report::{score_pair, Aggregate, EvalReport, EvalRow, Scores};
pub use sprites::{background, fixture, fixture_set, generate_sprite, random_pose, sprite_fixture, Fixture, Identity, SpriteSpec};
