//! Visual Consistency Module: face identity tokens, the wrapped face token
//! `v*`, value-only replacement, and block-whitelisted style injection.
//!
//! The attention-side behaviour (style K′/V′ branch, identity strategies) is
//! executed inside the backbone's attention sublayers; this module owns the
//! parameters, configuration and the standalone pieces.

mod config;
mod face;
mod params;
mod replace;
mod style;

pub use config::{FaceConditioning, IdentityStrategy, InjectionConfig, DEFAULT_WRAP_SCALE, STYLE_BLOCKS};
pub use face::{face_linear, project_face, wrap_face_token, wrap_weights, FaceEmbedding, FaceTokens};
pub use params::{VcmConfig, VcmParams, STYLE_TOKENS};
pub use replace::{apply_identity_strategy, attention, replace_value_token};
pub use style::encode_style;

pub(crate) use style::style_tokens_graph;
