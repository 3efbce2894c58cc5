//! LoRA over attention projections with a per-block scale map, additive
//! weight offsets, and the adapter checkpoint container.

pub(crate) mod checkpoint;
mod lora;
mod offset;
mod scale;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdapterCheckpoint, CheckpointMeta, MAGIC, VERSION};
pub use lora::{attach_lora, detach_lora, effective_weight, lora_name, LoraParam, LoraSet, LoraTarget, Projection, DEFAULT_RANK};
pub use offset::{apply_weight_offset, remove_weight_offset, WeightOffset};
pub use scale::{default_scale_map, ScaleMap, FULL_SCALE_BLOCK, REDUCED_SCALE};
