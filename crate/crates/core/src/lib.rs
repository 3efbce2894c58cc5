// `is_multiple_of` is newer than the supported toolchain.
#![allow(clippy::manual_is_multiple_of)]

pub mod adapters;
pub mod backbone;
pub mod control;
pub mod error;
pub mod oneshot;
pub mod pipeline;
pub mod tensor;
pub mod toolkit;
pub mod vcm;

pub use error::{Error, Result};
