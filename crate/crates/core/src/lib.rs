//! Joint image-forgery detection and localization on a procedurally
//! generated benchmark: patch-aware classification, query-based mask
//! prediction over a conditional pixel decoder, and pseudo-label-guided
//! test-time adaptation — all on a deterministic from-scratch tensor core.

pub mod classifier;
pub mod cond_decoder;
pub mod encoder;
pub mod mask_decoder;
pub mod matching;
pub mod error;
pub mod forgebench;
pub mod nn;
pub mod numerics;
pub mod pyramid;

pub use error::{Error, Result};
