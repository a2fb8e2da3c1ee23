//! Position layouts and the modality-aware attention allow-matrix.

mod layout;
mod mask;

pub use layout::{Region, SequenceLayout};
pub use mask::{build_modality_mask, dump_mask, AttentionMask};
