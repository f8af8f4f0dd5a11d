//! Sequence layouts and the sparse attention adjacencies built from them.

mod layout;
mod mask;

pub use layout::{build_layout, special, SequenceLayout, TokenRole};
pub use mask::{
    build_pattern, cls_mask, local_mask, query_mask, sentence_mask, sparsity, BlockSparsePattern,
    PatternConfig, Preset, SparsityStats,
};
