use serde::{Deserialize, Serialize};

/// Multiply-adds per token per `dim^2` in one encoder layer: the four
/// attention projections (`4 dim^2`) plus the `dim -> 4 dim -> dim`
/// feed-forward block (`8 dim^2`).
pub const FEEDFORWARD_MACS_PER_DIM2: u64 = 12;

/// Multiply-adds per allowed `(i, j)` pair per model dimension: one for the
/// score dot product, one for accumulating the weighted value.
pub const ATTENTION_MACS_PER_PAIR_PER_DIM: u64 = 2;

/// Per-layer multiply-add counts of the implemented kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub feedforward_flops: u64,
    pub attention_flops: u64,
    pub total: u64,
}

/// Splits one layer's cost into the token-wise feed-forward part and the
/// attention part. Sparse attention is charged `w + |q| + |s| + 1` pairs per
/// row (window, query tokens, sentence markers, `[CLS]`), capped at the dense
/// `n` pairs per row.
pub fn flop_estimate(n: u64, dim: u64, window: u64, query_len: u64, num_sentences: u64, full: bool) -> CostEstimate {
    let feedforward = FEEDFORWARD_MACS_PER_DIM2 * dim * dim * n;
    let dense = ATTENTION_MACS_PER_PAIR_PER_DIM * n * n * dim;
    let attention = if full {
        dense
    } else {
        let per_row = window + query_len + num_sentences + 1;
        (ATTENTION_MACS_PER_PAIR_PER_DIM * n * dim * per_row).min(dense)
    };
    CostEstimate {
        feedforward_flops: feedforward,
        attention_flops: attention,
        total: feedforward + attention,
    }
}
