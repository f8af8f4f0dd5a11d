//! Multi-head scaled dot-product attention restricted to a [`BlockSparsePattern`].
//!
//! The sparse kernel never materialises an `n x n` score matrix. A pattern is
//! compiled into a [`SparsePlan`]: rows of the band are grouped into blocks of
//! `block_size` consecutive rows, and dense rows (global rows, or band rows whose
//! window already covers the whole sequence) form a separate strip. Each allowed
//! `(i, j)` pair appears exactly once in the plan. Scores are masked before the
//! softmax, so every active row is a proper distribution over its allowed
//! columns; PAD rows produce zero output.
//!
//! [`dense_reference_attention`] is the independent oracle: it builds the full
//! score matrix with `-inf` at disallowed cells.

mod cost;
mod dense;
mod kernel;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QdstError, Result};
use crate::tensor::{random_matrix, Real};

pub use cost::{flop_estimate, CostEstimate, ATTENTION_MACS_PER_PAIR_PER_DIM, FEEDFORWARD_MACS_PER_DIM2};
pub use dense::{dense_reference_attention, literal_post_softmax_attention, ORACLE_MAX_LEN};
pub use kernel::{
    forward_with_plan, score_storage, sparse_attention_backward, sparse_attention_forward, AttentionCache,
    AttentionTrace, ForwardOutput, KernelOptions, SparsePlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl HeadConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(QdstError::invalid("num_heads and head_dim must be >= 1"));
        }
        Ok(Self { num_heads, head_dim })
    }

    /// Splits `dim` evenly across `num_heads`.
    pub fn for_model(dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(QdstError::invalid(format!("dim {dim} is not divisible by {num_heads} heads")));
        }
        Self::new(num_heads, dim / num_heads)
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Projection matrices of one attention sublayer, each `dim x dim`.
///
/// `Q = H W_q^T`, `K = H W_k^T`, `V = H W_v^T`, and the concatenated head
/// outputs are mixed by `W_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_f: Array2<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            w_f: Array2::zeros((dim, dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: Array2::eye(dim),
            w_k: Array2::eye(dim),
            w_v: Array2::eye(dim),
            w_f: Array2::eye(dim),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Self {
        Self {
            w_q: random_matrix(rng, dim, dim, std),
            w_k: random_matrix(rng, dim, dim, std),
            w_v: random_matrix(rng, dim, dim, std),
            w_f: random_matrix(rng, dim, dim, std),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<T>); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_f", &self.w_f)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<T>); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_f", &mut self.w_f),
        ]
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, m) in self.tensors() {
            if m.dim() != (dim, dim) {
                return Err(QdstError::invalid(format!(
                    "{name} has shape {:?}, expected ({dim}, {dim})",
                    m.dim()
                )));
            }
        }
        Ok(())
    }
}

/// `(Q, K, V)` as `n x dim` matrices; head `h` owns columns `h*d_k..(h+1)*d_k`.
pub fn project_qkv<T: Real>(h: &Array2<T>, weights: &AttentionWeights<T>) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    let dim = weights.dim();
    weights.validate(dim)?;
    if h.ncols() != dim {
        return Err(QdstError::invalid(format!(
            "hidden states have {} columns, weights expect {dim}",
            h.ncols()
        )));
    }
    Ok((
        h.dot(&weights.w_q.t()),
        h.dot(&weights.w_k.t()),
        h.dot(&weights.w_v.t()),
    ))
}

/// Softmax of `scores` restricted to `allowed`; all other entries are exactly 0.
pub fn masked_softmax_row<T: Real>(scores: &[T], allowed: &[usize]) -> Result<Vec<T>> {
    if allowed.is_empty() {
        return Err(QdstError::InternalInvariantViolation(
            "softmax row has no allowed columns".into(),
        ));
    }
    if let Some(&bad) = allowed.iter().find(|&&j| j >= scores.len()) {
        return Err(QdstError::invalid(format!(
            "allowed column {bad} out of range for {} scores",
            scores.len()
        )));
    }
    let max = allowed.iter().map(|&j| scores[j]).fold(T::neg_infinity(), T::max);
    let mut out = vec![T::zero(); scores.len()];
    let mut total = T::zero();
    for &j in allowed {
        let e = (scores[j] - max).exp();
        out[j] = e;
        total += e;
    }
    for &j in allowed {
        out[j] /= total;
    }
    Ok(out)
}
