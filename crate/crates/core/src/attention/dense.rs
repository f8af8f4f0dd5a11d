use ndarray::{s, Array2};

use super::{AttentionWeights, HeadConfig};
use crate::error::{QdstError, Result};
use crate::tensor::Real;

/// Largest sequence the dense oracle will materialise.
pub const ORACLE_MAX_LEN: usize = 2048;

/// Textbook multi-head attention over a dense 0/1 mask. Disallowed scores are
/// set to `-inf` before the softmax.
pub fn dense_reference_attention<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    mask: &[Vec<u8>],
) -> Result<Array2<T>> {
    let n = check_inputs(h, weights, heads, mask)?;
    if let Some(i) = mask.iter().position(|row| row.iter().all(|&m| m == 0)) {
        return Err(QdstError::invalid(format!("mask row {i} allows no columns")));
    }
    let concat = per_head(h, weights, heads, n, |scores, i| {
        let max = (0..n)
            .filter(|&j| mask[i][j] != 0)
            .map(|j| scores[j])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in 0..n {
            scores[j] = if mask[i][j] != 0 { (scores[j] - max).exp() } else { T::zero() };
            total += scores[j];
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
    });
    Ok(concat.dot(&weights.w_f.t()))
}

/// The literal reading that multiplies the 0/1 adjacency into an already
/// normalised full softmax. Rows no longer sum to one. Diagnostic only.
pub fn literal_post_softmax_attention<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    mask: &[Vec<u8>],
) -> Result<Array2<T>> {
    let n = check_inputs(h, weights, heads, mask)?;
    let concat = per_head(h, weights, heads, n, |scores, i| {
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for j in 0..n {
            scores[j] = if mask[i][j] != 0 { scores[j] / total } else { T::zero() };
        }
    });
    Ok(concat.dot(&weights.w_f.t()))
}

fn check_inputs<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    mask: &[Vec<u8>],
) -> Result<usize> {
    let n = h.nrows();
    if n > ORACLE_MAX_LEN {
        return Err(QdstError::invalid(format!("dense oracle capped at {ORACLE_MAX_LEN} tokens, got {n}")));
    }
    if mask.len() != n || mask.iter().any(|r| r.len() != n) {
        return Err(QdstError::invalid(format!("mask must be {n}x{n}")));
    }
    let dim = heads.model_dim();
    if h.ncols() != dim || weights.dim() != dim {
        return Err(QdstError::invalid("hidden/weight/head dimensions disagree"));
    }
    weights.validate(dim)?;
    Ok(n)
}

/// Computes the full `n x n` score matrix per head, applies `normalize` to each
/// row in place, and returns the concatenated head outputs.
fn per_head<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    n: usize,
    normalize: impl Fn(&mut [T], usize),
) -> Array2<T> {
    let q = h.dot(&weights.w_q.t());
    let k = h.dot(&weights.w_k.t());
    let v = h.dot(&weights.w_v.t());
    let dk = heads.head_dim;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut concat = Array2::zeros((n, heads.model_dim()));
    for hd in 0..heads.num_heads {
        let cols = s![.., hd * dk..(hd + 1) * dk];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            let mut buf = row.to_vec();
            normalize(&mut buf, i);
            row.assign(&ndarray::ArrayView1::from(&buf));
        }
        concat.slice_mut(cols).assign(&scores.dot(&vh));
    }
    concat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_mask_is_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Array2<f64> = random_matrix(&mut rng, 4, 4, 1.0);
        let w = AttentionWeights::random(&mut rng, 4, 0.5);
        let heads = HeadConfig::new(1, 4).unwrap();
        let ones = vec![vec![1u8; 4]; 4];
        let out = dense_reference_attention(&h, &w, &heads, &ones).unwrap();

        // Hand-rolled single-head attention.
        let q = h.dot(&w.w_q.t());
        let k = h.dot(&w.w_k.t());
        let v = h.dot(&w.w_v.t());
        let mut ctx = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            let s: Vec<f64> = (0..4).map(|j| q.row(i).dot(&k.row(j)) / 2.0).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..4 {
                let p = s[j].exp() / z;
                for c in 0..4 {
                    ctx[[i, c]] += p * v[[j, c]];
                }
            }
        }
        assert!(max_abs_diff(&out, &ctx.dot(&w.w_f.t())) <= 1e-12);
        // With a full mask the literal variant coincides.
        let lit = literal_post_softmax_attention(&h, &w, &heads, &ones).unwrap();
        assert!(max_abs_diff(&out, &lit) <= 1e-12);
    }

    #[test]
    fn identity_mask_returns_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h: Array2<f64> = random_matrix(&mut rng, 5, 6, 1.0);
        let w = AttentionWeights::random(&mut rng, 6, 0.5);
        let heads = HeadConfig::new(3, 2).unwrap();
        let eye: Vec<Vec<u8>> = (0..5).map(|i| (0..5).map(|j| u8::from(i == j)).collect()).collect();
        let out = dense_reference_attention(&h, &w, &heads, &eye).unwrap();
        assert!(max_abs_diff(&out, &h.dot(&w.w_v.t()).dot(&w.w_f.t())) <= 1e-12);
    }

    #[test]
    fn empty_mask_row_rejected() {
        let h = Array2::<f64>::zeros((2, 2));
        let w = AttentionWeights::identity(2);
        let heads = HeadConfig::new(1, 2).unwrap();
        let mask = vec![vec![1, 0], vec![0, 0]];
        assert!(matches!(
            dense_reference_attention(&h, &w, &heads, &mask),
            Err(QdstError::InvalidInput(_))
        ));
    }
}
