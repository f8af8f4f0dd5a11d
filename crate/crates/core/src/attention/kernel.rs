use std::sync::Arc;

use ndarray::Array2;

use super::{project_qkv, AttentionWeights, HeadConfig};
use crate::error::{QdstError, Result};
use crate::pattern::BlockSparsePattern;
use crate::tensor::{axpy, dot, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOptions {
    /// Rows per band block.
    pub block_size: usize,
    /// Worker threads across heads; 1 runs inline.
    pub threads: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            block_size: 64,
            threads: 1,
        }
    }
}

/// Compiled row structure of a pattern: allowed columns per row in CSR form,
/// plus the order in which rows are visited (band blocks, then the dense strip).
#[derive(Debug, Clone)]
pub struct SparsePlan {
    n: usize,
    active: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    band_blocks: Vec<Vec<u32>>,
    strip_rows: Vec<u32>,
    pattern: BlockSparsePattern,
}

impl SparsePlan {
    pub fn compile(pattern: &BlockSparsePattern, block_size: usize) -> Self {
        let n = pattern.n();
        let active = pattern.active();
        let block_size = block_size.max(1);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut scratch = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            scratch.clear();
            pattern.extend_row_columns(i, &mut scratch);
            cols.extend(scratch.iter().map(|&j| j as u32));
            row_ptr.push(cols.len());
        }
        let mut band_blocks = Vec::new();
        let mut strip_rows = Vec::new();
        for start in (0..active).step_by(block_size) {
            let end = (start + block_size).min(active);
            let mut block = Vec::with_capacity(end - start);
            for i in start..end {
                if pattern.row_is_dense(i) {
                    strip_rows.push(i as u32);
                } else {
                    block.push(i as u32);
                }
            }
            if !block.is_empty() {
                band_blocks.push(block);
            }
        }
        Self {
            n,
            active,
            row_ptr,
            cols,
            band_blocks,
            strip_rows,
            pattern: pattern.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn pattern(&self) -> &BlockSparsePattern {
        &self.pattern
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    #[inline]
    fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    fn max_row_len(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Active rows in processing order. Every active row appears once.
    fn visit_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.band_blocks
            .iter()
            .flatten()
            .chain(self.strip_rows.iter())
            .map(|&i| i as usize)
    }
}

/// Tracks how many score/probability elements the kernel keeps alive on the
/// current thread. Lets tests assert the sparse path never holds `n^2` scores.
pub mod score_storage {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub fn reset() {
        LIVE.with(|l| l.set(0));
        PEAK.with(|p| p.set(0));
    }

    /// Largest number of simultaneously live score elements since `reset`.
    pub fn peak() -> usize {
        PEAK.with(|p| p.get())
    }

    pub fn live() -> usize {
        LIVE.with(|l| l.get())
    }

    #[derive(Debug)]
    pub(crate) struct Guard(usize);

    impl Guard {
        pub(crate) fn new(elems: usize) -> Self {
            let now = LIVE.with(|l| {
                let v = l.get() + elems;
                l.set(v);
                v
            });
            PEAK.with(|p| p.set(p.get().max(now)));
            Self(elems)
        }
    }

    impl Drop for Guard {
        fn drop(&mut self) {
            LIVE.with(|l| l.set(l.get().saturating_sub(self.0)));
        }
    }
}

/// Attention distributions recorded during a forward pass, stored sparsely:
/// only allowed `(i, j)` entries are kept. Values are widened to `f64`.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pattern: BlockSparsePattern,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    heads: Vec<Vec<f64>>,
}

impl AttentionTrace {
    fn from_plan<T: Real>(plan: &SparsePlan, probs: &[T], num_heads: usize) -> Self {
        let nnz = plan.nnz();
        Self {
            pattern: plan.pattern.clone(),
            row_ptr: plan.row_ptr.clone(),
            cols: plan.cols.clone(),
            heads: (0..num_heads)
                .map(|h| probs[h * nnz..(h + 1) * nnz].iter().map(|p| p.as_f64()).collect())
                .collect(),
        }
    }

    /// Builds a trace from dense per-head `n x n` weight matrices. Rows must be
    /// distributions over the pattern's allowed columns (PAD rows all zero).
    pub fn from_dense(pattern: &BlockSparsePattern, heads: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = pattern.n();
        let plan = SparsePlan::compile(pattern, 64);
        let mut values = Vec::with_capacity(heads.len());
        for (h, dense) in heads.iter().enumerate() {
            if dense.len() != n || dense.iter().any(|r| r.len() != n) {
                return Err(QdstError::invalid(format!("head {h} weights are not {n}x{n}")));
            }
            let mut vals = Vec::with_capacity(plan.nnz());
            for (i, row) in dense.iter().enumerate() {
                let mut allowed_mass = 0.0;
                for (j, &w) in row.iter().enumerate() {
                    if w < 0.0 || !w.is_finite() {
                        return Err(QdstError::invalid(format!("head {h} weight ({i},{j}) = {w}")));
                    }
                    if !pattern.contains(i, j) && w != 0.0 {
                        return Err(QdstError::invalid(format!(
                            "head {h} puts mass {w} on disallowed ({i},{j})"
                        )));
                    }
                    if pattern.contains(i, j) {
                        allowed_mass += w;
                    }
                }
                if i < pattern.active() && (allowed_mass - 1.0).abs() > 1e-6 {
                    return Err(QdstError::invalid(format!(
                        "head {h} row {i} sums to {allowed_mass}"
                    )));
                }
                vals.extend(plan.row(i).iter().map(|&j| row[j as usize]));
            }
            values.push(vals);
        }
        Ok(Self {
            pattern: pattern.clone(),
            row_ptr: plan.row_ptr,
            cols: plan.cols,
            heads: values,
        })
    }

    pub fn pattern(&self) -> &BlockSparsePattern {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Allowed columns of row `i` and head `head`'s weights on them.
    pub fn row(&self, head: usize, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.heads[head][r])
    }

    /// Weight of `i -> j`; zero outside the pattern.
    pub fn weight(&self, head: usize, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(head, i);
        cols.binary_search(&(j as u32)).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn dense_head(&self, head: usize) -> Vec<Vec<f64>> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|j| self.weight(head, i, j)).collect())
            .collect()
    }
}

/// Saved forward state for [`sparse_attention_backward`].
#[derive(Debug)]
pub struct AttentionCache<T> {
    heads: HeadConfig,
    plan: Arc<SparsePlan>,
    input: Array2<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    concat: Array2<T>,
    _storage: score_storage::Guard,
}

impl<T> AttentionCache<T> {
    pub fn plan(&self) -> &SparsePlan {
        &self.plan
    }

    /// Number of probability values retained for the backward pass.
    pub fn stored_scores(&self) -> usize {
        self.probs.len()
    }
}

pub struct ForwardOutput<T> {
    pub output: Array2<T>,
    pub trace: Option<AttentionTrace>,
    pub cache: Option<AttentionCache<T>>,
}

/// Sparse multi-head attention; see [`forward_with_plan`] for the variant that
/// reuses a compiled plan and keeps a cache for backpropagation.
pub fn sparse_attention_forward<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    pattern: &BlockSparsePattern,
    record_trace: bool,
) -> Result<(Array2<T>, Option<AttentionTrace>)> {
    let opts = KernelOptions::default();
    let plan = Arc::new(SparsePlan::compile(pattern, opts.block_size));
    let out = forward_with_plan(h, weights, heads, &plan, &opts, record_trace, false)?;
    Ok((out.output, out.trace))
}

/// Row-major `n x dim` to head-major `[head][row][d_k]`.
fn split_heads<T: Real>(m: &Array2<T>, heads: &HeadConfig) -> Vec<T> {
    let (n, dk) = (m.nrows(), heads.head_dim);
    let mut out = vec![T::zero(); heads.num_heads * n * dk];
    for (i, row) in m.outer_iter().enumerate() {
        let row = row.as_slice().expect("row-major");
        for h in 0..heads.num_heads {
            out[(h * n + i) * dk..(h * n + i + 1) * dk].copy_from_slice(&row[h * dk..(h + 1) * dk]);
        }
    }
    out
}

fn merge_heads<T: Real>(buf: &[T], n: usize, heads: &HeadConfig) -> Array2<T> {
    let dk = heads.head_dim;
    let mut out = Array2::zeros((n, heads.model_dim()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("row-major");
        for h in 0..heads.num_heads {
            row[h * dk..(h + 1) * dk].copy_from_slice(&buf[(h * n + i) * dk..(h * n + i + 1) * dk]);
        }
    }
    out
}

/// Runs `f(head, chunk_a, chunk_b)` for every head over disjoint per-head
/// slices, spread across `threads` scoped workers.
fn for_each_head<T, F>(threads: usize, num_heads: usize, a: &mut [T], a_stride: usize, b: &mut [T], b_stride: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T]) + Sync,
{
    let threads = threads.clamp(1, num_heads.max(1));
    let mut work: Vec<(usize, &mut [T], &mut [T])> = a
        .chunks_mut(a_stride.max(1))
        .zip(b.chunks_mut(b_stride.max(1)))
        .take(num_heads)
        .enumerate()
        .map(|(h, (x, y))| (h, x, y))
        .collect();
    if threads == 1 {
        for (h, x, y) in work.iter_mut() {
            f(*h, x, y);
        }
        return;
    }
    let per = num_heads.div_ceil(threads);
    std::thread::scope(|s| {
        for group in work.chunks_mut(per) {
            let f = &f;
            s.spawn(move || {
                for (h, x, y) in group.iter_mut() {
                    f(*h, x, y);
                }
            });
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn forward_with_plan<T: Real>(
    h: &Array2<T>,
    weights: &AttentionWeights<T>,
    heads: &HeadConfig,
    plan: &Arc<SparsePlan>,
    opts: &KernelOptions,
    record_trace: bool,
    keep_cache: bool,
) -> Result<ForwardOutput<T>> {
    let n = h.nrows();
    if plan.n() != n {
        return Err(QdstError::invalid(format!(
            "pattern length {} does not match sequence length {n}",
            plan.n()
        )));
    }
    if heads.model_dim() != weights.dim() {
        return Err(QdstError::invalid(format!(
            "head config dim {} does not match weights dim {}",
            heads.model_dim(),
            weights.dim()
        )));
    }
    let (q, k, v) = project_qkv(h, weights)?;
    let (qh, kh, vh) = (split_heads(&q, heads), split_heads(&k, heads), split_heads(&v, heads));
    let dk = heads.head_dim;
    let nh = heads.num_heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let nnz = plan.nnz();
    let store_probs = record_trace || keep_cache;

    let guard = score_storage::Guard::new(if store_probs { nh * nnz } else { 0 });
    let mut probs = vec![T::zero(); if store_probs { nh * nnz } else { 0 }];
    let mut out = vec![T::zero(); nh * n * dk];
    let max_row = plan.max_row_len();

    let head_fn = |hd: usize, out_h: &mut [T], probs_h: &mut [T]| {
        let _scratch_guard = score_storage::Guard::new(max_row);
        let mut scratch = vec![T::zero(); max_row];
        let base = hd * n * dk;
        let qh = &qh[base..base + n * dk];
        let kh = &kh[base..base + n * dk];
        let vh = &vh[base..base + n * dk];
        for i in plan.visit_order() {
            let cols = plan.row(i);
            let qi = &qh[i * dk..(i + 1) * dk];
            let scores = &mut scratch[..cols.len()];
            let mut max = T::neg_infinity();
            for (s, &j) in scores.iter_mut().zip(cols) {
                let j = j as usize;
                *s = dot(qi, &kh[j * dk..(j + 1) * dk]) * scale;
                max = max.max(*s);
            }
            let mut total = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let inv = T::one() / total;
            let oi = &mut out_h[i * dk..(i + 1) * dk];
            for (s, &j) in scores.iter_mut().zip(cols) {
                *s *= inv;
                let j = j as usize;
                axpy(*s, &vh[j * dk..(j + 1) * dk], oi);
            }
            if store_probs {
                probs_h[plan.row_range(i)].copy_from_slice(scores);
            }
        }
    };
    if store_probs {
        for_each_head(opts.threads, nh, &mut out, n * dk, &mut probs, nnz, head_fn);
    } else {
        let mut empty: Vec<T> = vec![T::zero(); nh];
        for_each_head(opts.threads, nh, &mut out, n * dk, &mut empty, 1, |hd, o, _| {
            head_fn(hd, o, &mut [])
        });
    }

    let concat = merge_heads(&out, n, heads);
    let output = concat.dot(&weights.w_f.t());
    let trace = record_trace.then(|| AttentionTrace::from_plan(plan, &probs, nh));
    let cache = keep_cache.then(|| AttentionCache {
        heads: *heads,
        plan: Arc::clone(plan),
        input: h.clone(),
        q: qh,
        k: kh,
        v: vh,
        probs,
        concat,
        _storage: guard,
    });
    Ok(ForwardOutput { output, trace, cache })
}

/// Reverse-mode gradients of the attention sublayer.
///
/// Returns `(dL/dH, dL/dW)` for upstream gradient `dL/dOutput`. The softmax
/// Jacobian is applied per row over allowed columns only, so masked scores
/// receive no gradient.
pub fn sparse_attention_backward<T: Real>(
    upstream: &Array2<T>,
    weights: &AttentionWeights<T>,
    cache: Option<&AttentionCache<T>>,
    opts: &KernelOptions,
) -> Result<(Array2<T>, AttentionWeights<T>)> {
    let cache = cache.ok_or_else(|| {
        QdstError::InvalidState("backward called without a cached forward pass".into())
    })?;
    let plan = &cache.plan;
    let heads = cache.heads;
    let n = plan.n();
    if upstream.dim() != (n, heads.model_dim()) {
        return Err(QdstError::invalid(format!(
            "upstream gradient has shape {:?}, expected ({n}, {})",
            upstream.dim(),
            heads.model_dim()
        )));
    }
    let (nh, dk) = (heads.num_heads, heads.head_dim);
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let nnz = plan.nnz();

    let grad_f = upstream.t().dot(&cache.concat);
    let d_concat = upstream.dot(&weights.w_f);
    let d_out = split_heads(&d_concat, &heads);

    // Per head: [dq | dk | dv], each n*dk.
    let mut grads = vec![T::zero(); nh * 3 * n * dk];
    let mut dummy = vec![T::zero(); nh];
    let max_row = plan.max_row_len();
    for_each_head(opts.threads, nh, &mut grads, 3 * n * dk, &mut dummy, 1, |hd, g, _| {
        let _scratch_guard = score_storage::Guard::new(max_row);
        let mut dp = vec![T::zero(); max_row];
        let base = hd * n * dk;
        let (q, k, v) = (
            &cache.q[base..base + n * dk],
            &cache.k[base..base + n * dk],
            &cache.v[base..base + n * dk],
        );
        let d_o = &d_out[base..base + n * dk];
        let probs = &cache.probs[hd * nnz..(hd + 1) * nnz];
        let (dq, rest) = g.split_at_mut(n * dk);
        let (dkey, dv) = rest.split_at_mut(n * dk);
        for i in plan.visit_order() {
            let cols = plan.row(i);
            let p = &probs[plan.row_range(i)];
            let doi = &d_o[i * dk..(i + 1) * dk];
            let dp = &mut dp[..cols.len()];
            let mut weighted = T::zero();
            for ((d, &pj), &j) in dp.iter_mut().zip(p).zip(cols) {
                let j = j as usize;
                *d = dot(doi, &v[j * dk..(j + 1) * dk]);
                weighted += pj * *d;
                axpy(pj, doi, &mut dv[j * dk..(j + 1) * dk]);
            }
            let qi = &q[i * dk..(i + 1) * dk];
            for ((&d, &pj), &j) in dp.iter().zip(p).zip(cols) {
                let j = j as usize;
                let ds = pj * (d - weighted) * scale;
                axpy(ds, &k[j * dk..(j + 1) * dk], &mut dq[i * dk..(i + 1) * dk]);
                axpy(ds, qi, &mut dkey[j * dk..(j + 1) * dk]);
            }
        }
    });

    let mut dq_h = vec![T::zero(); nh * n * dk];
    let mut dk_h = vec![T::zero(); nh * n * dk];
    let mut dv_h = vec![T::zero(); nh * n * dk];
    for hd in 0..nh {
        let g = &grads[hd * 3 * n * dk..(hd + 1) * 3 * n * dk];
        let dst = hd * n * dk..(hd + 1) * n * dk;
        dq_h[dst.clone()].copy_from_slice(&g[..n * dk]);
        dk_h[dst.clone()].copy_from_slice(&g[n * dk..2 * n * dk]);
        dv_h[dst].copy_from_slice(&g[2 * n * dk..]);
    }
    let dq = merge_heads(&dq_h, n, &heads);
    let dkm = merge_heads(&dk_h, n, &heads);
    let dv = merge_heads(&dv_h, n, &heads);

    let x = &cache.input;
    let grad_q = dq.t().dot(x);
    let grad_k = dkm.t().dot(x);
    let grad_v = dv.t().dot(x);
    let dx = dq.dot(&weights.w_q) + dkm.dot(&weights.w_k) + dv.dot(&weights.w_v);
    Ok((
        dx,
        AttentionWeights {
            w_q: grad_q,
            w_k: grad_k,
            w_v: grad_v,
            w_f: grad_f,
        },
    ))
}
