//! L-layer post-norm transformer encoder with pattern-restricted attention,
//! the `[CLS]` relevance head, Adam training, and the model file format.

mod io;
mod layers;
mod params;
mod train;

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    forward_with_plan, sparse_attention_backward, AttentionCache, AttentionTrace, KernelOptions, SparsePlan,
};
use crate::error::{QdstError, Result};
use crate::pattern::{build_layout, build_pattern, SequenceLayout};
use crate::tensor::Real;

pub use io::{load_model, load_model_expecting, save_model, FORMAT_VERSION, MAGIC};
pub use layers::{gelu, gelu_grad, layer_norm, layer_norm_backward, LAYER_NORM_EPS};
pub use params::{LayerParams, ModelConfig, ModelParams, INIT_STD};
pub use train::{pairwise_loss, pointwise_loss, AdamState, LossKind, StepReport, TrainConfig, TrainExample};

/// Encoder parameters together with their configuration.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub kernel: KernelOptions,
}

pub struct Encoding<T> {
    /// Final-layer hidden states, `n x dim`.
    pub hidden: Array2<T>,
    /// One trace per layer when requested.
    pub traces: Option<Vec<AttentionTrace>>,
}

struct LayerCache<T> {
    attention: AttentionCache<T>,
    attn_dropout: Option<Array2<T>>,
    ln1: layers::LayerNormCache<T>,
    x1: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ffn_dropout: Option<Array2<T>>,
    ln2: layers::LayerNormCache<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    token_ids: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    cls_hidden: Vec<T>,
    n: usize,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            kernel: KernelOptions::default(),
        })
    }

    /// Freshly initialised model, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(config, params)
    }

    pub fn with_kernel(mut self, kernel: KernelOptions) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn layout(&self, query_tokens: &[u32], doc_sentences: &[Vec<u32>]) -> Result<SequenceLayout> {
        build_layout(query_tokens, doc_sentences, self.config.max_len)
    }

    fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        if layout.n() > self.config.max_len {
            return Err(QdstError::invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                layout.n(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = layout.token_ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(QdstError::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn compile(&self, layout: &SequenceLayout) -> Result<Arc<SparsePlan>> {
        let pattern = build_pattern(layout, &self.config.pattern)?;
        Ok(Arc::new(SparsePlan::compile(&pattern, self.kernel.block_size)))
    }

    fn embed(&self, layout: &SequenceLayout) -> Array2<T> {
        let p = &self.params;
        let mut x = Array2::zeros((layout.n(), self.config.dim));
        for (pos, (mut row, &id)) in x.outer_iter_mut().zip(layout.token_ids()).enumerate() {
            row.assign(&(&p.token_embeddings.row(id as usize) + &p.position_embeddings.row(pos)));
        }
        x
    }

    fn run(
        &self,
        layout: &SequenceLayout,
        record_trace: bool,
        keep_cache: bool,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<T>, Option<Vec<AttentionTrace>>, Vec<LayerCache<T>>)> {
        self.check_layout(layout)?;
        let plan = self.compile(layout)?;
        let heads = self.config.head_config();
        let rate = self.config.dropout_rate;
        let mut x = self.embed(layout);
        let mut traces = record_trace.then(Vec::new);
        let mut caches = Vec::new();
        for layer in &self.params.layers {
            let fwd = forward_with_plan(&x, &layer.attention, &heads, &plan, &self.kernel, record_trace, keep_cache)?;
            let mut attn = fwd.output;
            let attn_dropout = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(layers::dropout_mask(rng, attn.dim(), rate)),
                _ => None,
            };
            if let Some(mask) = &attn_dropout {
                attn *= mask;
            }
            let (x1, ln1) = layer_norm(&(&x + &attn), &layer.ln1_gamma, &layer.ln1_beta);
            let ffn_pre = x1.dot(&layer.ffn_w1.t()) + &layer.ffn_b1;
            let ffn_act = ffn_pre.mapv(gelu);
            let mut ffn_out = ffn_act.dot(&layer.ffn_w2.t()) + &layer.ffn_b2;
            let ffn_dropout = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => Some(layers::dropout_mask(rng, ffn_out.dim(), rate)),
                _ => None,
            };
            if let Some(mask) = &ffn_dropout {
                ffn_out *= mask;
            }
            let (x2, ln2) = layer_norm(&(&x1 + &ffn_out), &layer.ln2_gamma, &layer.ln2_beta);
            if let (Some(t), Some(trace)) = (traces.as_mut(), fwd.trace) {
                t.push(trace);
            }
            if let Some(attention) = fwd.cache {
                caches.push(LayerCache {
                    attention,
                    attn_dropout,
                    ln1,
                    x1,
                    ffn_pre,
                    ffn_act,
                    ffn_dropout,
                    ln2,
                });
            }
            x = x2;
        }
        Ok((x, traces, caches))
    }

    /// Final hidden states (dropout off).
    pub fn encode(&self, layout: &SequenceLayout, record_trace: bool) -> Result<Encoding<T>> {
        let (hidden, traces, _) = self.run(layout, record_trace, false, None)?;
        Ok(Encoding { hidden, traces })
    }

    fn head(&self, cls: impl Iterator<Item = T>) -> T {
        cls.zip(self.params.head_weight.iter())
            .fold(self.params.head_bias[0], |acc, (h, &w)| acc + h * w)
    }

    /// Relevance `f(q, d)` from the final `[CLS]` vector.
    pub fn score_layout(&self, layout: &SequenceLayout) -> Result<T> {
        let enc = self.encode(layout, false)?;
        Ok(self.head(enc.hidden.row(0).iter().copied()))
    }

    pub fn score(&self, query_tokens: &[u32], doc_sentences: &[Vec<u32>]) -> Result<T> {
        self.score_layout(&self.layout(query_tokens, doc_sentences)?)
    }

    /// Forward pass that keeps what backpropagation needs. Dropout is applied
    /// when `dropout_rng` is given and the configured rate is positive.
    pub fn forward_for_training(
        &self,
        layout: &SequenceLayout,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(T, ForwardCache<T>)> {
        let (hidden, _, layers) = self.run(layout, false, true, dropout_rng)?;
        let cls_hidden: Vec<T> = hidden.row(0).to_vec();
        let score = self.head(cls_hidden.iter().copied());
        Ok((
            score,
            ForwardCache {
                token_ids: layout.token_ids().to_vec(),
                layers,
                cls_hidden,
                n: layout.n(),
            },
        ))
    }

    /// Accumulates `d_score * d(score)/d(param)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_score: T, grads: &mut ModelParams<T>) -> Result<()> {
        if cache.layers.len() != self.params.layers.len() {
            return Err(QdstError::InvalidState(
                "forward cache does not match the model's layer count".into(),
            ));
        }
        let dim = self.config.dim;
        grads.head_bias[0] += d_score;
        for (g, &h) in grads.head_weight.iter_mut().zip(&cache.cls_hidden) {
            *g += d_score * h;
        }
        let mut dx = Array2::<T>::zeros((cache.n, dim));
        dx.row_mut(0).assign(&(&self.params.head_weight * d_score));

        for ((layer, lc), grad) in self
            .params
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            let (dr2, dg2, db2) = layer_norm_backward(&dx, &layer.ln2_gamma, &lc.ln2);
            grad.ln2_gamma += &dg2;
            grad.ln2_beta += &db2;
            let mut d_ffn = dr2.clone();
            if let Some(mask) = &lc.ffn_dropout {
                d_ffn *= mask;
            }
            grad.ffn_w2 += &d_ffn.t().dot(&lc.ffn_act);
            grad.ffn_b2 += &d_ffn.sum_axis(Axis(0));
            let d_act = d_ffn.dot(&layer.ffn_w2);
            let d_pre = d_act * &lc.ffn_pre.mapv(gelu_grad);
            grad.ffn_w1 += &d_pre.t().dot(&lc.x1);
            grad.ffn_b1 += &d_pre.sum_axis(Axis(0));
            let dx1 = dr2 + d_pre.dot(&layer.ffn_w1);

            let (dr1, dg1, db1) = layer_norm_backward(&dx1, &layer.ln1_gamma, &lc.ln1);
            grad.ln1_gamma += &dg1;
            grad.ln1_beta += &db1;
            let mut d_attn = dr1.clone();
            if let Some(mask) = &lc.attn_dropout {
                d_attn *= mask;
            }
            let (dx_attn, g_attn) =
                sparse_attention_backward(&d_attn, &layer.attention, Some(&lc.attention), &self.kernel)?;
            for ((_, acc), (_, g)) in grad.attention.tensors_mut().into_iter().zip(g_attn.tensors()) {
                *acc += g;
            }
            dx = dr1 + dx_attn;
        }

        for (pos, (row, &id)) in dx.outer_iter().zip(&cache.token_ids).enumerate() {
            let mut tok = grads.token_embeddings.row_mut(id as usize);
            tok += &row;
            let mut p = grads.position_embeddings.row_mut(pos);
            p += &row;
        }
        Ok(())
    }
}

/// Hidden states of `layout` under `params`; see [`Model::encode`].
pub fn encode<T: Real>(
    layout: &SequenceLayout,
    params: &ModelParams<T>,
    config: &ModelConfig,
    record_trace: bool,
) -> Result<Encoding<T>> {
    let model = Model::new(config.clone(), params.clone())?;
    model.encode(layout, record_trace)
}
