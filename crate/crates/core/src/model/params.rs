use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, HeadConfig};
use crate::error::{QdstError, Result};
use crate::pattern::{special, PatternConfig, Preset};
use crate::tensor::{all_finite, random_matrix, Real};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub pattern: PatternConfig,
}

fn default_max_len() -> usize {
    2048
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(num_layers: usize, dim: usize, heads: usize, vocab_size: usize, pattern: PatternConfig) -> Self {
        Self {
            num_layers,
            dim,
            heads,
            max_len: default_max_len(),
            vocab_size,
            dropout_rate: default_dropout(),
            pattern,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(QdstError::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(QdstError::invalid(format!("max_len must be >= 3, got {}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(QdstError::invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.vocab_size <= special::RESERVED as usize {
            return Err(QdstError::invalid(format!(
                "vocab_size {} leaves no room beyond the {} reserved ids",
                self.vocab_size,
                special::RESERVED
            )));
        }
        self.pattern.validate()
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_heads: self.heads,
            head_dim: self.dim / self.heads,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.pattern.preset = preset;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attention: AttentionWeights<T>,
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    /// `ffn_dim x dim`
    pub ffn_w1: Array2<T>,
    pub ffn_b1: Array1<T>,
    /// `dim x ffn_dim`
    pub ffn_w2: Array2<T>,
    pub ffn_b2: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
}

/// Every learnable tensor of the encoder and its scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embeddings: Array2<T>,
    pub position_embeddings: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_weight: Array1<T>,
    pub head_bias: Array1<T>,
}

impl<T: Real> ModelParams<T> {
    /// Truncated normal weights, zero biases, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (d, f) = (config.dim, config.ffn_dim());
        let mut p = Self::zeros(config);
        p.token_embeddings = random_matrix(rng, config.vocab_size, d, INIT_STD);
        p.position_embeddings = random_matrix(rng, config.max_len, d, INIT_STD);
        for layer in &mut p.layers {
            layer.attention = AttentionWeights::random(rng, d, INIT_STD);
            layer.ffn_w1 = random_matrix(rng, f, d, INIT_STD);
            layer.ffn_w2 = random_matrix(rng, d, f, INIT_STD);
            layer.ln1_gamma.fill(T::one());
            layer.ln2_gamma.fill(T::one());
        }
        p.head_weight = Array1::from_shape_simple_fn(d, || crate::tensor::truncated_normal(rng, INIT_STD));
        p
    }

    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f) = (config.dim, config.ffn_dim());
        Self {
            token_embeddings: Array2::zeros((config.vocab_size, d)),
            position_embeddings: Array2::zeros((config.max_len, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    attention: AttentionWeights::zeros(d),
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    ffn_w1: Array2::zeros((f, d)),
                    ffn_b1: Array1::zeros(f),
                    ffn_w2: Array2::zeros((d, f)),
                    ffn_b2: Array1::zeros(d),
                    ln2_gamma: Array1::zeros(d),
                    ln2_beta: Array1::zeros(d),
                })
                .collect(),
            head_weight: Array1::zeros(d),
            head_bias: Array1::zeros(1),
        }
    }

    /// Tensors in their fixed serialisation order, flattened row-major.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        fn flat<A, D: ndarray::Dimension>(a: &ndarray::Array<A, D>) -> &[A] {
            a.as_slice().expect("parameters are stored contiguously")
        }
        let mut out = vec![
            ("token_embeddings".to_string(), flat(&self.token_embeddings)),
            ("position_embeddings".to_string(), flat(&self.position_embeddings)),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.attention.tensors() {
                out.push((format!("layer{l}.{name}"), flat(m)));
            }
            out.extend([
                (format!("layer{l}.ln1_gamma"), flat(&layer.ln1_gamma)),
                (format!("layer{l}.ln1_beta"), flat(&layer.ln1_beta)),
                (format!("layer{l}.ffn_w1"), flat(&layer.ffn_w1)),
                (format!("layer{l}.ffn_b1"), flat(&layer.ffn_b1)),
                (format!("layer{l}.ffn_w2"), flat(&layer.ffn_w2)),
                (format!("layer{l}.ffn_b2"), flat(&layer.ffn_b2)),
                (format!("layer{l}.ln2_gamma"), flat(&layer.ln2_gamma)),
                (format!("layer{l}.ln2_beta"), flat(&layer.ln2_beta)),
            ]);
        }
        out.push(("head_weight".to_string(), flat(&self.head_weight)));
        out.push(("head_bias".to_string(), flat(&self.head_bias)));
        out
    }

    /// Mutable view of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        fn flat<A, D: ndarray::Dimension>(a: &mut ndarray::Array<A, D>) -> &mut [A] {
            a.as_slice_mut().expect("parameters are stored contiguously")
        }
        let mut out = vec![
            ("token_embeddings".to_string(), flat(&mut self.token_embeddings)),
            ("position_embeddings".to_string(), flat(&mut self.position_embeddings)),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                attention,
                ln1_gamma,
                ln1_beta,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_gamma,
                ln2_beta,
            } = layer;
            for (name, m) in attention.tensors_mut() {
                out.push((format!("layer{l}.{name}"), flat(m)));
            }
            out.extend([
                (format!("layer{l}.ln1_gamma"), flat(ln1_gamma)),
                (format!("layer{l}.ln1_beta"), flat(ln1_beta)),
                (format!("layer{l}.ffn_w1"), flat(ffn_w1)),
                (format!("layer{l}.ffn_b1"), flat(ffn_b1)),
                (format!("layer{l}.ffn_w2"), flat(ffn_w2)),
                (format!("layer{l}.ffn_b2"), flat(ffn_b2)),
                (format!("layer{l}.ln2_gamma"), flat(ln2_gamma)),
                (format!("layer{l}.ln2_beta"), flat(ln2_beta)),
            ]);
        }
        out.push(("head_weight".to_string(), flat(&mut self.head_weight)));
        out.push(("head_bias".to_string(), flat(&mut self.head_bias)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| all_finite(t))
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(QdstError::invalid(format!(
                "parameter set has {} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.len() != b.len() {
                return Err(QdstError::invalid(format!(
                    "{name} has {} elements, config implies {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self, config: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(config);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }
}
