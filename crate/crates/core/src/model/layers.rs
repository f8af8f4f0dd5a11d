//! Token-wise pieces of the encoder layer: layer norm, GELU, dropout.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &Array2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, LayerNormCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.outer_iter_mut() {
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let r = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        inv_std.push(r);
    }
    let y = &normalized * gamma + beta;
    (y, LayerNormCache { normalized, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    gamma: &Array1<T>,
    cache: &LayerNormCache<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let dgamma = (dy * &cache.normalized).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let d = T::lit(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xhat), &r) in dx.outer_iter_mut().zip(cache.normalized.outer_iter()).zip(&cache.inv_std) {
        let sum = row.iter().copied().sum::<T>();
        let dot = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
            *v = r / d * (d * *v - sum - xh * dot);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Inverted-dropout mask: kept entries are `1/(1-rate)`, dropped are 0.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), rate: f64) -> Array2<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { T::zero() } else { keep })
}
