//! Scalar abstraction and small dense helpers shared by the attention kernel
//! and the encoder.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point type the kernels are generic over (`f32` or `f64`).
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Which precision a command runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision '{other}' (expected f32 or f64)")),
        }
    }
}

/// Dot product over two equal-length slices.
///
/// Four independent accumulators let the compiler vectorise the loop without
/// reassociating a single serial sum.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let k = c * 4;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut tail = T::zero();
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Truncated normal (±2σ, resampled) used for weight initialisation.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return T::lit(z * std);
        }
    }
}

pub fn random_matrix<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || truncated_normal(rng, std))
}

pub fn random_vector<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(len, || truncated_normal(rng, std))
}

pub fn all_finite<T: Real>(values: &[T]) -> bool {
    values.iter().all(|v| v.is_finite())
}

pub fn max_abs_diff<T: Real>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}

pub fn cast_matrix<A: Real, B: Real>(m: &Array2<A>) -> Array2<B> {
    m.mapv(|v| B::lit(v.as_f64()))
}
