#![allow(dead_code)]

pub mod oracles;

use ndarray::Array2;
use qdst::model::{Model, ModelConfig, ModelParams};
use qdst::pattern::{special, SequenceLayout, TokenRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a - b| / max(|a| + |b|, 1e-8)`
pub fn relative_error(numerical: f64, analytical: f64) -> f64 {
    (numerical - analytical).abs() / (numerical.abs() + analytical.abs()).max(1e-8)
}

/// Random valid layout: query length in `1..=max_q`, then sentences until the
/// document fills `n` tokens (the tail sentence may be shortened). Optionally
/// appends `pad` PAD positions.
pub fn random_layout(rng: &mut impl Rng, n: usize, max_q: usize, vocab: u32, pad: usize) -> SequenceLayout {
    assert!(n >= 3);
    let q = rng.random_range(1..=max_q.min(n - 2).max(1));
    let mut roles = vec![TokenRole::Cls];
    let mut ids = vec![special::CLS];
    for _ in 0..q {
        roles.push(TokenRole::Query);
        ids.push(rng.random_range(special::RESERVED..vocab));
    }
    roles.push(TokenRole::Sep);
    ids.push(special::SEP);
    while roles.len() < n {
        let room = n - roles.len();
        if room < 2 {
            // A lone trailing token can only extend the previous sentence.
            if roles.last() == Some(&TokenRole::Sep) {
                break;
            }
            roles.push(TokenRole::Doc);
            ids.push(rng.random_range(special::RESERVED..vocab));
            continue;
        }
        let len = rng.random_range(1..=8).min(room - 1);
        roles.push(TokenRole::Sos);
        ids.push(special::SOS);
        for _ in 0..len {
            roles.push(TokenRole::Doc);
            ids.push(rng.random_range(special::RESERVED..vocab));
        }
    }
    for _ in 0..pad {
        roles.push(TokenRole::Pad);
        ids.push(special::PAD);
    }
    SequenceLayout::from_parts(roles, ids).expect("generated layout is valid")
}

/// Fills every parameter with N(0, std^2)-ish noise so gradients are not tiny.
pub fn randomize_params(params: &mut ModelParams<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            let noise = (rng.random::<f64>() * 2.0 - 1.0) * std * 1.7;
            *v = if name.contains("gamma") { 1.0 + noise } else { noise };
        }
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() * 2.0 - 1.0)
}

pub fn tiny_model(config: ModelConfig, seed: u64) -> Model<f64> {
    Model::init(config, seed).unwrap()
}
