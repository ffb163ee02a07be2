//! Seeded construction of random model instances and batches. Used by
//! the fast verification suite and by tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::nn::{Activation, EncoderLayer, FixedHead, FrozenEncoder, LoraAdapter};

/// "Pretrained" backbone: per-layer Gaussian weights scaled by
/// `1/√fan_in`, zero bias, every layer adapted.
pub fn random_encoder(
    input_dim: usize,
    feature_dim: usize,
    n_layers: usize,
    activation: Activation,
    rng: &mut impl Rng,
) -> Result<FrozenEncoder> {
    let mut layers = Vec::with_capacity(n_layers);
    let mut d_in = input_dim;
    for _ in 0..n_layers {
        let std = 1.0 / (d_in as f64).sqrt();
        let w0 = Matrix::from_fn(feature_dim, d_in, || {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        layers.push(EncoderLayer {
            w0,
            bias: vec![0.0; feature_dim],
            activation,
            adapted: true,
        });
        d_in = feature_dim;
    }
    FrozenEncoder::new(layers)
}

/// Frozen random head, Gaussian scaled by `1/feature_dim`.
pub fn random_head(feature_dim: usize, rng: &mut impl Rng) -> Result<FixedHead> {
    let std = std::env::var("CALIB_HEAD_STD")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0 / feature_dim as f64);
    FixedHead::new(Matrix::from_fn(1, feature_dim, || {
        let g: f64 = rng.sample(StandardNormal);
        g * std
    }))
}

/// Encoder + head + standard-initialized adapter in one call.
pub fn random_instance(
    input_dim: usize,
    feature_dim: usize,
    rank: usize,
    n_layers: usize,
    activation: Activation,
    rng: &mut impl Rng,
) -> Result<(FrozenEncoder, FixedHead, LoraAdapter)> {
    let enc = random_encoder(input_dim, feature_dim, n_layers, activation, rng)?;
    let head = random_head(feature_dim, rng)?;
    let adapter = LoraAdapter::init(&enc, rank, 1.0, rng)?;
    Ok((enc, head, adapter))
}

/// Adapter with every factor entry drawn from `N(0, std²)`; unlike the
/// standard init this makes both factors nonzero so gradients flow into
/// `A` as well.
pub fn dense_random_adapter(
    enc: &FrozenEncoder,
    rank: usize,
    scale: f64,
    std: f64,
    rng: &mut impl Rng,
) -> Result<LoraAdapter> {
    let mut adapter = LoraAdapter::zeros(enc, rank, scale)?;
    for layer in &mut adapter.layers {
        layer.a = Matrix::from_fn(layer.a.rows(), layer.a.cols(), || {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        layer.b = Matrix::from_fn(layer.b.rows(), layer.b.cols(), || {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
    }
    Ok(adapter)
}

/// Gaussian inputs with ±1 labels.
pub fn random_batch(n: usize, input_dim: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs = (0..n)
        .map(|_| (0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ys = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    (xs, ys)
}
