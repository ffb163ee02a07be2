//! Frozen multilayer encoder with low-rank adapter slots, fixed linear
//! head, and a hand-derived backward pass for the adapter parameters.
//!
//! The hypothesis is `f = head ∘ encoder`, where the encoder weights and
//! the head are frozen after construction and only the adapter factors
//! `(A, B)` of each adapted layer are trainable. The effective weight of
//! an adapted layer is `W0 + scale·B·A`; the forward pass keeps the
//! low-rank factorization (`W0·u + scale·B·(A·u)`) instead of
//! materializing the delta.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reg::{dist, dist_grad_zp, RegSpec};

/// Pointwise nonlinearity applied after each encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x` (relu uses 0 at the kink).
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// One frozen encoder layer. `adapted` marks whether an adapter slot
/// attaches to this layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub w0: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub adapted: bool,
}

/// Frozen feature encoder; weights never change after construction.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    layers: Vec<EncoderLayer>,
    input_dim: usize,
    feature_dim: usize,
}

impl FrozenEncoder {
    pub fn new(layers: Vec<EncoderLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        let mut dim = layers[0].w0.cols();
        let input_dim = dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.w0.cols() != dim {
                return Err(Error::shape(format!(
                    "layer {i} expects input {} but previous layer outputs {dim}",
                    layer.w0.cols()
                )));
            }
            if layer.bias.len() != layer.w0.rows() {
                return Err(Error::shape(format!("layer {i} bias length")));
            }
            if !layer.w0.all_finite() || !layer.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {i}")));
            }
            dim = layer.w0.rows();
        }
        Ok(FrozenEncoder {
            feature_dim: dim,
            input_dim,
            layers,
        })
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn adapted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.adapted).count()
    }

    /// Feature vector `z = Φ(x)` under the given adapter.
    pub fn encode(&self, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward(adapter, x)?;
        Ok(cache.features)
    }

    /// Forward pass keeping per-layer intermediates for backprop.
    fn forward(&self, adapter: &LoraAdapter, x: &[f64]) -> Result<ForwardCache> {
        adapter.check_shapes(self)?;
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "input length {} but encoder expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut low_rank = Vec::with_capacity(self.layers.len());
        let mut u = x.to_vec();
        let mut slot = 0;
        for layer in &self.layers {
            let mut pre = layer.w0.matvec(&u)?;
            let mut au = None;
            if layer.adapted {
                let lora = &adapter.layers[slot];
                slot += 1;
                let a_u = lora.a.matvec(&u)?;
                let b_au = lora.b.matvec(&a_u)?;
                for (p, d) in pre.iter_mut().zip(&b_au) {
                    *p += adapter.scale * d;
                }
                au = Some(a_u);
            }
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            let out: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(u);
            pres.push(pre);
            low_rank.push(au);
            u = out;
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder features".into()));
        }
        Ok(ForwardCache {
            inputs,
            pres,
            low_rank,
            features: u,
        })
    }
}

/// Frozen linear head mapping features to a single logit.
#[derive(Debug, Clone)]
pub struct FixedHead {
    w_head: Matrix,
}

impl FixedHead {
    pub fn new(w_head: Matrix) -> Result<Self> {
        if w_head.rows() != 1 {
            return Err(Error::shape("head must be a single row"));
        }
        if !w_head.all_finite() {
            return Err(Error::NonFinite("head".into()));
        }
        Ok(FixedHead { w_head })
    }

    pub fn weights(&self) -> &[f64] {
        self.w_head.row(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.w_head.cols()
    }

    /// `logit = w · z`
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.w_head.cols() {
            return Err(Error::shape(format!(
                "head over {} features, got {}",
                self.w_head.cols(),
                z.len()
            )));
        }
        Ok(self.weights().iter().zip(z).map(|(w, v)| w * v).sum())
    }
}

/// Trainable low-rank factors for one adapted layer: `A` is `r×d_in`,
/// `B` is `d_out×r`, delta is `scale·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraLayer {
    /// Materialized weight delta `scale·B·A`; used by oracles and metrics,
    /// never by the training path.
    pub fn materialize_delta(&self, scale: f64) -> Result<Matrix> {
        let mut d = self.b.matmul(&self.a)?;
        d.scale(scale);
        Ok(d)
    }
}

/// The tunable parameter set: one factor pair per adapted encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Zero-initialized factors matching the encoder's adapted layers.
    pub fn zeros(enc: &FrozenEncoder, rank: usize, scale: f64) -> Result<Self> {
        Self::validate_rank_scale(enc, rank, scale)?;
        let layers = enc
            .layers()
            .iter()
            .filter(|l| l.adapted)
            .map(|l| LoraLayer {
                a: Matrix::zeros(rank, l.w0.cols()),
                b: Matrix::zeros(l.w0.rows(), rank),
            })
            .collect();
        Ok(LoraAdapter { layers, rank, scale })
    }

    /// Standard init: `A ~ U(-1/√d_in, 1/√d_in)`, `B = 0`, so the initial
    /// delta is zero and tuning starts at the frozen backbone.
    pub fn init(enc: &FrozenEncoder, rank: usize, scale: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut adapter = Self::zeros(enc, rank, scale)?;
        for (lora, layer) in adapter
            .layers
            .iter_mut()
            .zip(enc.layers().iter().filter(|l| l.adapted))
        {
            let bound = 1.0 / (layer.w0.cols() as f64).sqrt();
            lora.a = Matrix::from_fn(rank, layer.w0.cols(), || rng.random_range(-bound..bound));
        }
        Ok(adapter)
    }

    fn validate_rank_scale(enc: &FrozenEncoder, rank: usize, scale: f64) -> Result<()> {
        if rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        for (i, layer) in enc.layers().iter().enumerate().filter(|(_, l)| l.adapted) {
            let max = layer.w0.cols().min(layer.w0.rows());
            if rank > max {
                return Err(Error::invalid(format!(
                    "rank {rank} exceeds min dim {max} of adapted layer {i}"
                )));
            }
        }
        Ok(())
    }

    /// Shapes must mirror the encoder's adapted layers.
    pub fn check_shapes(&self, enc: &FrozenEncoder) -> Result<()> {
        let adapted: Vec<&EncoderLayer> = enc.layers().iter().filter(|l| l.adapted).collect();
        if adapted.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "adapter has {} layers, encoder has {} adapted layers",
                self.layers.len(),
                adapted.len()
            )));
        }
        for (i, (lora, layer)) in self.layers.iter().zip(&adapted).enumerate() {
            if lora.a.rows() != self.rank
                || lora.a.cols() != layer.w0.cols()
                || lora.b.rows() != layer.w0.rows()
                || lora.b.cols() != self.rank
            {
                return Err(Error::shape(format!("adapter layer {i} factor shapes")));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars; used for communication accounting.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.a.rows() * l.a.cols() + l.b.rows() * l.b.cols())
            .sum()
    }

    /// `self += coeff · other`, elementwise over all factors.
    pub fn axpy_adapter(&mut self, other: &LoraAdapter, coeff: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("adapter layer counts differ"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.a.axpy(&src.a, coeff)?;
            dst.b.axpy(&src.b, coeff)?;
        }
        Ok(())
    }

    /// `self += coeff · grads`.
    pub fn axpy_grads(&mut self, grads: &GradBundle, coeff: f64) -> Result<()> {
        if self.layers.len() != grads.layers.len() {
            return Err(Error::shape("gradient layer counts differ"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&grads.layers) {
            dst.a.axpy(&src.da, coeff)?;
            dst.b.axpy(&src.db, coeff)?;
        }
        Ok(())
    }

    /// Squared Euclidean distance between two adapters' parameters.
    pub fn param_distance_sq(&self, other: &LoraAdapter) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("adapter layer counts differ"));
        }
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.a.data().iter().zip(b.a.data()) {
                acc += (x - y) * (x - y);
            }
            for (x, y) in a.b.data().iter().zip(b.b.data()) {
                acc += (x - y) * (x - y);
            }
        }
        Ok(acc)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.a.all_finite() && l.b.all_finite())
    }
}

/// Gradients with respect to the adapter factors, shape-mirroring the
/// adapter.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub da: Matrix,
    pub db: Matrix,
}

impl GradBundle {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        GradBundle {
            layers: adapter
                .layers
                .iter()
                .map(|l| LayerGrads {
                    da: Matrix::zeros(l.a.rows(), l.a.cols()),
                    db: Matrix::zeros(l.b.rows(), l.b.cols()),
                })
                .collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.da.norm_sq() + l.db.norm_sq()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.da.all_finite() && l.db.all_finite())
    }

    /// `self += coeff · (a - b)`, the parameter-space proximal gradient.
    pub fn add_scaled_param_diff(&mut self, a: &LoraAdapter, b: &LoraAdapter, coeff: f64) -> Result<()> {
        if a.layers.len() != self.layers.len() || b.layers.len() != self.layers.len() {
            return Err(Error::shape("adapter layer counts differ"));
        }
        for ((g, la), lb) in self.layers.iter_mut().zip(&a.layers).zip(&b.layers) {
            g.da.axpy(&la.a, coeff)?;
            g.da.axpy(&lb.a, -coeff)?;
            g.db.axpy(&la.b, coeff)?;
            g.db.axpy(&lb.b, -coeff)?;
        }
        Ok(())
    }

    /// Euclidean distance between two bundles viewed as flat vectors.
    pub fn distance(&self, other: &GradBundle) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.da.data().iter().zip(b.da.data()) {
                acc += (x - y) * (x - y);
            }
            for (x, y) in a.db.data().iter().zip(b.db.data()) {
                acc += (x - y) * (x - y);
            }
        }
        acc.sqrt()
    }
}

struct ForwardCache {
    /// Input to each layer (`u_0 = x`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pres: Vec<Vec<f64>>,
    /// `A·u` per layer (None where not adapted); reused as `dB = dpre·(A·u)ᵀ`.
    low_rank: Vec<Option<Vec<f64>>>,
    features: Vec<f64>,
}

/// Binary logistic loss `log(1 + exp(-y·logit))`, stable for large
/// `|logit|`. Labels are ±1.
pub fn logistic_loss(logit: f64, y: f64) -> f64 {
    debug_assert!(y == 1.0 || y == -1.0, "labels must be ±1");
    let x = -y * logit;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d loss / d logit for the logistic loss.
pub fn logistic_loss_dlogit(logit: f64, y: f64) -> f64 {
    -y / (1.0 + (y * logit).exp())
}

/// Mean loss over a batch, including the feature regularizer when active.
/// `z_ref` must be present iff `reg.lambda > 0`; the references are
/// treated as constants.
pub fn total_loss(
    enc: &FrozenEncoder,
    adapter: &LoraAdapter,
    head: &FixedHead,
    xs: &[Vec<f64>],
    ys: &[f64],
    reg: &RegSpec,
    z_ref: Option<&[Vec<f64>]>,
) -> Result<f64> {
    check_batch(xs, ys, reg, z_ref)?;
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for (i, (x, &y)) in xs.iter().zip(ys).enumerate() {
        let z = enc.encode(adapter, x)?;
        let logit = head.predict(&z)?;
        acc += logistic_loss(logit, y);
        if reg.active() {
            acc += reg.lambda * dist(&z, &z_ref.unwrap()[i], reg.kind)?;
        }
    }
    let loss = acc / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(loss)
}

fn check_batch(xs: &[Vec<f64>], ys: &[f64], reg: &RegSpec, z_ref: Option<&[Vec<f64>]>) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "batch of {} inputs and {} labels",
            xs.len(),
            ys.len()
        )));
    }
    match (reg.active(), z_ref) {
        (true, Some(refs)) if refs.len() == xs.len() => Ok(()),
        (true, _) => Err(Error::invalid(
            "active regularizer needs one reference feature vector per sample",
        )),
        (false, _) => Ok(()),
    }
}

/// Mean batch loss and its analytic gradient with respect to every
/// adapter factor.
///
/// The chain rule runs through the factored delta: with `dW` the gradient
/// of the effective layer weight, `dA = scale·Bᵀ·dW` and
/// `dB = scale·dW·Aᵀ`; both are accumulated as rank-one outer products
/// without materializing `dW`.
pub fn backward(
    enc: &FrozenEncoder,
    adapter: &LoraAdapter,
    head: &FixedHead,
    xs: &[Vec<f64>],
    ys: &[f64],
    reg: &RegSpec,
    z_ref: Option<&[Vec<f64>]>,
) -> Result<(f64, GradBundle)> {
    check_batch(xs, ys, reg, z_ref)?;
    adapter.check_shapes(enc)?;
    let n = xs.len() as f64;
    let mut grads = GradBundle::zeros_like(adapter);
    let mut loss_acc = 0.0;

    for (i, (x, &y)) in xs.iter().zip(ys).enumerate() {
        let cache = enc.forward(adapter, x)?;
        let logit = head.predict(&cache.features)?;
        loss_acc += logistic_loss(logit, y);

        // Seed gradient on the features, already scaled by 1/n.
        let dlogit = logistic_loss_dlogit(logit, y) / n;
        let mut dz: Vec<f64> = head.weights().iter().map(|w| w * dlogit).collect();
        if reg.active() {
            let zr = &z_ref.unwrap()[i];
            loss_acc += reg.lambda * dist(&cache.features, zr, reg.kind)?;
            let g = dist_grad_zp(&cache.features, zr, reg.kind)?;
            for (d, gi) in dz.iter_mut().zip(&g) {
                *d += reg.lambda * gi / n;
            }
        }

        let mut slot = adapter.layers.len();
        for (l, layer) in enc.layers().iter().enumerate().rev() {
            let pre = &cache.pres[l];
            let dpre: Vec<f64> = dz
                .iter()
                .zip(pre)
                .map(|(d, &p)| d * layer.activation.derivative(p))
                .collect();
            let u = &cache.inputs[l];
            let mut du = layer.w0.matvec_t(&dpre)?;
            if layer.adapted {
                slot -= 1;
                let lora = &adapter.layers[slot];
                let au = cache.low_rank[l].as_ref().expect("adapted layer cached A·u");
                let bt_dpre = lora.b.matvec_t(&dpre)?;
                let g = &mut grads.layers[slot];
                g.db.add_outer(&dpre, au, adapter.scale)?;
                g.da.add_outer(&bt_dpre, u, adapter.scale)?;
                let at = lora.a.matvec_t(&bt_dpre)?;
                for (d, v) in du.iter_mut().zip(&at) {
                    *d += adapter.scale * v;
                }
            }
            dz = du;
        }
    }

    let loss = loss_acc / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("adapter gradients".into()));
    }
    Ok((loss, grads))
}

/// Central finite-difference check of [`backward`]. Perturbs every
/// adapter entry by ±`step` and returns the worst relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn fd_check(
    enc: &FrozenEncoder,
    adapter: &LoraAdapter,
    head: &FixedHead,
    xs: &[Vec<f64>],
    ys: &[f64],
    reg: &RegSpec,
    z_ref: Option<&[Vec<f64>]>,
    step: f64,
) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("fd step must be positive, got {step}")));
    }
    let (_, grads) = backward(enc, adapter, head, xs, ys, reg, z_ref)?;
    let mut probe = adapter.clone();
    let mut worst: f64 = 0.0;

    let mut check_entry = |probe: &mut LoraAdapter, layer: usize, which: char, r: usize, c: usize, analytic: f64| -> Result<()> {
        let read = |ad: &LoraAdapter| match which {
            'a' => ad.layers[layer].a.get(r, c),
            _ => ad.layers[layer].b.get(r, c),
        };
        let write = |ad: &mut LoraAdapter, v: f64| match which {
            'a' => ad.layers[layer].a.set(r, c, v),
            _ => ad.layers[layer].b.set(r, c, v),
        };
        let orig = read(probe);
        write(probe, orig + step);
        let up = total_loss(enc, probe, head, xs, ys, reg, z_ref)?;
        write(probe, orig - step);
        let down = total_loss(enc, probe, head, xs, ys, reg, z_ref)?;
        write(probe, orig);
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        Ok(())
    };

    for l in 0..adapter.layers.len() {
        let (ar, ac) = (adapter.layers[l].a.rows(), adapter.layers[l].a.cols());
        for r in 0..ar {
            for c in 0..ac {
                let analytic = grads.layers[l].da.get(r, c);
                check_entry(&mut probe, l, 'a', r, c, analytic)?;
            }
        }
        let (br, bc) = (adapter.layers[l].b.rows(), adapter.layers[l].b.cols());
        for r in 0..br {
            for c in 0..bc {
                let analytic = grads.layers[l].db.get(r, c);
                check_entry(&mut probe, l, 'b', r, c, analytic)?;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::reg::DistanceKind;
    use crate::rng::stream;

    fn identity_encoder(dim: usize, adapted: bool) -> FrozenEncoder {
        let mut w0 = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w0.set(i, i, 1.0);
        }
        FrozenEncoder::new(vec![EncoderLayer {
            w0,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
            adapted,
        }])
        .unwrap()
    }

    /// Straight-line reimplementation of the forward formula with the
    /// delta materialized; the oracle for `encode`.
    fn reference_features(enc: &FrozenEncoder, ad: &LoraAdapter, x: &[f64]) -> Vec<f64> {
        let mut u = x.to_vec();
        let mut slot = 0;
        for layer in enc.layers() {
            let mut w = layer.w0.clone();
            if layer.adapted {
                let delta = ad.layers[slot].materialize_delta(ad.scale).unwrap();
                slot += 1;
                w.axpy(&delta, 1.0).unwrap();
            }
            let mut out = vec![0.0; w.rows()];
            for (r, o) in out.iter_mut().enumerate() {
                let mut acc = layer.bias[r];
                for (c, &uv) in u.iter().enumerate() {
                    acc += w.get(r, c) * uv;
                }
                *o = layer.activation.apply(acc);
            }
            u = out;
        }
        u
    }

    #[test]
    fn zero_adapter_matches_frozen_backbone_exactly() {
        let mut rng = stream(11, &[1]);
        let enc = fixtures::random_encoder(5, 4, 2, Activation::Tanh, &mut rng).unwrap();
        let adapter = LoraAdapter::init(&enc, 2, 1.0, &mut rng).unwrap(); // B = 0
        let mut frozen_only = enc.clone();
        // same weights, no adapter slots
        for layer in &mut frozen_only.layers {
            layer.adapted = false;
        }
        let empty = LoraAdapter {
            layers: vec![],
            rank: 2,
            scale: 1.0,
        };
        let x = vec![0.3, -0.8, 1.1, 0.0, 2.5];
        assert_eq!(
            enc.encode(&adapter, &x).unwrap(),
            frozen_only.encode(&empty, &x).unwrap()
        );
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let enc = identity_encoder(2, true);
        let adapter = LoraAdapter::zeros(&enc, 1, 1.0).unwrap();
        assert_eq!(enc.encode(&adapter, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn encode_matches_reference_reimplementation() {
        let mut rng = stream(3, &[2]);
        let enc = fixtures::random_encoder(6, 4, 2, Activation::Tanh, &mut rng).unwrap();
        let adapter = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
        for _ in 0..10 {
            let (xs, _) = fixtures::random_batch(1, 6, &mut rng);
            let z = enc.encode(&adapter, &xs[0]).unwrap();
            let z_ref = reference_features(&enc, &adapter, &xs[0]);
            for (a, b) in z.iter().zip(&z_ref) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn encode_shape_errors() {
        let enc = identity_encoder(2, true);
        let adapter = LoraAdapter::zeros(&enc, 1, 1.0).unwrap();
        assert!(enc.encode(&adapter, &[1.0]).is_err());
        let other = identity_encoder(3, true);
        let wrong = LoraAdapter::zeros(&other, 1, 1.0).unwrap();
        assert!(enc.encode(&wrong, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        let head = FixedHead::new(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(head.predict(&[3.0, -5.0, 7.0]).unwrap(), 3.0);
        assert_eq!(head.predict(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(head.predict(&[1.0]).is_err());

        let mut rng = stream(5, &[3]);
        let head = fixtures::random_head(6, &mut rng).unwrap();
        let (zs, _) = fixtures::random_batch(1, 6, &mut rng);
        let direct: f64 = head.weights().iter().zip(&zs[0]).map(|(w, z)| w * z).sum();
        assert!((head.predict(&zs[0]).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_values() {
        assert!((logistic_loss(0.0, 1.0) - 2.0f64.ln()).abs() < 1e-15);
        assert!((logistic_loss(0.0, -1.0) - 2.0f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(40.0, 1.0) <= 1e-15);
        assert!((logistic_loss(1.5, -1.0) - (1.0 + 1.5f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_is_finite_at_extreme_logits() {
        for &logit in &[1e6, -1e6, 1e5, -1e5] {
            for &y in &[1.0, -1.0] {
                assert!(logistic_loss(logit, y).is_finite());
                assert!(logistic_loss_dlogit(logit, y).is_finite());
            }
        }
    }

    #[test]
    fn factored_gradient_structure_at_zero_b() {
        let mut rng = stream(7, &[4]);
        let enc = fixtures::random_encoder(4, 3, 1, Activation::Identity, &mut rng).unwrap();
        let head = fixtures::random_head(3, &mut rng).unwrap();
        let adapter = LoraAdapter::init(&enc, 2, 1.0, &mut rng).unwrap(); // B = 0
        let (xs, ys) = fixtures::random_batch(6, 4, &mut rng);
        let (_, grads) = backward(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None).unwrap();
        // dA = scale·Bᵀ·dW vanishes exactly; dB = scale·dW·Aᵀ does not.
        assert!(grads.layers[0].da.data().iter().all(|&v| v == 0.0));
        assert!(grads.layers[0].db.norm_sq() > 0.0);
    }

    #[test]
    fn regularizer_contributes_nothing_at_equal_features() {
        let mut rng = stream(9, &[5]);
        let (enc, head, _) = fixtures::random_instance(4, 3, 2, 2, Activation::Tanh, &mut rng).unwrap();
        let adapter = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.3, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(5, 4, &mut rng);
        let z_ref: Vec<Vec<f64>> = xs.iter().map(|x| enc.encode(&adapter, x).unwrap()).collect();

        let (plain_loss, plain_grads) =
            backward(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None).unwrap();
        let reg = RegSpec::new(DistanceKind::L2Sq, 0.7).unwrap();
        let (loss, grads) = backward(&enc, &adapter, &head, &xs, &ys, &reg, Some(&z_ref)).unwrap();
        assert_eq!(loss, plain_loss);
        assert_eq!(grads.distance(&plain_grads), 0.0);

        for kind in [DistanceKind::Cosine, DistanceKind::Pearson] {
            let reg = RegSpec::new(kind, 0.7).unwrap();
            let (loss, grads) = backward(&enc, &adapter, &head, &xs, &ys, &reg, Some(&z_ref)).unwrap();
            assert!((loss - plain_loss).abs() < 1e-12);
            assert!(grads.distance(&plain_grads) < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(13, &[6]);
        let (enc, head, _) = fixtures::random_instance(6, 4, 2, 2, Activation::Tanh, &mut rng).unwrap();
        let adapter = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
        let reference = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(8, 6, &mut rng);
        let z_ref: Vec<Vec<f64>> = xs.iter().map(|x| enc.encode(&reference, x).unwrap()).collect();
        let reg = RegSpec::new(DistanceKind::L2Sq, 0.5).unwrap();
        let err = fd_check(&enc, &adapter, &head, &xs, &ys, &reg, Some(&z_ref), 1e-5).unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn fd_zero_gradient_point_is_exact() {
        let mut rng = stream(15, &[7]);
        let enc = fixtures::random_encoder(4, 3, 1, Activation::Tanh, &mut rng).unwrap();
        let head = fixtures::random_head(3, &mut rng).unwrap();
        let adapter = LoraAdapter::init(&enc, 2, 1.0, &mut rng).unwrap(); // B = 0
        let (xs, ys) = fixtures::random_batch(4, 4, &mut rng);
        let (_, grads) = backward(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None).unwrap();

        // With B = 0 the loss is flat in A: analytic dA and the central
        // difference are both exactly zero.
        let mut probe = adapter.clone();
        let step = 1e-5;
        for (r, c) in [(0, 0), (1, 2), (0, 3)] {
            let orig = probe.layers[0].a.get(r, c);
            probe.layers[0].a.set(r, c, orig + step);
            let up = total_loss(&enc, &probe, &head, &xs, &ys, &RegSpec::off(), None).unwrap();
            probe.layers[0].a.set(r, c, orig - step);
            let down = total_loss(&enc, &probe, &head, &xs, &ys, &RegSpec::off(), None).unwrap();
            probe.layers[0].a.set(r, c, orig);
            assert_eq!(up, down);
            assert_eq!(grads.layers[0].da.get(r, c), 0.0);
        }
    }

    #[test]
    fn fd_step_scaling_sanity() {
        let mut rng = stream(17, &[8]);
        let (enc, head, _) = fixtures::random_instance(5, 3, 2, 1, Activation::Tanh, &mut rng).unwrap();
        let adapter = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(6, 5, &mut rng);
        let coarse = fd_check(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None, 1e-3).unwrap();
        let fine = fd_check(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None, 1e-5).unwrap();
        assert!(coarse < 1e-4 && fine < 1e-4, "coarse {coarse}, fine {fine}");
        // Shrinking the step must not blow the error up by more than 100x.
        assert!(fine <= 100.0 * coarse + 1e-12, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn axpy_identities() {
        let mut rng = stream(19, &[9]);
        let enc = fixtures::random_encoder(4, 3, 2, Activation::Tanh, &mut rng).unwrap();
        let a = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.5, &mut rng).unwrap();
        let b = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.5, &mut rng).unwrap();

        // coeff = 0 leaves dst bitwise unchanged
        let mut dst = a.clone();
        dst.axpy_adapter(&b, 0.0).unwrap();
        assert_eq!(dst, a);

        // dst = 0, coeff = 1 copies src
        let mut dst = LoraAdapter::zeros(&enc, 2, 1.0).unwrap();
        dst.axpy_adapter(&b, 1.0).unwrap();
        assert_eq!(dst, b);

        // axpy with c then -c restores the original
        let mut dst = a.clone();
        dst.axpy_adapter(&b, 0.37).unwrap();
        dst.axpy_adapter(&b, -0.37).unwrap();
        for (orig, round) in a.layers.iter().zip(&dst.layers) {
            for (x, y) in orig.a.data().iter().zip(round.a.data()) {
                assert!((x - y).abs() <= 1e-15);
            }
            for (x, y) in orig.b.data().iter().zip(round.b.data()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }

        // shape mismatch errors
        let narrow = identity_encoder(2, true);
        let other = LoraAdapter::zeros(&narrow, 1, 1.0).unwrap();
        assert!(dst.axpy_adapter(&other, 1.0).is_err());
    }

    #[test]
    fn frozen_parts_never_change() {
        let mut rng = stream(21, &[10]);
        let (enc, head, mut adapter) =
            fixtures::random_instance(5, 4, 2, 2, Activation::Tanh, &mut rng).unwrap();
        let w0_before: Vec<Vec<u64>> = enc
            .layers()
            .iter()
            .map(|l| l.w0.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let head_before: Vec<u64> = head.weights().iter().map(|v| v.to_bits()).collect();

        let (xs, ys) = fixtures::random_batch(8, 5, &mut rng);
        for _ in 0..5 {
            let (_, grads) = backward(&enc, &adapter, &head, &xs, &ys, &RegSpec::off(), None).unwrap();
            adapter.axpy_grads(&grads, -0.1).unwrap();
        }

        for (layer, before) in enc.layers().iter().zip(&w0_before) {
            let after: Vec<u64> = layer.w0.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&after, before);
        }
        let head_after: Vec<u64> = head.weights().iter().map(|v| v.to_bits()).collect();
        assert_eq!(head_after, head_before);
    }

    #[test]
    fn materialization_is_linear_in_b() {
        let mut rng = stream(23, &[11]);
        let enc = fixtures::random_encoder(4, 3, 1, Activation::Identity, &mut rng).unwrap();
        let adapter = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.5, &mut rng).unwrap();
        let c = 2.75;
        let mut scaled = adapter.clone();
        scaled.layers[0].b.scale(c);
        let base = adapter.layers[0].materialize_delta(adapter.scale).unwrap();
        let scaled_delta = scaled.layers[0].materialize_delta(scaled.scale).unwrap();
        for (s, b) in scaled_delta.data().iter().zip(base.data()) {
            assert!((s - c * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn seeded_gradient_suite() {
        let mut draws = 0;
        for (cfg_idx, &n_layers) in [1usize, 2].iter().enumerate() {
            for (act_idx, &act) in [Activation::Tanh, Activation::Identity].iter().enumerate() {
                for (lam_idx, &lambda) in [0.0, 0.5, 2.0].iter().enumerate() {
                    for rep in 0..2u64 {
                        let mut rng = stream(
                            100 + rep,
                            &[cfg_idx as u64, act_idx as u64, lam_idx as u64],
                        );
                        let (enc, head, _) =
                            fixtures::random_instance(5, 4, 2, n_layers, act, &mut rng).unwrap();
                        let adapter =
                            fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
                        let (xs, ys) = fixtures::random_batch(4, 5, &mut rng);
                        let (reg, z_ref) = if lambda > 0.0 {
                            let other =
                                fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
                            let refs: Vec<Vec<f64>> =
                                xs.iter().map(|x| enc.encode(&other, x).unwrap()).collect();
                            (RegSpec::new(DistanceKind::L2Sq, lambda).unwrap(), Some(refs))
                        } else {
                            (RegSpec::off(), None)
                        };
                        let err = fd_check(
                            &enc,
                            &adapter,
                            &head,
                            &xs,
                            &ys,
                            &reg,
                            z_ref.as_deref(),
                            1e-5,
                        )
                        .unwrap();
                        assert!(err < 1e-4, "layers={n_layers} act={act:?} lambda={lambda}: {err}");
                        draws += 1;
                    }
                }
            }
        }
        assert!(draws >= 20);
    }
}
