//! Synthetic environments with an invariant feature block and an
//! environment-dependent spurious block.
//!
//! Every environment shares one labeling rule: the first `d_inv`
//! coordinates are standard Gaussian, the label is the sign of a noisy
//! projection onto a fixed unit vector, and the remaining `d_spu`
//! coordinates lean toward the label with environment-specific strength
//! `beta`. The conditional label rule given the invariant block is
//! therefore identical across environments by construction, while a
//! model that picks up the spurious block is punished as soon as `beta`
//! flips sign.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment: a data distribution over inputs and ±1 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    /// Spurious-feature strength in `[-1, 1]`.
    pub beta: f64,
    pub d_inv: usize,
    pub d_spu: usize,
    /// Std-dev of the label noise on the invariant projection.
    pub label_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_inv < 1 {
            return Err(Error::invalid("d_inv must be >= 1"));
        }
        if !(-1.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [-1, 1]", self.beta)));
        }
        if self.label_noise < 0.0 || !self.label_noise.is_finite() {
            return Err(Error::invalid("label_noise must be finite and >= 0"));
        }
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::invalid("n_train and n_test must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.d_inv + self.d_spu
    }
}

/// Sampled data for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub env_id: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// CSV with header `x_0..x_{d-1}, y, env_id`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.xs.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
        header.push("y".into());
        header.push("env_id".into());
        w.write_record(&header)?;
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            rec.push(format!("{y}"));
            rec.push(self.env_id.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The labeling rule shared by every environment of an experiment: a
/// fixed unit vector over the invariant block, drawn once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantRule {
    pub w_inv: Vec<f64>,
}

impl InvariantRule {
    pub fn sample(d_inv: usize, rng: &mut impl Rng) -> Self {
        loop {
            let v: Vec<f64> = (0..d_inv).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return InvariantRule {
                    w_inv: v.into_iter().map(|x| x / norm).collect(),
                };
            }
        }
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        self.w_inv.iter().zip(z).map(|(w, v)| w * v).sum()
    }
}

fn sign_label(raw: f64) -> f64 {
    if raw >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Draw `n` samples from an environment.
///
/// Per sample: `z ~ N(0, I)`, `y = sign(w_inv·z + ε)` with
/// `ε ~ N(0, label_noise²)`, spurious block `s = y·beta·1 + N(0, I)`,
/// `x = [z, s]`.
pub fn sample_env(rule: &InvariantRule, spec: &EnvSpec, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    spec.validate()?;
    if rule.w_inv.len() != spec.d_inv {
        return Err(Error::shape(format!(
            "rule over {} invariant dims, spec has {}",
            rule.w_inv.len(),
            spec.d_inv
        )));
    }
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..spec.d_inv).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eps: f64 = rng.sample::<f64, _>(StandardNormal);
        let y = sign_label(rule.score(&z) + spec.label_noise * eps);
        let mut x = z;
        for _ in 0..spec.d_spu {
            let noise: f64 = rng.sample(StandardNormal);
            x.push(y * spec.beta + noise);
        }
        xs.push(x);
        ys.push(y);
    }
    Ok(Dataset {
        xs,
        ys,
        env_id: spec.env_id.clone(),
    })
}

/// Shared shape parameters for every environment in a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvShape {
    pub d_inv: usize,
    pub d_spu: usize,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Federation layout: one training environment per client, a held-out
/// environment no client sees, and per-client shifted test environments
/// obtained by flipping `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationLayout {
    pub train_envs: Vec<EnvSpec>,
    pub heldout_env: EnvSpec,
    pub intra_ood: Vec<EnvSpec>,
}

/// Evenly spaces client betas over `[beta_lo, beta_hi]`; the intra-client
/// shift flips each beta's sign, the held-out environment uses
/// `heldout_beta`.
pub fn make_layout(
    n_clients: usize,
    beta_lo: f64,
    beta_hi: f64,
    heldout_beta: f64,
    shape: &EnvShape,
) -> Result<FederationLayout> {
    if n_clients < 2 {
        return Err(Error::invalid("layout needs at least 2 clients"));
    }
    if !(beta_lo <= beta_hi) {
        return Err(Error::invalid(format!("invalid beta range [{beta_lo}, {beta_hi}]")));
    }
    let env = |id: String, beta: f64| EnvSpec {
        env_id: id,
        beta,
        d_inv: shape.d_inv,
        d_spu: shape.d_spu,
        label_noise: shape.label_noise,
        n_train: shape.n_train,
        n_test: shape.n_test,
    };
    let mut train_envs = Vec::with_capacity(n_clients);
    let mut intra_ood = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let beta = beta_lo + (beta_hi - beta_lo) * i as f64 / (n_clients - 1) as f64;
        train_envs.push(env(format!("client{i}"), beta));
        intra_ood.push(env(format!("client{i}_shifted"), -beta));
    }
    let layout = FederationLayout {
        train_envs,
        heldout_env: env("heldout".into(), heldout_beta),
        intra_ood,
    };
    for e in layout
        .train_envs
        .iter()
        .chain(layout.intra_ood.iter())
        .chain(std::iter::once(&layout.heldout_env))
    {
        e.validate()?;
    }
    Ok(layout)
}

/// Monte-Carlo accuracy of the invariant-only predictor
/// `sign(w_inv·z)` against sampled labels; the ceiling no model that
/// generalizes out of distribution can beat. Independent of `beta`.
pub fn bayes_invariant_accuracy(
    rule: &InvariantRule,
    spec: &EnvSpec,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_mc < 1000 {
        return Err(Error::invalid("n_mc must be >= 1000"));
    }
    let mut hits = 0usize;
    for _ in 0..n_mc {
        let z: Vec<f64> = (0..spec.d_inv).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let raw = rule.score(&z);
        let eps: f64 = rng.sample::<f64, _>(StandardNormal);
        let y = sign_label(raw + spec.label_noise * eps);
        if sign_label(raw) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_mc as f64)
}
