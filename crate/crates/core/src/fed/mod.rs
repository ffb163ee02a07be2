//! The federated round loop: client sampling, dual-adapter local
//! updates, weighted aggregation, and baseline modes.
//!
//! Each round the server broadcasts a snapshot of the global adapter.
//! Every sampled client runs two independent paths:
//!
//! * the *personalized* path takes `K` mini-batch steps on its local
//!   risk plus a feature-distance penalty toward the snapshot's features
//!   on the same mini-batch (references are constants — no gradient
//!   flows through the snapshot);
//! * the *global* path takes plain risk steps starting from the
//!   snapshot and sends the result back for weighted averaging.
//!
//! Personalized adapters never leave the client. All randomness comes
//! from streams keyed by `(seed, client, round, path)`, so results are
//! independent of client processing order and safe to parallelize.

pub mod experiment;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics;
use crate::nn::{backward, FixedHead, FrozenEncoder, LoraAdapter};
use crate::reg::RegSpec;
use crate::rng;

/// Training mode. `fedoa` is the feature-regularized dual-adapter
/// scheme; the others are ablation baselines sharing its plumbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Personalized adapters with feature-distance regularization toward
    /// the aggregated global adapter.
    Fedoa,
    /// Global adapter only; no personalization.
    Fedit,
    /// Per-client SGD, no communication.
    LocalOnly,
    /// Personalized adapters with a parameter-space proximal term
    /// `lambda·||phi_e - phi_g||²` instead of the feature penalty.
    Prox,
    /// Global-only training for `T` rounds, then per-client local
    /// fine-tuning from the final global adapter.
    Finetune,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Fedoa => "fedoa",
            Baseline::Fedit => "fedit",
            Baseline::LocalOnly => "local_only",
            Baseline::Prox => "prox",
            Baseline::Finetune => "finetune",
        }
    }

    /// Does this mode maintain per-client personalized adapters during
    /// the round loop?
    pub fn has_personalized_path(self) -> bool {
        matches!(self, Baseline::Fedoa | Baseline::LocalOnly | Baseline::Prox)
    }

    /// Does this mode actually communicate adapters? `local_only` still
    /// tracks the would-be aggregate as a measurement reference, but
    /// nothing is exchanged.
    pub fn communicates(self) -> bool {
        !matches!(self, Baseline::LocalOnly)
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedoa" => Ok(Baseline::Fedoa),
            "fedit" => Ok(Baseline::Fedit),
            "local_only" => Ok(Baseline::LocalOnly),
            "prox" => Ok(Baseline::Prox),
            "finetune" => Ok(Baseline::Finetune),
            other => Err(Error::invalid(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Round-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Local update steps `K` per round (or epochs when `k_as_epochs`).
    pub local_steps: usize,
    /// Interpret `local_steps` as epochs: steps = K·ceil(n/batch).
    pub k_as_epochs: bool,
    /// Personalized-path learning rate.
    pub local_lr: f64,
    /// Global-path learning rate.
    pub global_lr: f64,
    pub reg: RegSpec,
    /// Per-client aggregation weights; `None` means proportional to
    /// local dataset size. Renormalized over the sampled subset.
    pub alpha: Option<Vec<f64>>,
    /// Fraction of clients sampled each round, in `(0, 1]`.
    pub sample_frac: f64,
    pub batch_size: usize,
    /// Steps of the global path per client per round.
    pub global_steps: usize,
    /// Full-batch global path (the default) vs mini-batched.
    pub global_full_batch: bool,
    pub baseline: Baseline,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 || self.local_steps < 1 {
            return Err(Error::invalid("rounds and local_steps must be >= 1"));
        }
        if self.global_steps < 1 {
            return Err(Error::invalid("global_steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.local_lr.is_finite() && self.local_lr >= 0.0)
            || !(self.global_lr.is_finite() && self.global_lr >= 0.0)
        {
            return Err(Error::invalid("learning rates must be finite and >= 0"));
        }
        if !(self.sample_frac > 0.0 && self.sample_frac <= 1.0) {
            return Err(Error::invalid(format!(
                "sample_frac {} outside (0, 1]",
                self.sample_frac
            )));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || alpha.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("alpha weights must be >= 0 with positive sum"));
            }
        }
        RegSpec::new(self.reg.kind, self.reg.lambda)?;
        Ok(())
    }
}

/// Per-client state persisting across rounds. The personalized adapter
/// changes only in rounds where the client is sampled.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub personalized: LoraAdapter,
    pub data: Dataset,
    /// Key of this client's private random stream.
    pub stream_seed: u64,
}

impl ClientState {
    pub fn new(client_id: usize, personalized: LoraAdapter, data: Dataset, experiment_seed: u64) -> Self {
        let stream_seed = rng::derive_seed(experiment_seed, &[rng::TAG_CLIENT, client_id as u64]);
        ClientState {
            client_id,
            personalized,
            data,
            stream_seed,
        }
    }
}

/// Server-side state; the global adapter changes only at aggregation.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub global: LoraAdapter,
}

/// Immutable model pieces shared by everyone.
#[derive(Clone, Copy)]
pub struct ModelParts<'a> {
    pub encoder: &'a FrozenEncoder,
    pub head: &'a FixedHead,
}

/// Measurements for one sampled client, taken at the start of the round
/// (personalized adapter as of `t-1`, distances against the broadcast
/// snapshot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundTrace {
    pub client_id: usize,
    /// Full-batch training risk of the personalized adapter.
    pub train_risk: f64,
    /// Squared norm of the full-batch risk gradient at the personalized
    /// adapter.
    pub grad_norm_sq: f64,
    /// Mean feature distance between personalized and snapshot features
    /// over the client's training data.
    pub feat_dist: f64,
    /// Objective value at each local step.
    pub step_losses: Vec<f64>,
}

/// One communication round's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// One entry per sampled client (modes with a personalized path).
    pub clients: Vec<ClientRoundTrace>,
    /// Weighted training risk of the post-aggregation global adapter;
    /// absent for `local_only`, whose reference aggregate is never a
    /// protocol product.
    pub global_risk: Option<f64>,
    /// Adapter bytes exchanged this round (down + up).
    pub bytes_communicated: u64,
}

/// Result of one client's round.
pub struct ClientUpdateResult {
    /// Updated personalized adapter, when the mode has one.
    pub personalized: Option<LoraAdapter>,
    /// Global-path result to be aggregated.
    pub global_update: LoraAdapter,
    /// Round-start measurements, when the mode has a personalized path.
    pub trace: Option<ClientRoundTrace>,
}

/// Mini-batch schedule: one shuffled permutation per round, consumed
/// sequentially with wrap-around. Batches equal the full dataset when it
/// has at most `batch_size` samples.
fn batch_indices(n: usize, batch_size: usize, steps: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    if batch_size >= n {
        return (0..steps).map(|_| (0..n).collect()).collect();
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut cursor = 0usize;
    (0..steps)
        .map(|_| {
            let batch: Vec<usize> = (0..batch_size).map(|j| perm[(cursor + j) % n]).collect();
            cursor = (cursor + batch_size) % n;
            batch
        })
        .collect()
}

fn gather(data: &Dataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs = idx.iter().map(|&i| data.xs[i].clone()).collect();
    let ys = idx.iter().map(|&i| data.ys[i]).collect();
    (xs, ys)
}

fn divergence(round: usize, client_id: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) => Error::Divergence {
            round,
            client_id,
            step,
            detail,
        },
        other => other,
    }
}

/// Effective number of personalized steps this round.
fn effective_steps(cfg: &FedConfig, n: usize) -> usize {
    if cfg.k_as_epochs {
        cfg.local_steps * n.div_ceil(cfg.batch_size.min(n))
    } else {
        cfg.local_steps
    }
}

/// Run one client's round against the broadcast snapshot.
///
/// The personalized path minimizes `R_e + lambda·D(features, snapshot
/// features)` (or the parameter proximal for `prox`); the global path
/// restarts from the snapshot and takes `global_steps` plain risk steps.
pub fn client_update(
    client: &ClientState,
    snapshot: &LoraAdapter,
    cfg: &FedConfig,
    model: &ModelParts,
    round: usize,
) -> Result<ClientUpdateResult> {
    let n = client.data.len();
    if n == 0 {
        return Err(Error::invalid(format!("client {} has no data", client.client_id)));
    }

    let mut trace = if cfg.baseline.has_personalized_path() {
        Some(round_start_trace(client, snapshot, cfg, model)?)
    } else {
        None
    };

    let personalized = if cfg.baseline.has_personalized_path() {
        let steps = effective_steps(cfg, n);
        let mut stream = rng::stream(
            client.stream_seed,
            &[round as u64, rng::PATH_PERSONALIZED],
        );
        let batches = batch_indices(n, cfg.batch_size, steps, &mut stream);
        let mut adapter = client.personalized.clone();
        let mut losses = Vec::with_capacity(steps);
        for (step, batch) in batches.iter().enumerate() {
            let (xs, ys) = gather(&client.data, batch);
            let loss = personalized_step(&mut adapter, snapshot, cfg, model, &xs, &ys)
                .map_err(|e| divergence(round, client.client_id, step, e))?;
            losses.push(loss);
            if !adapter.all_finite() {
                return Err(Error::Divergence {
                    round,
                    client_id: client.client_id,
                    step,
                    detail: "personalized adapter".into(),
                });
            }
        }
        if let Some(t) = trace.as_mut() {
            t.step_losses = losses;
        }
        Some(adapter)
    } else {
        None
    };

    let global_update = global_path(client, snapshot, cfg, model, round)?;
    Ok(ClientUpdateResult {
        personalized,
        global_update,
        trace,
    })
}

fn round_start_trace(
    client: &ClientState,
    snapshot: &LoraAdapter,
    cfg: &FedConfig,
    model: &ModelParts,
) -> Result<ClientRoundTrace> {
    let (risk, _) = metrics::empirical_risk(model.encoder, &client.personalized, model.head, &client.data)?;
    let (_, grads) = backward(
        model.encoder,
        &client.personalized,
        model.head,
        &client.data.xs,
        &client.data.ys,
        &RegSpec::off(),
        None,
    )?;
    let feat_dist = metrics::mean_feature_distance(
        model.encoder,
        &client.personalized,
        snapshot,
        &client.data,
        cfg.reg.kind,
    )?;
    Ok(ClientRoundTrace {
        client_id: client.client_id,
        train_risk: risk,
        grad_norm_sq: grads.norm_sq(),
        feat_dist,
        step_losses: Vec::new(),
    })
}

/// One personalized SGD step in place; returns the step's objective.
fn personalized_step(
    adapter: &mut LoraAdapter,
    snapshot: &LoraAdapter,
    cfg: &FedConfig,
    model: &ModelParts,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<f64> {
    let feature_reg = cfg.baseline == Baseline::Fedoa && cfg.reg.active();
    let (mut loss, mut grads) = if feature_reg {
        let z_ref: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| model.encoder.encode(snapshot, x))
            .collect::<Result<_>>()?;
        backward(model.encoder, adapter, model.head, xs, ys, &cfg.reg, Some(&z_ref))?
    } else {
        backward(model.encoder, adapter, model.head, xs, ys, &RegSpec::off(), None)?
    };
    if cfg.baseline == Baseline::Prox && cfg.reg.lambda > 0.0 {
        loss += cfg.reg.lambda * adapter.param_distance_sq(snapshot)?;
        grads.add_scaled_param_diff(adapter, snapshot, 2.0 * cfg.reg.lambda)?;
    }
    adapter.axpy_grads(&grads, -cfg.local_lr)?;
    Ok(loss)
}

/// Global path: restart from the snapshot, take `global_steps` plain
/// risk steps (full-batch by default).
fn global_path(
    client: &ClientState,
    snapshot: &LoraAdapter,
    cfg: &FedConfig,
    model: &ModelParts,
    round: usize,
) -> Result<LoraAdapter> {
    let n = client.data.len();
    let mut adapter = snapshot.clone();
    let batches: Vec<Vec<usize>> = if cfg.global_full_batch {
        (0..cfg.global_steps).map(|_| (0..n).collect()).collect()
    } else {
        let mut stream = rng::stream(client.stream_seed, &[round as u64, rng::PATH_GLOBAL]);
        batch_indices(n, cfg.batch_size, cfg.global_steps, &mut stream)
    };
    for (step, batch) in batches.iter().enumerate() {
        let (xs, ys) = gather(&client.data, batch);
        let (_, grads) = backward(model.encoder, &adapter, model.head, &xs, &ys, &RegSpec::off(), None)
            .map_err(|e| divergence(round, client.client_id, step, e))?;
        adapter.axpy_grads(&grads, -cfg.global_lr)?;
        if !adapter.all_finite() {
            return Err(Error::Divergence {
                round,
                client_id: client.client_id,
                step,
                detail: "global-path adapter".into(),
            });
        }
    }
    Ok(adapter)
}

/// Factorwise weighted mean of adapters. Weights are renormalized to
/// sum to one.
pub fn aggregate(updates: &[(LoraAdapter, f64)]) -> Result<LoraAdapter> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregate over empty update set"));
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    if !(total.is_finite() && total > 0.0) || updates.iter().any(|(_, w)| *w < 0.0) {
        return Err(Error::invalid("aggregation weights must be >= 0 with positive sum"));
    }
    let mut out = LoraAdapter::zeros_like_shape(&updates[0].0);
    for (adapter, weight) in updates {
        out.axpy_adapter(adapter, weight / total)?;
    }
    Ok(out)
}

impl LoraAdapter {
    /// Zero adapter with the same factor shapes as `other`.
    pub fn zeros_like_shape(other: &LoraAdapter) -> LoraAdapter {
        LoraAdapter {
            layers: other
                .layers
                .iter()
                .map(|l| crate::nn::LoraLayer {
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                })
                .collect(),
            rank: other.rank,
            scale: other.scale,
        }
    }
}

/// Bytes for one round of adapter exchange: each sampled client
/// downloads and uploads every trainable scalar as an `f64`.
pub fn round_bytes(sampled: usize, adapter: &LoraAdapter) -> u64 {
    (sampled * 2 * adapter.param_count() * 8) as u64
}

/// Sample `ceil(sample_frac·n)` client ids without replacement,
/// Fisher-Yates over the sorted id list, seeded by `(seed, round)`.
fn sample_clients(cfg: &FedConfig, client_ids: &[usize], round: usize) -> Vec<usize> {
    let m = ((cfg.sample_frac * client_ids.len() as f64).ceil() as usize)
        .clamp(1, client_ids.len());
    let mut ids: Vec<usize> = client_ids.to_vec();
    ids.sort_unstable();
    let mut stream = rng::stream(cfg.seed, &[rng::TAG_SAMPLING, round as u64]);
    ids.shuffle(&mut stream);
    let mut chosen: Vec<usize> = ids.into_iter().take(m).collect();
    chosen.sort_unstable();
    chosen
}

/// Aggregation weight for each sampled client, before renormalization.
fn raw_weight(cfg: &FedConfig, clients: &[ClientState], id: usize) -> Result<f64> {
    match &cfg.alpha {
        Some(alpha) => {
            let pos = clients
                .iter()
                .position(|c| c.client_id == id)
                .ok_or_else(|| Error::invalid(format!("unknown client id {id}")))?;
            alpha
                .get(pos)
                .copied()
                .ok_or_else(|| Error::invalid("alpha shorter than client list"))
        }
        None => {
            let c = clients
                .iter()
                .find(|c| c.client_id == id)
                .ok_or_else(|| Error::invalid(format!("unknown client id {id}")))?;
            Ok(c.data.len() as f64)
        }
    }
}

/// Execute one communication round, mutating server and sampled
/// clients. The result is independent of the order of `clients` and of
/// client execution order.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FedConfig,
    model: &ModelParts,
) -> Result<RoundTrace> {
    cfg.validate()?;
    let round = server.round;
    let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let sampled = sample_clients(cfg, &ids, round);
    let snapshot = server.global.clone();

    // Client updates are pure given (state, snapshot, round); run them in
    // parallel and reassemble in id order for a fixed summation order.
    let mut results: Vec<(usize, ClientUpdateResult)> = {
        use rayon::prelude::*;
        sampled
            .par_iter()
            .map(|&id| {
                let client = clients
                    .iter()
                    .find(|c| c.client_id == id)
                    .ok_or_else(|| Error::invalid(format!("unknown client id {id}")))?;
                client_update(client, &snapshot, cfg, model, round).map(|r| (id, r))
            })
            .collect::<Result<Vec<_>>>()?
    };
    results.sort_by_key(|(id, _)| *id);

    let mut updates = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (id, result) in results {
        let weight = raw_weight(cfg, clients, id)?;
        updates.push((result.global_update, weight));
        if let Some(t) = result.trace {
            traces.push(t);
        }
        if let Some(p) = result.personalized {
            let client = clients
                .iter_mut()
                .find(|c| c.client_id == id)
                .expect("sampled id exists");
            client.personalized = p;
        }
    }

    server.global = aggregate(&updates)?;
    server.round += 1;

    let bytes = if cfg.baseline.communicates() {
        round_bytes(sampled.len(), &server.global)
    } else {
        0
    };
    let global_risk = if cfg.baseline.communicates() {
        Some(weighted_global_risk(server, clients, cfg, model)?)
    } else {
        None
    };

    Ok(RoundTrace {
        round,
        clients: traces,
        global_risk,
        bytes_communicated: bytes,
    })
}

/// Weighted training risk of the current global adapter over all
/// clients.
fn weighted_global_risk(
    server: &ServerState,
    clients: &[ClientState],
    cfg: &FedConfig,
    model: &ModelParts,
) -> Result<f64> {
    let mut total_w = 0.0;
    let mut acc = 0.0;
    for c in clients {
        let w = raw_weight(cfg, clients, c.client_id)?;
        let (risk, _) = metrics::empirical_risk(model.encoder, &server.global, model.head, &c.data)?;
        acc += w * risk;
        total_w += w;
    }
    Ok(acc / total_w)
}

/// Closed-form upper bounds on the local and global step sizes under
/// which the regularized dual-adapter scheme provably converges, given
/// smoothness `L`, stochastic-gradient bound `sigma`, penalty weight
/// `lambda`, local steps `K`, and rounds `T`:
///
/// ```text
/// eta_l <= 1 / (8·sqrt(3(1+3T)T(1+2K)K) · lambda·sigma·L)
/// eta_g <= 1 / (2·sqrt(6(1+3T)T) · L)
/// ```
pub fn stepsize_bounds(
    smoothness: f64,
    grad_bound: f64,
    lambda: f64,
    local_steps: usize,
    rounds: usize,
) -> Result<(f64, f64)> {
    for (name, v) in [("L", smoothness), ("sigma", grad_bound), ("lambda", lambda)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if local_steps < 1 || rounds < 1 {
        return Err(Error::invalid("K and T must be >= 1"));
    }
    let t = rounds as f64;
    let k = local_steps as f64;
    let eta_l =
        1.0 / (8.0 * (3.0 * (1.0 + 3.0 * t) * t * (1.0 + 2.0 * k) * k).sqrt() * lambda * grad_bound * smoothness);
    let eta_g = 1.0 / (2.0 * (6.0 * (1.0 + 3.0 * t) * t).sqrt() * smoothness);
    Ok((eta_l, eta_g))
}

/// Serialized form of one adapter layer's checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterLayerCheckpoint {
    pub layer_index: usize,
    pub rank: usize,
    pub scale: f64,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

/// Checkpoint an adapter as one JSON object per adapted layer.
pub fn adapter_to_checkpoint(adapter: &LoraAdapter) -> Vec<AdapterLayerCheckpoint> {
    adapter
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| AdapterLayerCheckpoint {
            layer_index: i,
            rank: adapter.rank,
            scale: adapter.scale,
            a: (0..l.a.rows()).map(|r| l.a.row(r).to_vec()).collect(),
            b: (0..l.b.rows()).map(|r| l.b.row(r).to_vec()).collect(),
        })
        .collect()
}

/// Rebuild an adapter from its checkpoint layers.
pub fn adapter_from_checkpoint(layers: &[AdapterLayerCheckpoint]) -> Result<LoraAdapter> {
    if layers.is_empty() {
        return Err(Error::invalid("empty adapter checkpoint"));
    }
    let rank = layers[0].rank;
    let scale = layers[0].scale;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if l.layer_index != i || l.rank != rank || l.scale != scale {
            return Err(Error::invalid(format!("inconsistent checkpoint layer {i}")));
        }
        out.push(crate::nn::LoraLayer {
            a: Matrix::from_rows(&l.a)?,
            b: Matrix::from_rows(&l.b)?,
        });
    }
    Ok(LoraAdapter {
        layers: out,
        rank,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::nn::Activation;
    use crate::rng::stream;

    #[test]
    fn stepsize_bounds_at_unit_inputs() {
        let (eta_l, eta_g) = stepsize_bounds(1.0, 1.0, 1.0, 1, 1).unwrap();
        assert!((eta_l - 1.0 / 48.0).abs() < 1e-15);
        assert!((eta_g - 1.0 / (2.0 * 24.0f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn stepsize_bounds_reference_values() {
        let (eta_l, eta_g) = stepsize_bounds(1.0, 1.0, 0.5, 2, 20).unwrap();
        // independent recomputation: radicands are 3·61·20·5·2 = 36600
        // and 6·61·20 = 7320
        assert!((eta_l - 1.0 / (4.0 * 36600.0f64.sqrt())).abs() < 1e-18);
        assert!((eta_g - 1.0 / (2.0 * 7320.0f64.sqrt())).abs() < 1e-18);
        assert!((eta_l - 1.3068e-3).abs() < 1e-6);
        assert!((eta_g - 5.844e-3).abs() < 1e-6);
    }

    #[test]
    fn doubling_lambda_halves_local_bound_only() {
        let (l1, g1) = stepsize_bounds(1.3, 0.7, 0.5, 3, 10).unwrap();
        let (l2, g2) = stepsize_bounds(1.3, 0.7, 1.0, 3, 10).unwrap();
        assert_eq!(l2, l1 / 2.0);
        assert_eq!(g2, g1);
    }

    #[test]
    fn stepsize_bounds_reject_nonpositive_inputs() {
        assert!(stepsize_bounds(0.0, 1.0, 1.0, 1, 1).is_err());
        assert!(stepsize_bounds(1.0, -1.0, 1.0, 1, 1).is_err());
        assert!(stepsize_bounds(1.0, 1.0, 0.0, 1, 1).is_err());
        assert!(stepsize_bounds(1.0, 1.0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = stream(51, &[0]);
        let enc = fixtures::random_encoder(4, 3, 2, Activation::Tanh, &mut rng).unwrap();
        let phi = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.5, &mut rng).unwrap();

        // identical updates, weights summing to one
        let out = aggregate(&[(phi.clone(), 0.5), (phi.clone(), 0.5)]).unwrap();
        assert_eq!(out, phi);

        // equal weights on phi and -phi cancel
        let mut neg = LoraAdapter::zeros_like_shape(&phi);
        neg.axpy_adapter(&phi, -1.0).unwrap();
        let out = aggregate(&[(phi.clone(), 1.0), (neg, 1.0)]).unwrap();
        assert_eq!(out.param_distance_sq(&LoraAdapter::zeros_like_shape(&phi)).unwrap(), 0.0);

        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(phi.clone(), -1.0)]).is_err());
        assert!(aggregate(&[(phi, 0.0)]).is_err());
    }

    #[test]
    fn batch_schedule_covers_data_with_wraparound() {
        let mut rng = stream(53, &[1]);
        let batches = batch_indices(10, 4, 5, &mut rng);
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.len() == 4));
        // first pass (steps 0-1 plus half of 2) visits distinct indices
        let first_pass: Vec<usize> = batches.concat().into_iter().take(10).collect();
        let mut sorted = first_pass.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);

        // full batch when the dataset is small
        let batches = batch_indices(3, 8, 2, &mut rng);
        assert_eq!(batches, vec![vec![0, 1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = stream(55, &[2]);
        let enc = fixtures::random_encoder(4, 3, 2, Activation::Tanh, &mut rng).unwrap();
        let phi = fixtures::dense_random_adapter(&enc, 2, 1.5, 0.5, &mut rng).unwrap();
        let json = serde_json::to_string(&adapter_to_checkpoint(&phi)).unwrap();
        assert!(json.contains("\"layer_index\""));
        assert!(json.contains("\"A\""));
        assert!(json.contains("\"B\""));
        let back: Vec<AdapterLayerCheckpoint> = serde_json::from_str(&json).unwrap();
        let restored = adapter_from_checkpoint(&back).unwrap();
        assert_eq!(restored, phi);
    }
}
