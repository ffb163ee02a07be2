//! End-to-end experiment runner: builds the world and the frozen model
//! from the seed, executes the round loop under the configured baseline,
//! and assembles the final report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    bayes_invariant_accuracy, make_layout, sample_env, Dataset, EnvShape, FederationLayout,
    InvariantRule,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::metrics::{empirical_risk, mean_feature_distance, worst_case_ood};
use crate::nn::{Activation, FixedHead, FrozenEncoder, LoraAdapter};
use crate::report::{ClientEval, EnvEval, FinalEval, RunReport};
use crate::rng;

use super::{Baseline, ClientState, FedConfig, ModelParts, RoundTrace, ServerState};

/// Architecture of the frozen encoder/head pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Feature dimension `h` (also the width of every hidden layer).
    pub feature_dim: usize,
    pub n_layers: usize,
    pub activation: Activation,
    /// Adapter rank `r`.
    pub rank: usize,
    /// Adapter scale multiplying `B·A`.
    pub scale: f64,
}

/// Federation layout parameters; expands to one training environment
/// per client, a sign-flipped shifted environment per client, and a
/// held-out environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub n_clients: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub heldout_beta: f64,
    pub d_inv: usize,
    pub d_spu: usize,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl LayoutSpec {
    pub fn input_dim(&self) -> usize {
        self.d_inv + self.d_spu
    }

    pub fn build(&self) -> Result<FederationLayout> {
        make_layout(
            self.n_clients,
            self.beta_lo,
            self.beta_hi,
            self.heldout_beta,
            &EnvShape {
                d_inv: self.d_inv,
                d_spu: self.d_spu,
                label_noise: self.label_noise,
                n_train: self.n_train,
                n_test: self.n_test,
            },
        )
    }
}

/// Complete, reproducible description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fed: FedConfig,
    pub layout: LayoutSpec,
    pub model: ModelSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        self.layout.build()?;
        if self.model.feature_dim < 1 || self.model.n_layers < 1 {
            return Err(Error::invalid("model needs feature_dim >= 1 and n_layers >= 1"));
        }
        if let Some(alpha) = &self.fed.alpha {
            if alpha.len() != self.layout.n_clients {
                return Err(Error::invalid(format!(
                    "alpha has {} entries for {} clients",
                    alpha.len(),
                    self.layout.n_clients
                )));
            }
        }
        Ok(())
    }
}

/// Everything derived deterministically from the seed: model, labeling
/// rule, and sampled datasets.
pub struct Experiment {
    pub encoder: FrozenEncoder,
    pub head: FixedHead,
    pub init_adapter: LoraAdapter,
    pub rule: InvariantRule,
    pub layout: FederationLayout,
    pub train_data: Vec<Dataset>,
    pub intra_ood_data: Vec<Dataset>,
    pub heldout_data: Dataset,
}

pub fn build_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let seed = cfg.fed.seed;
    let layout = cfg.layout.build()?;

    let mut model_rng = rng::stream(seed, &[rng::TAG_MODEL]);
    let encoder = fixtures::random_encoder(
        cfg.layout.input_dim(),
        cfg.model.feature_dim,
        cfg.model.n_layers,
        cfg.model.activation,
        &mut model_rng,
    )?;
    let head = fixtures::random_head(cfg.model.feature_dim, &mut model_rng)?;
    let init_adapter = LoraAdapter::init(
        &encoder,
        cfg.model.rank,
        cfg.model.scale,
        &mut rng::stream(seed, &[rng::TAG_ADAPTER]),
    )?;

    let rule = InvariantRule::sample(cfg.layout.d_inv, &mut rng::stream(seed, &[rng::TAG_RULE]));
    let train_data: Vec<Dataset> = layout
        .train_envs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            sample_env(
                &rule,
                spec,
                spec.n_train,
                &mut rng::stream(seed, &[rng::TAG_TRAIN_ENV, i as u64]),
            )
        })
        .collect::<Result<_>>()?;
    let intra_ood_data: Vec<Dataset> = layout
        .intra_ood
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            sample_env(
                &rule,
                spec,
                spec.n_test,
                &mut rng::stream(seed, &[rng::TAG_INTRA_OOD_ENV, i as u64]),
            )
        })
        .collect::<Result<_>>()?;
    let heldout_data = sample_env(
        &rule,
        &layout.heldout_env,
        layout.heldout_env.n_test,
        &mut rng::stream(seed, &[rng::TAG_HELDOUT_ENV]),
    )?;

    Ok(Experiment {
        encoder,
        head,
        init_adapter,
        rule,
        layout,
        train_data,
        intra_ood_data,
        heldout_data,
    })
}

/// A finished run: the report plus the trained adapters for
/// checkpointing.
pub struct RunOutcome {
    pub report: RunReport,
    /// Final aggregated adapter; absent for `local_only`, which never
    /// produces a communicated global model.
    pub global_adapter: Option<LoraAdapter>,
    /// Final personalized adapters in client-id order, for modes that
    /// have them.
    pub personalized_adapters: Option<Vec<LoraAdapter>>,
}

/// Run the full protocol under the configured baseline and evaluate.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let exp = build_experiment(cfg)?;
    let model = ModelParts {
        encoder: &exp.encoder,
        head: &exp.head,
    };
    let fed = &cfg.fed;

    let mut server = ServerState {
        round: 0,
        global: exp.init_adapter.clone(),
    };
    let mut clients: Vec<ClientState> = exp
        .train_data
        .iter()
        .enumerate()
        .map(|(i, data)| ClientState::new(i, exp.init_adapter.clone(), data.clone(), fed.seed))
        .collect();

    let mut rounds: Vec<RoundTrace> = Vec::with_capacity(fed.rounds);
    let mut trajectory: Option<Vec<f64>> = fed.baseline.has_personalized_path().then(Vec::new);
    for _ in 0..fed.rounds {
        let trace = super::run_round(&mut server, &mut clients, fed, &model)?;
        if let Some(traj) = trajectory.as_mut() {
            let mut acc = 0.0;
            for c in &clients {
                acc += mean_feature_distance(
                    model.encoder,
                    &c.personalized,
                    &server.global,
                    &c.data,
                    fed.reg.kind,
                )?;
            }
            traj.push(acc / clients.len() as f64);
        }
        rounds.push(trace);
    }

    if fed.baseline == Baseline::Finetune {
        finetune_phase(&mut clients, &server, fed, &model)?;
    }

    let has_personalized = fed.baseline.has_personalized_path() || fed.baseline == Baseline::Finetune;
    let final_eval = evaluate(&exp, &server, &clients, cfg, has_personalized)?;
    let bytes: u64 = rounds.iter().map(|r| r.bytes_communicated).sum();

    let report = RunReport {
        schema_version: RunReport::SCHEMA_VERSION,
        config: cfg.clone(),
        rounds,
        feature_distance_trajectory: trajectory,
        final_eval,
        bytes_communicated: bytes,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report.validate()?;

    let mut clients = clients;
    clients.sort_by_key(|c| c.client_id);
    Ok(RunOutcome {
        report,
        global_adapter: fed.baseline.communicates().then(|| server.global.clone()),
        personalized_adapters: has_personalized
            .then(|| clients.into_iter().map(|c| c.personalized).collect()),
    })
}

/// Post-round local adaptation for the `finetune` baseline: every client
/// starts from the final global adapter and takes `K·T` plain risk
/// steps on its own data.
fn finetune_phase(
    clients: &mut [ClientState],
    server: &ServerState,
    fed: &FedConfig,
    model: &ModelParts,
) -> Result<()> {
    let plain = FedConfig {
        baseline: Baseline::LocalOnly,
        ..fed.clone()
    };
    for client in clients.iter_mut() {
        let mut state = ClientState {
            personalized: server.global.clone(),
            ..client.clone()
        };
        // virtual rounds T..2T-1 reuse the per-round mini-batch schedule
        for vround in fed.rounds..2 * fed.rounds {
            let result = super::client_update(&state, &server.global, &plain, model, vround)?;
            state.personalized = result.personalized.expect("local mode has a personalized path");
        }
        client.personalized = state.personalized;
    }
    Ok(())
}

fn evaluate(
    exp: &Experiment,
    server: &ServerState,
    clients: &[ClientState],
    cfg: &RunConfig,
    has_personalized: bool,
) -> Result<FinalEval> {
    let enc = &exp.encoder;
    let head = &exp.head;

    let per_client = if has_personalized {
        let mut evals = Vec::with_capacity(clients.len());
        for (c, ood) in clients.iter().zip(&exp.intra_ood_data) {
            let (risk, accuracy) = empirical_risk(enc, &c.personalized, head, ood)?;
            evals.push(ClientEval {
                client_id: c.client_id,
                env_id: ood.env_id.clone(),
                risk,
                accuracy,
            });
        }
        Some(evals)
    } else {
        None
    };
    let mean_personalized_ood_accuracy = per_client
        .as_ref()
        .map(|evals| evals.iter().map(|e| e.accuracy).sum::<f64>() / evals.len() as f64);

    let global_heldout = if cfg.fed.baseline.communicates() {
        let (risk, accuracy) = empirical_risk(enc, &server.global, head, &exp.heldout_data)?;
        Some(EnvEval {
            env_id: exp.heldout_data.env_id.clone(),
            risk,
            accuracy,
        })
    } else {
        None
    };

    // worst case: personalized adapters against their own shifted
    // environments, the global adapter against every test environment
    let mut pairs: Vec<(&LoraAdapter, &Dataset)> = Vec::new();
    if has_personalized {
        for (c, ood) in clients.iter().zip(&exp.intra_ood_data) {
            pairs.push((&c.personalized, ood));
        }
    }
    if cfg.fed.baseline.communicates() {
        for ood in &exp.intra_ood_data {
            pairs.push((&server.global, ood));
        }
        pairs.push((&server.global, &exp.heldout_data));
    }
    let worst_case_ood_risk = worst_case_ood(enc, head, &pairs)?;

    let invariant_ceiling_accuracy = bayes_invariant_accuracy(
        &exp.rule,
        &exp.layout.heldout_env,
        200_000,
        &mut rng::stream(cfg.fed.seed, &[rng::TAG_BAYES]),
    )?;

    Ok(FinalEval {
        per_client_intra_ood: per_client,
        mean_personalized_ood_accuracy,
        global_heldout,
        worst_case_ood_risk,
        invariant_ceiling_accuracy,
    })
}
