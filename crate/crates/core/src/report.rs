//! Run reports and their serialized forms.
//!
//! A report is one JSON document whose embedded config reproduces the
//! run exactly. Wall-clock time is kept in memory for display but not
//! serialized, so identical configs yield byte-identical files.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::experiment::RunConfig;
use crate::fed::RoundTrace;

/// Final out-of-distribution evaluation of one client's personalized
/// adapter on its shifted environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub env_id: String,
    pub risk: f64,
    pub accuracy: f64,
}

/// Evaluation of the global adapter on one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvEval {
    pub env_id: String,
    pub risk: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    /// Per-client intra-OOD results; absent for modes without
    /// personalized adapters.
    pub per_client_intra_ood: Option<Vec<ClientEval>>,
    pub mean_personalized_ood_accuracy: Option<f64>,
    /// Global adapter on the held-out environment (inter-client OOD);
    /// absent for `local_only`.
    pub global_heldout: Option<EnvEval>,
    pub worst_case_ood_risk: f64,
    /// Monte-Carlo accuracy ceiling of the invariant-only predictor.
    pub invariant_ceiling_accuracy: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub rounds: Vec<RoundTrace>,
    /// Mean feature distance between personalized and global adapters at
    /// the end of each round; present for modes with personalized
    /// adapters during the round loop.
    pub feature_distance_trajectory: Option<Vec<f64>>,
    pub final_eval: FinalEval,
    pub bytes_communicated: u64,
    /// Not serialized: differs between otherwise identical runs.
    #[serde(skip, default)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn validate(&self) -> Result<()> {
        if self.rounds.len() != self.config.fed.rounds {
            return Err(Error::invalid(format!(
                "{} round traces for {} rounds",
                self.rounds.len(),
                self.config.fed.rounds
            )));
        }
        if let Some(traj) = &self.feature_distance_trajectory {
            if traj.len() != self.config.fed.rounds {
                return Err(Error::invalid("trajectory length must equal rounds"));
            }
        }
        let in_unit = |a: f64| (0.0..=1.0).contains(&a);
        if let Some(evals) = &self.final_eval.per_client_intra_ood {
            if evals.iter().any(|e| !in_unit(e.accuracy)) {
                return Err(Error::invalid("client accuracy outside [0, 1]"));
            }
        }
        if let Some(acc) = self.final_eval.mean_personalized_ood_accuracy {
            if !in_unit(acc) {
                return Err(Error::invalid("mean accuracy outside [0, 1]"));
            }
        }
        if let Some(g) = &self.final_eval.global_heldout {
            if !in_unit(g.accuracy) {
                return Err(Error::invalid("global accuracy outside [0, 1]"));
            }
        }
        if !in_unit(self.final_eval.invariant_ceiling_accuracy) {
            return Err(Error::invalid("ceiling accuracy outside [0, 1]"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Per-client round traces as CSV rows
/// `round,client_id,risk,grad_norm_sq,feat_dist`.
pub fn write_traces_csv<W: Write>(report: &RunReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["round", "client_id", "risk", "grad_norm_sq", "feat_dist"])?;
    for round in &report.rounds {
        for c in &round.clients {
            w.write_record([
                round.round.to_string(),
                c.client_id.to_string(),
                fmt(c.train_risk),
                fmt(c.grad_norm_sq),
                fmt(c.feat_dist),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Round-level curves for plotting:
/// `round,mean_feature_distance,global_risk,bytes`.
pub fn write_trajectory_csv<W: Write>(report: &RunReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["round", "mean_feature_distance", "global_risk", "bytes"])?;
    for (t, round) in report.rounds.iter().enumerate() {
        let feat = report
            .feature_distance_trajectory
            .as_ref()
            .map_or(String::new(), |traj| fmt(traj[t]));
        let risk = round.global_risk.map_or(String::new(), fmt);
        w.write_record([
            round.round.to_string(),
            feat,
            risk,
            round.bytes_communicated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
