//! End-to-end runs: generate, simulate, perturb, reconstruct, evaluate.
//!
//! Every random stream of repeat `r` is derived from `derive(master, r)`
//! through a named tag (see [`RepeatSeeds`]), so a repeat's outcome depends
//! only on the config, the master seed and `r`. Repeats run on the rayon pool
//! and are collected in index order; no output depends on the worker count.

pub mod config;
mod pipeline;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use config::{
    AnsatzSpec, DatasetSpec, EvalSpec, ExperimentConfig, ModelSpec, NetworkSpec, OptimizerSpec, SweepSpec,
    SweepVariable, Threshold,
};
pub use pipeline::{
    generate_network, observe_records, reconstruct, run_higher_order, run_pipeline, simulate, ReconSpec,
};
pub use sweep::{
    run_sweep, sweep_auc_vs_m, sweep_min_experiments, sweep_noise, MinMRow, MinMSummary, SweepOutput, SweepPoint,
};

use crate::seed::{derive, derive_tagged};

/// Sub-seeds of one repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub repeat: u64,
    pub network: u64,
    pub structure: u64,
    pub dataset: u64,
    pub observation: u64,
    pub init: u64,
    pub optim: u64,
}

impl RepeatSeeds {
    pub fn new(master: u64, r: usize) -> Self {
        Self::from_repeat_seed(derive(master, r as u64))
    }

    pub fn from_repeat_seed(s: u64) -> Self {
        Self {
            repeat: s,
            network: derive_tagged(s, "network", 0),
            structure: derive_tagged(s, "structure", 0),
            dataset: derive_tagged(s, "dataset", 0),
            observation: derive_tagged(s, "observation", 0),
            init: derive_tagged(s, "init", 0),
            optim: derive_tagged(s, "optim", 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatStatus {
    Ok,
    /// Fewer than `M` steady states were accepted within the trial cap.
    Shortfall,
    /// Training produced non-finite values.
    Diverged,
}

/// One repeat's outcome. Metric fields are `None` unless `status` is `Ok`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub repeat: usize,
    pub seed: u64,
    pub status: RepeatStatus,
    pub m: usize,
    pub m_collected: usize,
    pub attempts: usize,
    pub iterations: usize,
    pub final_full_loss: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frobenius_rel: Option<f64>,
    pub success: bool,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `NaN` mean for an empty sample; zero spread for a single value.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repeats: usize,
    pub ok: usize,
    pub failed: usize,
    pub successes: usize,
    pub auc: Stat,
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frobenius_rel: Option<Stat>,
}

impl Aggregate {
    /// Failed repeats count toward `failed` and are left out of the statistics.
    pub fn from_rows(rows: &[RepeatRow]) -> Self {
        let ok: Vec<&RepeatRow> = rows.iter().filter(|r| r.status == RepeatStatus::Ok).collect();
        let col = |f: fn(&RepeatRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        let frob: Vec<f64> = ok.iter().filter_map(|r| r.frobenius_rel).collect();
        Self {
            repeats: rows.len(),
            ok: ok.len(),
            failed: rows.len() - ok.len(),
            successes: ok.iter().filter(|r| r.success).count(),
            auc: col(|r| r.auc),
            accuracy: col(|r| r.accuracy),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
            frobenius_rel: (!frob.is_empty()).then(|| Stat::of(&frob)),
        }
    }

    pub const CSV_HEADER: &'static str = "repeats,ok,failed,successes,auc_mean,auc_std,accuracy_mean,accuracy_std,\
precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.repeats,
            self.ok,
            self.failed,
            self.successes,
            self.auc.mean,
            self.auc.std,
            self.accuracy.mean,
            self.accuracy.std,
            self.precision.mean,
            self.precision.std,
            self.recall.mean,
            self.recall.std,
            self.f1.mean,
            self.f1.std
        )
    }
}

/// Outcome of one pipeline run over all repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub master_seed: u64,
    pub repeats: Vec<RepeatRow>,
    pub aggregate: Aggregate,
    /// Wall-clock seconds per repeat. Kept out of `results.json` so that file
    /// is reproducible byte for byte.
    #[serde(skip)]
    pub wall_times: Vec<f64>,
}

impl ReconResult {
    pub fn is_partial(&self) -> bool {
        self.aggregate.failed > 0
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn repeats_csv(&self) -> String {
        repeats_csv(&self.repeats)
    }

    pub fn aggregate_csv(&self) -> String {
        format!("config_hash,{}\n{},{}\n", Aggregate::CSV_HEADER, self.config_hash, self.aggregate.csv_fields())
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("repeat,wall_seconds\n");
        for (r, t) in self.wall_times.iter().enumerate() {
            let _ = writeln!(s, "{r},{t:.3}");
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const REPEATS_CSV_HEADER: &str =
    "repeat,seed,status,m,m_collected,attempts,iterations,final_full_loss,auc,accuracy,precision,recall,f1,frobenius_rel,success";

pub fn repeats_csv(rows: &[RepeatRow]) -> String {
    let mut s = String::from(REPEATS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let status = match r.status {
            RepeatStatus::Ok => "ok",
            RepeatStatus::Shortfall => "shortfall",
            RepeatStatus::Diverged => "diverged",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.repeat,
            r.seed,
            status,
            r.m,
            r.m_collected,
            r.attempts,
            r.iterations,
            opt(r.final_full_loss),
            opt(r.auc),
            opt(r.accuracy),
            opt(r.precision),
            opt(r.recall),
            opt(r.f1),
            opt(r.frobenius_rel),
            r.success
        );
    }
    s
}

/// FNV-1a of the canonical config JSON, as 16 hex digits.
pub fn config_hash(cfg: &ExperimentConfig) -> crate::Result<String> {
    let text = serde_json::to_string(cfg)?;
    let h = text
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    Ok(format!("{h:016x}"))
}
