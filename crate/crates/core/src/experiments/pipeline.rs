use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AnsatzSpec, ExperimentConfig, ModelSpec, NetworkSpec, OptimizerSpec};
use super::{config_hash, Aggregate, ReconResult, RepeatRow, RepeatSeeds, RepeatStatus};
use crate::ansatz::{AnsatzMode, VariationalAnsatz};
use crate::dynamics::{write_dataset, CollectStats, Collector, Dataset, SteadyStateRecord};
use crate::error::{invalid, Error, Result};
use crate::loss::{BatchPolicy, ResidualSystem};
use crate::metrics::EvalReport;
use crate::networks::{gen_er, gen_simplex, gen_weighted, load_edge_list, Directedness, Structure};
use crate::noise::{apply_observation_noise, apply_structural_noise, NoiseKind};
use crate::optimizer::{train, TrainOutcome, TrainTrace};
use crate::seed::rng;

/// Builds the ground-truth structure.
pub fn generate_network(spec: &NetworkSpec, seed: u64) -> Result<Structure> {
    let dir = |d: bool| if d { Directedness::Directed } else { Directedness::Undirected };
    let mut r = rng(seed);
    Ok(match spec {
        NetworkSpec::Er { n, p, directed } => Structure::Pairwise(gen_er(*n, *p, dir(*directed), &mut r)?),
        NetworkSpec::Weighted { n, p, directed } => Structure::Pairwise(gen_weighted(*n, *p, dir(*directed), &mut r)?),
        NetworkSpec::Simplex { n, d, p } => Structure::Hyper(gen_simplex(*n, *d, *p, &mut r)?),
        NetworkSpec::EdgeList { path, directed, weighted } => {
            let (net, report) = load_edge_list(path, dir(*directed), *weighted)?;
            if report.self_loops + report.duplicates > 0 {
                log::warn!(
                    "{}: dropped {} self-loops and {} duplicate edges",
                    path.display(),
                    report.self_loops,
                    report.duplicates
                );
            }
            Structure::Pairwise(net)
        }
    })
}

/// The structure the dynamics run on: the truth, or its perturbed copy
/// under structural noise.
pub(crate) fn simulated_structure(cfg: &ExperimentConfig, truth: &Structure, seeds: &RepeatSeeds) -> Result<Structure> {
    match cfg.noise {
        Some(n) if n.kind == NoiseKind::Structural => apply_structural_noise(truth, n.sigma, &mut rng(seeds.structure)),
        _ => Ok(truth.clone()),
    }
}

pub(crate) fn collector<'a>(
    cfg: &ExperimentConfig,
    model: &'a dyn crate::dynamics::DynModel,
    sim: &'a Structure,
    seeds: &RepeatSeeds,
) -> Result<Collector<'a>> {
    Collector::new(model, sim, cfg.dataset.collect_options(cfg.noise.as_ref()), seeds.dataset)
}

pub(crate) fn attempt_cap(cfg: &ExperimentConfig, m: usize) -> usize {
    cfg.dataset.max_attempts.unwrap_or(20 * m)
}

/// Collects `cfg.dataset.m` steady states on `truth` (or its perturbed copy).
pub fn simulate(cfg: &ExperimentConfig, truth: &Structure, seeds: &RepeatSeeds) -> Result<Dataset> {
    let model = cfg.model.build();
    let sim = simulated_structure(cfg, truth, seeds)?;
    let mut c = collector(cfg, model.as_ref(), &sim, seeds)?;
    c.extend_to(cfg.dataset.m, attempt_cap(cfg, cfg.dataset.m))?;
    Ok(c.into_dataset())
}

/// What the reconstruction sees: the collected states, with observation
/// noise if configured.
pub fn observe_records(cfg: &ExperimentConfig, records: &[SteadyStateRecord], seeds: &RepeatSeeds) -> Result<Vec<SteadyStateRecord>> {
    match cfg.noise {
        Some(n) if n.kind == NoiseKind::Observation => apply_observation_noise(records, n.sigma, &mut rng(seeds.observation)),
        _ => Ok(records.to_vec()),
    }
}

/// The inputs of a blind reconstruction. Unknown fields are ignored, so a
/// full experiment config can be passed without its network being read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSpec {
    pub model: ModelSpec,
    #[serde(default)]
    pub ansatz: AnsatzSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ReconSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config { path: e.path().to_string(), msg: e.into_inner().to_string() })?;
        let mode = spec.ansatz.mode()?;
        let ok = match (&spec.model, mode) {
            (ModelSpec::HyperKuramoto { d }, AnsatzMode::Hyper { d: ad }) => *d == ad,
            (ModelSpec::HyperKuramoto { .. }, _) | (_, AnsatzMode::Hyper { .. }) => false,
            _ => true,
        };
        if !ok {
            return Err(Error::Config { path: "ansatz.mode".into(), msg: format!("ansatz {mode} does not fit the model") });
        }
        spec.optimizer
            .optim_config(0)
            .validate()
            .map_err(|e| Error::Config { path: "optimizer".into(), msg: e.to_string() })?;
        Ok(spec)
    }
}

/// Trains an ansatz on `records` alone. The node count comes from the
/// records; nothing about the true structure is consulted.
pub fn reconstruct(
    model: &ModelSpec,
    records: &[SteadyStateRecord],
    ansatz: &AnsatzSpec,
    optimizer: &OptimizerSpec,
    seeds: &RepeatSeeds,
) -> Result<TrainOutcome> {
    let n = records.first().map(|r| r.x.len()).ok_or_else(|| invalid("cannot reconstruct from an empty dataset"))?;
    let mode = ansatz.mode()?;
    let dyn_model = model.build();
    let system = ResidualSystem::new(dyn_model.as_ref(), records, mode, n)?;
    let init = VariationalAnsatz::init(mode, n, ansatz.k, ansatz.init_scale, &mut rng(seeds.init))?;
    let policy = BatchPolicy::from_ratio(optimizer.sampling_ratio, records.len(), n);
    train(&system, init, &optimizer.optim_config(seeds.optim), policy)
}

/// Per-repeat files, written only by [`run_pipeline`].
pub(crate) struct Artifacts {
    truth: Structure,
    simulated: Option<Structure>,
    dataset: String,
    checkpoint: Option<String>,
    estimate: Option<Structure>,
    trace: Option<TrainTrace>,
    metrics: Option<EvalReport>,
}

impl Artifacts {
    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.truth.save(&dir.join("network.json"))?;
        if let Some(s) = &self.simulated {
            s.save(&dir.join("network_perturbed.json"))?;
        }
        std::fs::write(dir.join("dataset.jsonl"), &self.dataset)?;
        if let Some(c) = &self.checkpoint {
            std::fs::write(dir.join("checkpoint.json"), c)?;
        }
        if let Some(t) = &self.trace {
            std::fs::write(dir.join("trace.csv"), t.to_csv())?;
        }
        if let Some(e) = &self.estimate {
            e.save(&dir.join("estimate.json"))?;
            if let Structure::Hyper(h) = e {
                if h.order() == 2 {
                    std::fs::write(dir.join("estimate_dense.json"), serde_json::to_string(&h.dense_order2()?)? + "\n")?;
                }
            }
        }
        if let Some(m) = &self.metrics {
            std::fs::write(dir.join("metrics.json"), m.to_json()? + "\n")?;
        }
        Ok(())
    }
}

/// Observes, reconstructs and evaluates one repeat on already collected data.
pub(crate) fn finish_repeat(
    cfg: &ExperimentConfig,
    r: usize,
    seeds: &RepeatSeeds,
    truth: &Structure,
    collected: &[SteadyStateRecord],
    stats: &CollectStats,
    keep: bool,
) -> Result<(RepeatRow, Option<Artifacts>)> {
    let m = cfg.dataset.m;
    let mut row = RepeatRow {
        repeat: r,
        seed: seeds.repeat,
        status: RepeatStatus::Shortfall,
        m,
        m_collected: collected.len(),
        attempts: stats.attempts,
        iterations: 0,
        final_full_loss: None,
        auc: None,
        accuracy: None,
        precision: None,
        recall: None,
        f1: None,
        frobenius_rel: None,
        success: false,
    };
    let records = observe_records(cfg, &collected[..collected.len().min(m)], seeds)?;
    let mut art = keep.then(|| Artifacts {
        truth: truth.clone(),
        simulated: None,
        dataset: String::new(),
        checkpoint: None,
        estimate: None,
        trace: None,
        metrics: None,
    });
    if let Some(a) = art.as_mut() {
        a.dataset = write_dataset(&records)?;
    }
    if collected.len() < m {
        return Ok((row, art));
    }

    let out = reconstruct(&cfg.model, &records, &cfg.ansatz, &cfg.optimizer, seeds)?;
    row.iterations = out.trace.iterations;
    if let Some(a) = art.as_mut() {
        a.trace = Some(out.trace.clone());
        a.checkpoint = Some(serde_json::to_string(&out.ansatz.to_checkpoint())? + "\n");
    }
    if let Some(e) = &out.error {
        log::warn!("repeat {r}: {e}");
        row.status = RepeatStatus::Diverged;
        return Ok((row, art));
    }
    let mode = out.ansatz.mode();
    let estimate = out.ansatz.to_adjacency();
    let report = EvalReport::evaluate(
        truth,
        &estimate,
        mode.candidate_kind(),
        cfg.evaluation.threshold,
        mode == AnsatzMode::Weighted,
    )?;
    row.status = RepeatStatus::Ok;
    row.final_full_loss = Some(out.trace.final_full_loss);
    row.auc = Some(report.auc);
    row.accuracy = Some(report.accuracy);
    row.precision = Some(report.precision);
    row.recall = Some(report.recall);
    row.f1 = Some(report.f1);
    row.frobenius_rel = report.frobenius_rel;
    row.success = report.is_success();
    if let Some(a) = art.as_mut() {
        a.estimate = Some(estimate);
        a.metrics = Some(report);
    }
    Ok((row, art))
}

fn run_repeat(cfg: &ExperimentConfig, r: usize, keep: bool) -> Result<(RepeatRow, Option<Artifacts>)> {
    let seeds = RepeatSeeds::new(cfg.seed, r);
    let truth = generate_network(&cfg.network, seeds.network)?;
    let model = cfg.model.build();
    let sim = simulated_structure(cfg, &truth, &seeds)?;
    let mut c = collector(cfg, model.as_ref(), &sim, &seeds)?;
    c.extend_to(cfg.dataset.m, attempt_cap(cfg, cfg.dataset.m))?;
    let (row, mut art) = finish_repeat(cfg, r, &seeds, &truth, c.records(), c.stats(), keep)?;
    if let Some(a) = art.as_mut() {
        if sim != truth {
            a.simulated = Some(sim);
        }
    }
    Ok((row, art))
}

fn repeat_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("repeat_{r:03}"))
}

/// Runs every repeat of `cfg`. When `cfg.out_dir` is set, writes
/// `config.json`, `results.json`, `repeats.csv`, `aggregate.csv`,
/// `timings.csv` and one directory of artifacts per repeat.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ReconResult> {
    cfg.validate()?;
    let out = cfg.out_dir.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<(RepeatRow, f64)>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let start = Instant::now();
            let (row, art) = run_repeat(cfg, r, out.is_some())?;
            if let (Some(dir), Some(a)) = (out, art) {
                a.write(&repeat_dir(dir, r))?;
            }
            Ok((row, start.elapsed().as_secs_f64()))
        })
        .collect();
    let (rows, wall_times): (Vec<RepeatRow>, Vec<f64>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let result = ReconResult {
        config_hash: config_hash(cfg)?,
        name: cfg.name.clone(),
        master_seed: cfg.seed,
        aggregate: Aggregate::from_rows(&rows),
        repeats: rows,
        wall_times,
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
        std::fs::write(dir.join("results.json"), result.to_json()?)?;
        std::fs::write(dir.join("repeats.csv"), result.repeats_csv())?;
        std::fs::write(dir.join("aggregate.csv"), result.aggregate_csv())?;
        std::fs::write(dir.join("timings.csv"), result.timings_csv())?;
    }
    Ok(result)
}

/// [`run_pipeline`] restricted to higher-order configs. Each repeat also
/// gets the reconstructed tuple weights and, for order 2, the dense
/// symmetric `n x n x n` unfolding.
pub fn run_higher_order(cfg: &ExperimentConfig) -> Result<ReconResult> {
    if !matches!(cfg.model, ModelSpec::HyperKuramoto { .. }) {
        return Err(Error::Config { path: "model.name".into(), msg: "expected hyper_kuramoto".into() });
    }
    run_pipeline(cfg)
}
