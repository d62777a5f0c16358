//! Grids of pipeline runs.
//!
//! Every grid point equals [`run_pipeline`](super::run_pipeline) on the
//! config with that point's value substituted. Within one repeat the network
//! and the steady-state trial sequence are shared across `M` values, so the
//! dataset at a smaller `M` is a prefix of the one at a larger `M`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SweepVariable};
use super::pipeline::{attempt_cap, collector, finish_repeat, generate_network, simulated_structure};
use super::{config_hash, Aggregate, RepeatRow, RepeatSeeds, Stat};
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub m: usize,
    pub aggregate: Aggregate,
    pub repeats: Vec<RepeatRow>,
}

/// Smallest successful `M` for one network size and repeat; `None` when the
/// scan reached the cap without success.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMRow {
    pub n: usize,
    pub repeat: usize,
    pub seed: u64,
    pub m_min: Option<usize>,
    pub cap: usize,
    pub probes: usize,
}

impl MinMRow {
    /// Censored repeats count at the cap.
    pub fn value(&self) -> usize {
        self.m_min.unwrap_or(self.cap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMSummary {
    pub n: usize,
    pub repeats: usize,
    pub censored: usize,
    pub m_min: Stat,
    /// `m_min / n` per repeat.
    pub ratio: Stat,
}

impl MinMSummary {
    pub fn from_rows(n: usize, rows: &[MinMRow]) -> Self {
        let v: Vec<f64> = rows.iter().map(|r| r.value() as f64).collect();
        let ratio: Vec<f64> = v.iter().map(|m| m / n as f64).collect();
        Self {
            n,
            repeats: rows.len(),
            censored: rows.iter().filter(|r| r.m_min.is_none()).count(),
            m_min: Stat::of(&v),
            ratio: Stat::of(&ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub config_hash: String,
    pub variable: SweepVariable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub min_m: Vec<MinMSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub min_m_rows: Vec<MinMRow>,
}

impl SweepOutput {
    /// True when any repeat failed or was censored.
    pub fn is_partial(&self) -> bool {
        self.points.iter().any(|p| p.aggregate.failed > 0) || self.min_m.iter().any(|s| s.censored > 0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self.variable {
            SweepVariable::N => {
                s.push_str("n,repeats,censored,m_min_mean,m_min_std,ratio_mean,ratio_std\n");
                for p in &self.min_m {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        p.n, p.repeats, p.censored, p.m_min.mean, p.m_min.std, p.ratio.mean, p.ratio.std
                    );
                }
            }
            SweepVariable::M => {
                let _ = writeln!(s, "m,{}", Aggregate::CSV_HEADER);
                for p in &self.points {
                    let _ = writeln!(s, "{},{}", p.m, p.aggregate.csv_fields());
                }
            }
            SweepVariable::Sigma => {
                let _ = writeln!(s, "sigma,m,{}", Aggregate::CSV_HEADER);
                for p in &self.points {
                    let _ = writeln!(s, "{},{},{}", p.sigma.unwrap_or(0.0), p.m, p.aggregate.csv_fields());
                }
            }
        }
        s
    }
}

fn with_m(cfg: &ExperimentConfig, m: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.dataset.m = m;
    c
}

fn sorted_unique(values: &[usize]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Rows of one repeat at every `M` in `ms` (ascending), sharing one network
/// and one trial sequence.
fn repeat_over_m(cfg: &ExperimentConfig, r: usize, ms: &[usize]) -> Result<Vec<RepeatRow>> {
    let seeds = RepeatSeeds::new(cfg.seed, r);
    let truth = generate_network(&cfg.network, seeds.network)?;
    let model = cfg.model.build();
    let sim = simulated_structure(cfg, &truth, &seeds)?;
    let mut c = collector(cfg, model.as_ref(), &sim, &seeds)?;
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let cm = with_m(cfg, m);
        c.extend_to(m, attempt_cap(&cm, m))?;
        rows.push(finish_repeat(&cm, r, &seeds, &truth, c.records(), c.stats(), false)?.0);
    }
    Ok(rows)
}

fn points_over_m(cfg: &ExperimentConfig, ms: &[usize], sigma: Option<f64>, per_repeat: Vec<Vec<RepeatRow>>) -> Vec<SweepPoint> {
    ms.iter()
        .enumerate()
        .map(|(k, &m)| {
            let rows: Vec<RepeatRow> = per_repeat.iter().map(|rr| rr[k].clone()).collect();
            debug_assert_eq!(rows.len(), cfg.repeats);
            SweepPoint { sigma, m, aggregate: Aggregate::from_rows(&rows), repeats: rows }
        })
        .collect()
}

/// Aggregates at each `M`, ascending.
pub fn sweep_auc_vs_m(cfg: &ExperimentConfig, m_values: &[usize]) -> Result<Vec<SweepPoint>> {
    let ms = sorted_unique(m_values);
    if ms.first() == Some(&0) || ms.is_empty() {
        return Err(Error::Config { path: "sweep.values".into(), msg: "M values must be >= 1".into() });
    }
    let per_repeat =
        (0..cfg.repeats).into_par_iter().map(|r| repeat_over_m(cfg, r, &ms)).collect::<Result<Vec<_>>>()?;
    Ok(points_over_m(cfg, &ms, None, per_repeat))
}

/// Aggregates over the full `sigma x M` grid, sigma-major, both ascending.
/// The noise kind comes from `cfg.noise`.
pub fn sweep_noise(cfg: &ExperimentConfig, sigmas: &[f64], m_values: &[usize]) -> Result<Vec<SweepPoint>> {
    let Some(base) = cfg.noise else {
        return Err(Error::Config { path: "noise".into(), msg: "noise sweeps need a noise kind".into() });
    };
    let ms = sorted_unique(m_values);
    let mut ss = sigmas.to_vec();
    ss.sort_by(f64::total_cmp);
    ss.dedup();
    let tasks: Vec<(usize, usize)> = (0..ss.len()).flat_map(|i| (0..cfg.repeats).map(move |r| (i, r))).collect();
    let rows = tasks
        .par_iter()
        .map(|&(i, r)| {
            let mut c = cfg.clone();
            c.noise = Some(NoiseSpec { kind: base.kind, sigma: ss[i] });
            repeat_over_m(&c, r, &ms)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for (i, chunk) in rows.chunks(cfg.repeats).enumerate() {
        points.extend(points_over_m(cfg, &ms, Some(ss[i]), chunk.to_vec()));
    }
    Ok(points)
}

fn min_m_one(cfg: &ExperimentConfig, n: usize, r: usize, granularity: usize, cap_factor: usize) -> Result<MinMRow> {
    let cn = {
        let mut c = cfg.clone();
        c.network = cfg.network.with_n(n)?;
        c
    };
    let seeds = RepeatSeeds::new(cfg.seed, r);
    let truth = generate_network(&cn.network, seeds.network)?;
    let model = cn.model.build();
    let sim = simulated_structure(&cn, &truth, &seeds)?;
    let mut c = collector(&cn, model.as_ref(), &sim, &seeds)?;
    let cap = cap_factor * n;
    let mut row = MinMRow { n, repeat: r, seed: seeds.repeat, m_min: None, cap, probes: 0 };
    let mut m = granularity;
    while m <= cap {
        let cm = with_m(&cn, m);
        c.extend_to(m, attempt_cap(&cm, m))?;
        row.probes += 1;
        let (rr, _) = finish_repeat(&cm, r, &seeds, &truth, c.records(), c.stats(), false)?;
        if rr.success {
            row.m_min = Some(m);
            break;
        }
        m += granularity;
    }
    Ok(row)
}

/// Linear scan `M = g, 2g, ...` up to `cap_factor * N` for the smallest `M`
/// whose reconstruction succeeds, per network size and repeat.
pub fn sweep_min_experiments(
    cfg: &ExperimentConfig,
    n_values: &[usize],
    granularity: usize,
    cap_factor: usize,
) -> Result<(Vec<MinMSummary>, Vec<MinMRow>)> {
    if granularity == 0 || cap_factor == 0 {
        return Err(Error::Config { path: "sweep.granularity".into(), msg: "must be positive".into() });
    }
    let ns = sorted_unique(n_values);
    let tasks: Vec<(usize, usize)> = ns.iter().flat_map(|&n| (0..cfg.repeats).map(move |r| (n, r))).collect();
    let rows = tasks
        .par_iter()
        .map(|&(n, r)| min_m_one(cfg, n, r, granularity, cap_factor))
        .collect::<Result<Vec<_>>>()?;
    let summary = ns
        .iter()
        .zip(rows.chunks(cfg.repeats))
        .map(|(&n, chunk)| MinMSummary::from_rows(n, chunk))
        .collect();
    Ok((summary, rows))
}

fn as_counts(values: &[f64]) -> Vec<usize> {
    values.iter().map(|&v| v as usize).collect()
}

/// Runs the sweep in `cfg.sweep`; writes `sweep.csv`, `sweep.json` and
/// `config.json` when `cfg.out_dir` is set.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let Some(sw) = &cfg.sweep else {
        return Err(Error::Config { path: "sweep".into(), msg: "config has no sweep section".into() });
    };
    let mut out = SweepOutput {
        config_hash: config_hash(cfg)?,
        variable: sw.variable,
        points: Vec::new(),
        min_m: Vec::new(),
        min_m_rows: Vec::new(),
    };
    match sw.variable {
        SweepVariable::M => out.points = sweep_auc_vs_m(cfg, &as_counts(&sw.values))?,
        SweepVariable::Sigma => {
            out.points = sweep_noise(cfg, &sw.values, sw.m_values.as_deref().unwrap_or_default())?;
        }
        SweepVariable::N => {
            let (s, rows) = sweep_min_experiments(cfg, &as_counts(&sw.values), sw.granularity, sw.cap_factor)?;
            out.min_m = s;
            out.min_m_rows = rows;
        }
    }
    if let Some(dir) = cfg.out_dir.as_deref() {
        write_sweep(cfg, &out, dir)?;
    }
    Ok(out)
}

fn write_sweep(cfg: &ExperimentConfig, out: &SweepOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    std::fs::write(dir.join("sweep.csv"), out.to_csv())?;
    std::fs::write(dir.join("sweep.json"), out.to_json()?)?;
    Ok(())
}
