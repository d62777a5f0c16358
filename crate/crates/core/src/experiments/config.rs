//! Declarative experiment description, read from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ansatz::AnsatzMode;
use crate::dynamics::{
    CollectOptions, DispersionKind, DynModel, HyperKuramoto, Kuramoto, OmegaSampler, Sakaguchi, SteadyStateOptions,
    TrialIntegrator,
};
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::optimizer::{OptimConfig, UpdateRule};

/// Trailing fraction of the horizon averaged under dynamical noise.
pub const DYN_NOISE_AVG_FRACTION: f64 = 0.1;

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Erdős–Rényi with unit weights.
    Er {
        n: usize,
        p: f64,
        #[serde(default)]
        directed: bool,
    },
    /// Erdős–Rényi support with weights on `(0, 1]`.
    Weighted {
        n: usize,
        p: f64,
        #[serde(default)]
        directed: bool,
    },
    /// Random `d`-simplices.
    Simplex { n: usize, d: usize, p: f64 },
    /// `src dst [weight]` file; relative paths resolve against the config file.
    EdgeList {
        path: PathBuf,
        #[serde(default)]
        directed: bool,
        #[serde(default)]
        weighted: bool,
    },
}

impl NetworkSpec {
    /// Node count, when known without reading a file.
    pub fn n(&self) -> Option<usize> {
        match *self {
            NetworkSpec::Er { n, .. } | NetworkSpec::Weighted { n, .. } | NetworkSpec::Simplex { n, .. } => Some(n),
            NetworkSpec::EdgeList { .. } => None,
        }
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        let mut s = self.clone();
        match &mut s {
            NetworkSpec::Er { n: m, .. } | NetworkSpec::Weighted { n: m, .. } | NetworkSpec::Simplex { n: m, .. } => {
                *m = n
            }
            NetworkSpec::EdgeList { .. } => return Err(cfg_err("network", "cannot resize an edge-list network")),
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Kuramoto,
    Sakaguchi {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    HyperKuramoto { d: usize },
}

fn default_alpha() -> f64 {
    0.3
}

impl ModelSpec {
    pub fn build(&self) -> Box<dyn DynModel> {
        match *self {
            ModelSpec::Kuramoto => Box::new(Kuramoto),
            ModelSpec::Sakaguchi { alpha } => Box::new(Sakaguchi { alpha }),
            ModelSpec::HyperKuramoto { d } => Box::new(HyperKuramoto { d }),
        }
    }
}

/// `f64` that also reads and writes `"inf"` for an infinite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold(pub f64);

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(Threshold(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got \"{t}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub m: usize,
    pub eps_conv: f64,
    pub eps_sync: Threshold,
    pub dt: f64,
    pub t_max: f64,
    pub check_interval: f64,
    pub dispersion: DispersionKind,
    pub omega_half_width: f64,
    /// Trial cap; default `20 * m`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_attempts: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let s = SteadyStateOptions::default();
        Self {
            m: 60,
            eps_conv: s.eps_conv,
            eps_sync: Threshold(1e-3),
            dt: s.dt,
            t_max: s.t_max,
            check_interval: s.check_interval,
            dispersion: s.dispersion,
            omega_half_width: 1.0,
            max_attempts: None,
        }
    }
}

impl DatasetSpec {
    pub fn collect_options(&self, noise: Option<&NoiseSpec>) -> CollectOptions {
        let integrator = match noise {
            Some(NoiseSpec { kind: NoiseKind::Dynamical, sigma }) if *sigma > 0.0 => {
                TrialIntegrator::Noisy { sigma_dyn: *sigma, avg_fraction: DYN_NOISE_AVG_FRACTION }
            }
            _ => TrialIntegrator::Rk4,
        };
        CollectOptions {
            steady: SteadyStateOptions {
                eps_conv: self.eps_conv,
                dt: self.dt,
                t_max: self.t_max,
                check_interval: self.check_interval,
                dispersion: self.dispersion,
            },
            eps_sync: self.eps_sync.0,
            omega: OmegaSampler::UniformCentered { half_width: self.omega_half_width },
            integrator,
            max_attempts: self.max_attempts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzSpec {
    /// `undirected`, `directed`, `weighted` or `hyper`.
    pub mode: String,
    /// Tuple order for `hyper`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub k: f64,
    pub init_scale: f64,
}

impl Default for AnsatzSpec {
    fn default() -> Self {
        Self { mode: "undirected".into(), d: None, k: 12.0, init_scale: 0.1 }
    }
}

impl AnsatzSpec {
    pub fn mode(&self) -> Result<AnsatzMode> {
        AnsatzMode::parse(&self.mode, self.d).map_err(|e| cfg_err("ansatz.mode", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub rule: UpdateRule,
    pub eta: f64,
    pub eps_fisher: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_rtol: f64,
    /// Fraction of nodes sampled per record and step.
    pub sampling_ratio: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            rule: o.rule,
            eta: o.eta,
            eps_fisher: o.eps_fisher,
            adam_betas: o.adam_betas,
            adam_eps: o.adam_eps,
            max_iters: o.max_iters,
            plateau_window: o.plateau_window,
            plateau_rtol: o.plateau_rtol,
            sampling_ratio: 0.05,
        }
    }
}

impl OptimizerSpec {
    pub fn optim_config(&self, seed: u64) -> OptimConfig {
        OptimConfig {
            rule: self.rule,
            eta: self.eta,
            eps_fisher: self.eps_fisher,
            adam_betas: self.adam_betas,
            adam_eps: self.adam_eps,
            max_iters: self.max_iters,
            plateau_window: self.plateau_window,
            plateau_rtol: self.plateau_rtol,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { threshold: crate::metrics::DEFAULT_THRESHOLD }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    /// Number of steady states.
    M,
    /// Network size; searches the smallest successful `M` per size.
    N,
    /// Noise level; needs `noise` for the kind and `m_values` for the grid.
    Sigma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// `M` grid for noise sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_values: Option<Vec<usize>>,
    /// Step of the minimum-`M` scan.
    #[serde(default = "default_granularity")]
    pub granularity: usize,
    /// The scan stops at `cap_factor * N`.
    #[serde(default = "default_cap_factor")]
    pub cap_factor: usize,
}

fn default_granularity() -> usize {
    5
}

fn default_cap_factor() -> usize {
    20
}

fn default_repeats() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub network: NetworkSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub ansatz: AnsatzSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Where results go. Read but never written back, so neither the saved
    /// config nor its hash depends on the output location.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative edge-list path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let NetworkSpec::EdgeList { path: p, .. } = &mut cfg.network {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ansatz_mode(&self) -> Result<AnsatzMode> {
        self.ansatz.mode()
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let mode = self.ansatz_mode()?;
        match &self.network {
            NetworkSpec::Er { n, p, directed } | NetworkSpec::Weighted { n, p, directed } => {
                if *n < 2 {
                    return Err(cfg_err("network.n", format!("need at least 2 nodes, got {n}")));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(cfg_err("network.p", format!("{p} outside [0, 1]")));
                }
                let weighted = matches!(self.network, NetworkSpec::Weighted { .. });
                check_pairwise_mode(mode, *directed, weighted)?;
            }
            NetworkSpec::Simplex { n, d, p } => {
                if *d < 2 || *n < d + 1 {
                    return Err(cfg_err("network", format!("simplex order {d} needs 2 <= d < n = {n}")));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(cfg_err("network.p", format!("{p} outside [0, 1]")));
                }
                if mode != (AnsatzMode::Hyper { d: *d }) {
                    return Err(cfg_err("ansatz.mode", format!("simplex network of order {d} needs ansatz hyper d={d}")));
                }
            }
            NetworkSpec::EdgeList { directed, weighted, .. } => check_pairwise_mode(mode, *directed, *weighted)?,
        }
        match (&self.model, mode) {
            (ModelSpec::HyperKuramoto { d }, AnsatzMode::Hyper { d: ad }) if *d == ad => {}
            (ModelSpec::HyperKuramoto { d }, _) => {
                return Err(cfg_err("model.d", format!("model order {d} does not match ansatz {mode}")));
            }
            (_, AnsatzMode::Hyper { .. }) => {
                return Err(cfg_err("model.name", "hyper ansatz needs the hyper_kuramoto model"));
            }
            (ModelSpec::Sakaguchi { alpha }, _) if !alpha.is_finite() => {
                return Err(cfg_err("model.alpha", "phase lag must be finite"));
            }
            _ => {}
        }

        let ds = &self.dataset;
        if ds.m == 0 {
            return Err(cfg_err("dataset.m", "need at least one steady state"));
        }
        if ds.eps_sync.0.is_nan() {
            return Err(cfg_err("dataset.eps_sync", "must be a number or \"inf\""));
        }
        if !(ds.omega_half_width > 0.0 && ds.omega_half_width.is_finite()) {
            return Err(cfg_err("dataset.omega_half_width", "must be positive"));
        }
        ds.collect_options(None).steady.validate().map_err(|e| cfg_err("dataset", e.to_string()))?;

        if let Some(noise) = &self.noise {
            noise.validate().map_err(|e| cfg_err("noise.sigma", e.to_string()))?;
        }

        let a = &self.ansatz;
        if !(a.k > 0.0 && a.k.is_finite()) {
            return Err(cfg_err("ansatz.k", "must be positive"));
        }
        if !(a.init_scale >= 0.0 && a.init_scale.is_finite()) {
            return Err(cfg_err("ansatz.init_scale", "must be >= 0"));
        }

        let o = &self.optimizer;
        o.optim_config(0).validate().map_err(|e| cfg_err("optimizer", e.to_string()))?;
        if !(o.sampling_ratio > 0.0 && o.sampling_ratio <= 1.0) {
            return Err(cfg_err("optimizer.sampling_ratio", "must lie in (0, 1]"));
        }

        if !self.evaluation.threshold.is_finite() {
            return Err(cfg_err("evaluation.threshold", "must be finite"));
        }
        if self.repeats == 0 {
            return Err(cfg_err("repeats", "must be at least 1"));
        }
        if let Some(sw) = &self.sweep {
            self.validate_sweep(sw)?;
        }
        Ok(())
    }

    fn validate_sweep(&self, sw: &SweepSpec) -> Result<()> {
        if sw.values.is_empty() {
            return Err(cfg_err("sweep.values", "empty"));
        }
        let integral = |v: f64| v.fract() == 0.0 && v >= 1.0;
        match sw.variable {
            SweepVariable::M => {
                if !sw.values.iter().all(|&v| integral(v)) {
                    return Err(cfg_err("sweep.values", "M values must be integers >= 1"));
                }
            }
            SweepVariable::N => {
                if !sw.values.iter().all(|&v| integral(v) && v >= 4.0) {
                    return Err(cfg_err("sweep.values", "N values must be integers >= 4"));
                }
                if self.network.n().is_none() {
                    return Err(cfg_err("network", "size sweeps need a generated network"));
                }
                if sw.granularity == 0 || sw.cap_factor == 0 {
                    return Err(cfg_err("sweep.granularity", "granularity and cap_factor must be positive"));
                }
            }
            SweepVariable::Sigma => {
                if self.noise.is_none() {
                    return Err(cfg_err("noise", "noise sweeps need a noise kind"));
                }
                if !sw.values.iter().all(|&v| v >= 0.0 && v.is_finite()) {
                    return Err(cfg_err("sweep.values", "noise levels must be finite and >= 0"));
                }
                match &sw.m_values {
                    Some(ms) if !ms.is_empty() && ms.iter().all(|&m| m >= 1) => {}
                    _ => return Err(cfg_err("sweep.m_values", "noise sweeps need a non-empty M grid")),
                }
            }
        }
        Ok(())
    }
}

fn check_pairwise_mode(mode: AnsatzMode, directed: bool, weighted: bool) -> Result<()> {
    let ok = match mode {
        AnsatzMode::Directed => directed,
        AnsatzMode::Undirected => !directed,
        AnsatzMode::Weighted => !directed && weighted,
        AnsatzMode::Hyper { .. } => false,
    };
    if ok {
        Ok(())
    } else {
        Err(cfg_err(
            "ansatz.mode",
            format!(
                "ansatz {mode} does not match a {} {} network",
                if directed { "directed" } else { "undirected" },
                if weighted { "weighted" } else { "unweighted" }
            ),
        ))
    }
}
