//! Phase-oscillator models, RK4 integration to steady state, and the
//! dispersion filter that builds heterogeneous steady-state datasets.

use std::f64::consts::TAU;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::networks::{Candidate, Directedness, PairwiseNetwork, Structure};
use crate::seed::{self, Rng};

/// Driving condition of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionParams {
    /// Natural frequencies, centered to zero mean.
    pub omega: Vec<f64>,
    /// Sakaguchi phase lag in radians; ignored by the other models.
    #[serde(default)]
    pub alpha: f64,
    /// Common frequency of the locked state. Right-hand sides are evaluated
    /// in the frame rotating at this rate; zero for models that lock at rest.
    #[serde(default)]
    pub frame: f64,
    pub trial_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Timeout,
    Diverged,
    Synchronized,
}

/// One steady state and the condition that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyStateRecord {
    pub x: Vec<f64>,
    pub params: ConditionParams,
    pub residual_norm: f64,
    pub dispersion: f64,
    pub accepted: bool,
    pub reason: Option<RejectReason>,
}

/// A model whose right-hand side is affine in the coupling weights:
/// `F_i(x; p, w) = F_i(x; p, 0) + sum_e w_e * dF_i/dw_e(x, p)`.
///
/// The loss module relies on this to precompute per-record edge partials.
pub trait DynModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Phase lag written into [`ConditionParams::alpha`] for new trials.
    fn phase_lag(&self) -> f64 {
        0.0
    }

    /// True when, with centered frequencies, every locked state of
    /// `structure` is a fixed point. Otherwise locked states rotate at a
    /// common rate and are observed in the co-rotating frame.
    fn locks_at_rest(&self, _structure: &Structure) -> bool {
        false
    }

    /// Rejects structures of the wrong kind or size.
    fn check(&self, n: usize, params: &ConditionParams, structure: &Structure) -> Result<()>;

    /// Writes `dx/dt` into `out`. Callers must have passed [`DynModel::check`].
    fn rhs_into(&self, x: &[f64], params: &ConditionParams, structure: &Structure, out: &mut [f64]);

    /// Appends `(node, dF_node/dw_c)` for every node that candidate `c`
    /// drives. The node list is the same for every state.
    fn edge_partials(&self, x: &[f64], params: &ConditionParams, c: &Candidate, out: &mut Vec<(usize, f64)>);

    fn rhs(&self, x: &[f64], params: &ConditionParams, structure: &Structure) -> Result<Vec<f64>> {
        self.check(x.len(), params, structure)?;
        let mut out = vec![0.0; x.len()];
        self.rhs_into(x, params, structure, &mut out);
        Ok(out)
    }
}

fn check_pairwise(n: usize, params: &ConditionParams, structure: &Structure) -> Result<()> {
    if params.omega.len() != n {
        return Err(invalid(format!("omega has length {}, state has {n}", params.omega.len())));
    }
    match structure {
        Structure::Pairwise(p) if p.n() == n => Ok(()),
        Structure::Pairwise(p) => Err(invalid(format!("network has {} nodes, state has {n}", p.n()))),
        Structure::Hyper(_) => Err(invalid("pairwise model given a hyper structure")),
    }
}

/// `dx_i = omega_i + sum_j w_ij sin(x_j - x_i - alpha)`, expanded through
/// per-node sines and cosines so each call costs O(n) trig plus O(n^2) products.
fn phase_coupled_rhs(x: &[f64], omega: &[f64], frame: f64, net: &PairwiseNetwork, cos_a: f64, sin_a: f64, out: &mut [f64]) {
    let n = x.len();
    let (sin, cos): (Vec<f64>, Vec<f64>) = x.iter().map(|v| v.sin_cos()).unzip();
    for i in 0..n {
        let row = net.row(i);
        let (mut s, mut c) = (0.0, 0.0);
        for j in 0..n {
            s += row[j] * sin[j];
            c += row[j] * cos[j];
        }
        // sum_j w_ij sin(x_j - x_i) and sum_j w_ij cos(x_j - x_i)
        let k_sin = cos[i] * s - sin[i] * c;
        let k_cos = cos[i] * c + sin[i] * s;
        out[i] = (omega[i] - frame) + (cos_a * k_sin - sin_a * k_cos);
    }
}

/// Kuramoto model with unit coupling strength.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kuramoto;

/// Kuramoto–Sakaguchi model; the lag is read from [`ConditionParams::alpha`].
#[derive(Clone, Copy, Debug)]
pub struct Sakaguchi {
    pub alpha: f64,
}

impl Default for Sakaguchi {
    fn default() -> Self {
        Self { alpha: 0.3 }
    }
}

/// Simplicial Kuramoto model of order `d`:
/// `dx_i = omega_i + sum_{e ∋ i} w_e sin(sum_{j in e, j != i} x_j - d x_i)`.
#[derive(Clone, Copy, Debug)]
pub struct HyperKuramoto {
    pub d: usize,
}

fn pair_partials(x: &[f64], alpha: f64, c: &Candidate, out: &mut Vec<(usize, f64)>) {
    match *c {
        Candidate::Unordered(i, j) => {
            out.push((i, (x[j] - x[i] - alpha).sin()));
            out.push((j, (x[i] - x[j] - alpha).sin()));
        }
        Candidate::Ordered { target, source } => out.push((target, (x[source] - x[target] - alpha).sin())),
        Candidate::Tuple(_) => panic!("pairwise model given a tuple candidate"),
    }
}

impl DynModel for Kuramoto {
    fn name(&self) -> &'static str {
        "kuramoto"
    }

    fn locks_at_rest(&self, structure: &Structure) -> bool {
        matches!(structure, Structure::Pairwise(p) if p.mode() == Directedness::Undirected)
    }

    fn check(&self, n: usize, params: &ConditionParams, structure: &Structure) -> Result<()> {
        check_pairwise(n, params, structure)
    }

    fn rhs_into(&self, x: &[f64], params: &ConditionParams, structure: &Structure, out: &mut [f64]) {
        let Structure::Pairwise(net) = structure else { unreachable!() };
        phase_coupled_rhs(x, &params.omega, params.frame, net, 1.0, 0.0, out);
    }

    fn edge_partials(&self, x: &[f64], _: &ConditionParams, c: &Candidate, out: &mut Vec<(usize, f64)>) {
        pair_partials(x, 0.0, c, out);
    }
}

impl DynModel for Sakaguchi {
    fn name(&self) -> &'static str {
        "sakaguchi"
    }

    fn phase_lag(&self) -> f64 {
        self.alpha
    }

    fn check(&self, n: usize, params: &ConditionParams, structure: &Structure) -> Result<()> {
        check_pairwise(n, params, structure)
    }

    fn rhs_into(&self, x: &[f64], params: &ConditionParams, structure: &Structure, out: &mut [f64]) {
        let Structure::Pairwise(net) = structure else { unreachable!() };
        let (sin_a, cos_a) = params.alpha.sin_cos();
        phase_coupled_rhs(x, &params.omega, params.frame, net, cos_a, sin_a, out);
    }

    fn edge_partials(&self, x: &[f64], params: &ConditionParams, c: &Candidate, out: &mut Vec<(usize, f64)>) {
        pair_partials(x, params.alpha, c, out);
    }
}

impl DynModel for HyperKuramoto {
    fn name(&self) -> &'static str {
        "hyper_kuramoto"
    }

    fn check(&self, n: usize, params: &ConditionParams, structure: &Structure) -> Result<()> {
        if params.omega.len() != n {
            return Err(invalid(format!("omega has length {}, state has {n}", params.omega.len())));
        }
        match structure {
            Structure::Hyper(h) if h.n() != n => {
                Err(invalid(format!("structure has {} nodes, state has {n}", h.n())))
            }
            Structure::Hyper(h) if h.order() != self.d => Err(invalid(format!(
                "model order {} does not match structure order {}",
                self.d,
                h.order()
            ))),
            Structure::Hyper(_) => Ok(()),
            Structure::Pairwise(_) => Err(invalid("hyper model given a pairwise structure")),
        }
    }

    fn rhs_into(&self, x: &[f64], params: &ConditionParams, structure: &Structure, out: &mut [f64]) {
        let Structure::Hyper(h) = structure else { unreachable!() };
        out.iter_mut().zip(&params.omega).for_each(|(o, w)| *o = w - params.frame);
        let scale = (self.d + 1) as f64;
        for (nodes, w) in h.iter() {
            if w == 0.0 {
                continue;
            }
            let total: f64 = nodes.iter().map(|&j| x[j]).sum();
            for &i in nodes {
                out[i] += w * (total - scale * x[i]).sin();
            }
        }
    }

    fn edge_partials(&self, x: &[f64], _: &ConditionParams, c: &Candidate, out: &mut Vec<(usize, f64)>) {
        let Candidate::Tuple(nodes) = c else { panic!("hyper model given a pairwise candidate") };
        let total: f64 = nodes.iter().map(|&j| x[j]).sum();
        let scale = (self.d + 1) as f64;
        for &i in nodes {
            out.push((i, (total - scale * x[i]).sin()));
        }
    }
}

pub fn kuramoto_rhs(x: &[f64], params: &ConditionParams, net: &PairwiseNetwork) -> Result<Vec<f64>> {
    Kuramoto.rhs(x, params, &Structure::Pairwise(net.clone()))
}

pub fn sakaguchi_rhs(x: &[f64], params: &ConditionParams, net: &PairwiseNetwork) -> Result<Vec<f64>> {
    Sakaguchi { alpha: params.alpha }.rhs(x, params, &Structure::Pairwise(net.clone()))
}

pub fn hyper_kuramoto_rhs(x: &[f64], params: &ConditionParams, structure: &Structure) -> Result<Vec<f64>> {
    let d = match structure {
        Structure::Hyper(h) => h.order(),
        Structure::Pairwise(_) => return Err(invalid("hyper model given a pairwise structure")),
    };
    HyperKuramoto { d }.rhs(x, params, structure)
}

// ---------------------------------------------------------------------------
// Integration

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Classic fixed-step RK4 for `dx/dt = f(x)`.
///
/// Runs `round(t_max / dt)` steps. Every `check_every` steps (and once before
/// the first step) `observer(t, x)` is called; returning `true` stops early.
/// Returns the final state and the time reached.
pub fn integrate_rk4<F, O>(
    mut f: F,
    x0: &[f64],
    dt: f64,
    t_max: f64,
    check_every: usize,
    mut observer: O,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64], &mut [f64]),
    O: FnMut(f64, &[f64]) -> bool,
{
    if !(dt > 0.0) || !(t_max >= dt) {
        return Err(invalid(format!("need dt > 0 and t_max >= dt, got dt = {dt}, t_max = {t_max}")));
    }
    let n = x0.len();
    let steps = (t_max / dt).round() as usize;
    let check_every = check_every.max(1);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];

    if observer(0.0, &x) {
        return Ok((x, 0.0));
    }
    for step in 1..=steps {
        f(&x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        f(&tmp, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite state at t = {}", step as f64 * dt)));
        }
        let t = step as f64 * dt;
        if step % check_every == 0 && observer(t, &x) {
            return Ok((x, t));
        }
    }
    Ok((x, steps as f64 * dt))
}

/// Forward Euler for `dx/dt = f(x)`, `round(t_max / dt)` steps.
pub fn integrate_euler<F>(mut f: F, x0: &[f64], dt: f64, t_max: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(dt > 0.0) || !(t_max >= dt) {
        return Err(invalid(format!("need dt > 0 and t_max >= dt, got dt = {dt}, t_max = {t_max}")));
    }
    let steps = (t_max / dt).round() as usize;
    let mut x = x0.to_vec();
    let mut k = vec![0.0; x.len()];
    for _ in 0..steps {
        f(&x, &mut k);
        for (xi, ki) in x.iter_mut().zip(&k) {
            *xi += dt * ki;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite state".into()));
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionKind {
    /// `1 - r`, with `r` the Kuramoto order parameter.
    #[default]
    Circ,
    /// Sample variance.
    Var,
    /// Mean absolute pairwise difference.
    Mpd,
}

pub fn dispersion(x: &[f64], kind: DispersionKind) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(invalid(format!("dispersion needs at least 2 values, got {n}")));
    }
    let nf = n as f64;
    Ok(match kind {
        DispersionKind::Circ => {
            let (s, c) = x.iter().fold((0.0, 0.0), |(s, c), v| (s + v.sin(), c + v.cos()));
            // clamp rounding so a synchronized state reads exactly 0
            (1.0 - (s * s + c * c).sqrt() / nf).max(0.0)
        }
        DispersionKind::Var => {
            let mean = x.iter().sum::<f64>() / nf;
            x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        }
        DispersionKind::Mpd => {
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    total += (x[i] - x[j]).abs();
                }
            }
            2.0 * total / (nf * (nf - 1.0))
        }
    })
}

/// Settings for locating one steady state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateOptions {
    pub eps_conv: f64,
    pub dt: f64,
    pub t_max: f64,
    pub check_interval: f64,
    pub dispersion: DispersionKind,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self { eps_conv: 1e-6, dt: 0.01, t_max: 500.0, check_interval: 1.0, dispersion: DispersionKind::Circ }
    }
}

impl SteadyStateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_conv > 0.0) {
            return Err(invalid("eps_conv must be positive"));
        }
        if !(self.dt > 0.0) || !(self.t_max >= self.dt) {
            return Err(invalid("need dt > 0 and t_max >= dt"));
        }
        if !(self.check_interval > 0.0) {
            return Err(invalid("check_interval must be positive"));
        }
        Ok(())
    }

    fn check_steps(&self) -> usize {
        ((self.check_interval / self.dt).round() as usize).max(1)
    }
}

pub(crate) fn dispersion_or_zero(x: &[f64], kind: DispersionKind) -> f64 {
    dispersion(x, kind).unwrap_or(0.0)
}

/// Integrates `model` from `x0` until `||dx/dt||_2 < eps_conv` at a check
/// point, or marks the record rejected on timeout or divergence.
pub fn settle(
    model: &dyn DynModel,
    x0: Vec<f64>,
    params: ConditionParams,
    structure: &Structure,
    opts: &SteadyStateOptions,
) -> Result<SteadyStateRecord> {
    opts.validate()?;
    model.check(x0.len(), &params, structure)?;
    let n = x0.len();
    let at_rest = model.locks_at_rest(structure);
    let mut velocity = vec![0.0; n];
    let mut last_norm = f64::INFINITY;
    let mut frame = 0.0;
    let mut converged = false;
    let outcome = integrate_rk4(
        |x, out| model.rhs_into(x, &params, structure, out),
        &x0,
        opts.dt,
        opts.t_max,
        opts.check_steps(),
        |_, x| {
            model.rhs_into(x, &params, structure, &mut velocity);
            if !at_rest {
                frame = velocity.iter().sum::<f64>() / n as f64;
                velocity.iter_mut().for_each(|v| *v -= frame);
            }
            last_norm = l2_norm(&velocity);
            converged = last_norm < opts.eps_conv;
            converged
        },
    );
    let mut params = params;
    let rec = match outcome {
        Ok((x, _)) => {
            if converged {
                params.frame += frame;
            }
            let dispersion = dispersion_or_zero(&x, opts.dispersion);
            SteadyStateRecord {
                x,
                params,
                residual_norm: last_norm,
                dispersion,
                accepted: converged,
                reason: (!converged).then_some(RejectReason::Timeout),
            }
        }
        Err(Error::Divergence(_)) => SteadyStateRecord {
            x: x0,
            params,
            residual_norm: f64::INFINITY,
            dispersion: 0.0,
            accepted: false,
            reason: Some(RejectReason::Diverged),
        },
        Err(e) => return Err(e),
    };
    Ok(rec)
}

/// Uniform random phases on `[0, 2π)`.
pub fn random_phases(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * TAU).collect()
}

/// Draws initial phases from `rng` and settles from there.
pub fn find_steady_state(
    model: &dyn DynModel,
    params: ConditionParams,
    structure: &Structure,
    opts: &SteadyStateOptions,
    rng: &mut Rng,
) -> Result<SteadyStateRecord> {
    let x0 = random_phases(structure.n(), rng);
    settle(model, x0, params, structure, opts)
}

/// Natural-frequency distribution for fresh trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OmegaSampler {
    /// Uniform on `[-half_width, half_width]`, then shifted to zero mean.
    UniformCentered { half_width: f64 },
}

impl Default for OmegaSampler {
    fn default() -> Self {
        OmegaSampler::UniformCentered { half_width: 1.0 }
    }
}

impl OmegaSampler {
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match *self {
            OmegaSampler::UniformCentered { half_width } => {
                let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-half_width..=half_width)).collect();
                center(&mut w);
                w
            }
        }
    }
}

pub(crate) fn center(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// How each trial reaches its (quasi-)steady state.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum TrialIntegrator {
    #[default]
    Rk4,
    /// Euler–Maruyama with additive noise, see [`crate::noise::integrate_with_dyn_noise`].
    Noisy { sigma_dyn: f64, avg_fraction: f64 },
}

/// Everything `collect_dataset` needs besides the model and structure.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectOptions {
    pub steady: SteadyStateOptions,
    pub eps_sync: f64,
    pub omega: OmegaSampler,
    pub integrator: TrialIntegrator,
    /// Trial cap; `None` means `20 * m_target`.
    pub max_attempts: Option<usize>,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            steady: SteadyStateOptions::default(),
            eps_sync: 1e-3,
            omega: OmegaSampler::default(),
            integrator: TrialIntegrator::Rk4,
            max_attempts: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CollectStats {
    pub attempts: usize,
    pub accepted: usize,
    pub timeouts: usize,
    pub diverged: usize,
    pub synchronized: usize,
}

/// Accepted records in trial order plus rejection counts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SteadyStateRecord>,
    pub stats: CollectStats,
}

impl Dataset {
    pub fn is_complete(&self, m_target: usize) -> bool {
        self.records.len() >= m_target
    }
}

/// Incremental steady-state collection.
///
/// Trial `t` is seeded from `derive(seed, t)`, so the accepted records are the
/// same whether trials run serially, in parallel, or across several
/// [`Collector::extend_to`] calls.
pub struct Collector<'a> {
    model: &'a dyn DynModel,
    structure: &'a Structure,
    opts: CollectOptions,
    seed: u64,
    next_trial: u64,
    records: Vec<SteadyStateRecord>,
    stats: CollectStats,
}

impl<'a> Collector<'a> {
    pub fn new(model: &'a dyn DynModel, structure: &'a Structure, opts: CollectOptions, seed: u64) -> Result<Self> {
        opts.steady.validate()?;
        if opts.eps_sync.is_nan() {
            return Err(invalid("eps_sync must not be NaN"));
        }
        let n = structure.n();
        model.check(n, &ConditionParams { omega: vec![0.0; n], alpha: 0.0, frame: 0.0, trial_id: 0 }, structure)?;
        Ok(Self {
            model,
            structure,
            opts,
            seed,
            next_trial: 0,
            records: Vec::new(),
            stats: CollectStats::default(),
        })
    }

    pub fn records(&self) -> &[SteadyStateRecord] {
        &self.records
    }

    pub fn stats(&self) -> &CollectStats {
        &self.stats
    }

    fn run_trial(&self, trial: u64) -> Result<SteadyStateRecord> {
        let mut rng = seed::rng(seed::derive(self.seed, trial));
        let n = self.structure.n();
        let params =
            ConditionParams { omega: self.opts.omega.sample(n, &mut rng), alpha: self.model.phase_lag(), frame: 0.0, trial_id: trial };
        let mut rec = match self.opts.integrator {
            TrialIntegrator::Rk4 => find_steady_state(self.model, params, self.structure, &self.opts.steady, &mut rng)?,
            TrialIntegrator::Noisy { sigma_dyn, avg_fraction } => {
                let x0 = random_phases(n, &mut rng);
                crate::noise::integrate_with_dyn_noise(
                    self.model,
                    x0,
                    params,
                    self.structure,
                    &crate::noise::DynNoiseOptions {
                        sigma_dyn,
                        dt: self.opts.steady.dt,
                        t_max: self.opts.steady.t_max,
                        avg_fraction,
                        eps_conv: self.opts.steady.eps_conv,
                        dispersion: self.opts.steady.dispersion,
                    },
                    &mut rng,
                )?
            }
        };
        if rec.accepted && !(rec.dispersion > self.opts.eps_sync) {
            rec.accepted = false;
            rec.reason = Some(RejectReason::Synchronized);
        }
        Ok(rec)
    }

    /// Runs trials until `m_target` records are accepted or `max_attempts`
    /// trials have been used in total.
    pub fn extend_to(&mut self, m_target: usize, max_attempts: usize) -> Result<()> {
        while self.records.len() < m_target && (self.next_trial as usize) < max_attempts {
            let need = m_target - self.records.len();
            // batch size depends only on progress, never on the worker count
            let batch = need.max(8).min(max_attempts - self.next_trial as usize) as u64;
            let start = self.next_trial;
            let results: Vec<Result<SteadyStateRecord>> =
                (start..start + batch).into_par_iter().map(|t| self.run_trial(t)).collect();
            for rec in results {
                let rec = rec?;
                self.next_trial += 1;
                self.stats.attempts += 1;
                match rec.reason {
                    None => {
                        self.stats.accepted += 1;
                        self.records.push(rec);
                    }
                    Some(RejectReason::Timeout) => self.stats.timeouts += 1,
                    Some(RejectReason::Diverged) => self.stats.diverged += 1,
                    Some(RejectReason::Synchronized) => self.stats.synchronized += 1,
                }
                if self.records.len() >= m_target {
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn into_dataset(self) -> Dataset {
        Dataset { records: self.records, stats: self.stats }
    }
}

/// Collects up to `m_target` accepted, non-degenerate steady states. A short
/// dataset is returned as-is; callers check [`Dataset::is_complete`].
pub fn collect_dataset(
    model: &dyn DynModel,
    structure: &Structure,
    m_target: usize,
    opts: &CollectOptions,
    seed: u64,
) -> Result<Dataset> {
    if m_target == 0 {
        return Err(invalid("m_target must be at least 1"));
    }
    let max_attempts = opts.max_attempts.unwrap_or(20 * m_target);
    let mut c = Collector::new(model, structure, opts.clone(), seed)?;
    c.extend_to(m_target, max_attempts)?;
    let ds = c.into_dataset();
    if !ds.is_complete(m_target) {
        log::warn!(
            "collected {} of {} steady states after {} attempts",
            ds.records.len(),
            m_target,
            ds.stats.attempts
        );
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Serialize, Deserialize)]
struct RecordLine {
    trial_id: u64,
    omega: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    alpha: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    frame: f64,
    x: Vec<f64>,
    residual_norm: f64,
    dispersion: f64,
    accepted: bool,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// One JSON object per line.
pub fn write_dataset(records: &[SteadyStateRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = RecordLine {
            trial_id: r.params.trial_id,
            omega: r.params.omega.clone(),
            alpha: r.params.alpha,
            frame: r.params.frame,
            x: r.x.clone(),
            residual_norm: r.residual_norm,
            dispersion: r.dispersion,
            accepted: r.accepted,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_dataset(text: &str) -> Result<Vec<SteadyStateRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RecordLine =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if r.x.len() != r.omega.len() {
            return Err(Error::Parse { line: i + 1, msg: "x and omega lengths differ".into() });
        }
        if let Some(first) = out.first().map(|f: &SteadyStateRecord| f.x.len()) {
            if first != r.x.len() {
                return Err(Error::Parse { line: i + 1, msg: "records disagree on node count".into() });
            }
        }
        out.push(SteadyStateRecord {
            x: r.x,
            params: ConditionParams { omega: r.omega, alpha: r.alpha, frame: r.frame, trial_id: r.trial_id },
            residual_norm: r.residual_norm,
            dispersion: r.dispersion,
            accepted: r.accepted,
            reason: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{gen_er, gen_simplex, Directedness, HyperNetwork};
    use crate::seed::rng;
    use std::f64::consts::PI;

    fn params(omega: Vec<f64>) -> ConditionParams {
        ConditionParams { omega, alpha: 0.0, frame: 0.0, trial_id: 0 }
    }

    fn pair(n: usize) -> PairwiseNetwork {
        let mut net = PairwiseNetwork::empty(n, Directedness::Undirected);
        net.set(0, 1, 1.0);
        net
    }

    #[test]
    fn kuramoto_fixed_points() {
        let net = pair(2);
        let v = kuramoto_rhs(&[0.0, 0.0], &params(vec![0.0, 0.0]), &net).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        // 0.5 = sin(x2 - x1) locks omega = (0.5, -0.5)
        let delta = 0.5f64.asin();
        assert!((delta - PI / 6.0).abs() < 1e-15);
        let v = kuramoto_rhs(&[0.0, delta], &params(vec![-0.5, 0.5]), &net).unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-15), "{v:?}");
        let v = kuramoto_rhs(&[delta, 0.0], &params(vec![0.5, -0.5]), &net).unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-15), "{v:?}");
    }

    #[test]
    fn decoupled_rhs_is_omega() {
        let omega = vec![0.3, -0.1, -0.2];
        let empty = PairwiseNetwork::empty(3, Directedness::Directed);
        let x = [1.0, 2.0, 4.0];
        assert_eq!(kuramoto_rhs(&x, &params(omega.clone()), &empty).unwrap(), omega);
        let mut p = params(omega.clone());
        p.alpha = 0.7;
        assert_eq!(sakaguchi_rhs(&x, &p, &empty).unwrap(), omega);
        let h = Structure::Hyper(HyperNetwork::empty(3, 2).unwrap());
        assert_eq!(hyper_kuramoto_rhs(&x, &p, &h).unwrap(), omega);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = pair(2);
        assert!(kuramoto_rhs(&[0.0, 0.0, 0.0], &params(vec![0.0; 3]), &net).is_err());
        assert!(kuramoto_rhs(&[0.0, 0.0], &params(vec![0.0; 3]), &net).is_err());
        let h = Structure::Hyper(HyperNetwork::empty(3, 2).unwrap());
        assert!(HyperKuramoto { d: 3 }.rhs(&[0.0; 3], &params(vec![0.0; 3]), &h).is_err());
        assert!(Kuramoto.rhs(&[0.0; 3], &params(vec![0.0; 3]), &h).is_err());
    }

    #[test]
    fn sakaguchi_reduces_to_kuramoto_bitwise() {
        let mut r = rng(11);
        for _ in 0..100 {
            let n = r.random_range(2..10);
            let net = gen_er(n, 0.5, Directedness::Directed, &mut r).unwrap();
            let x = random_phases(n, &mut r);
            let p = params(OmegaSampler::default().sample(n, &mut r));
            let a = kuramoto_rhs(&x, &p, &net).unwrap();
            let b = sakaguchi_rhs(&x, &p, &net).unwrap();
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn sakaguchi_hand_value() {
        let mut p = params(vec![0.0, 0.0]);
        p.alpha = 0.3;
        let v = sakaguchi_rhs(&[0.0, 0.0], &p, &pair(2)).unwrap();
        let expect = -(0.3f64.sin());
        assert!((v[0] - expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn hyper_hand_values() {
        let mut h = HyperNetwork::empty(3, 2).unwrap();
        h.insert(vec![0, 1, 2], 1.0).unwrap();
        let s = Structure::Hyper(h);
        let z = hyper_kuramoto_rhs(&[0.0; 3], &params(vec![0.0; 3]), &s).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let x = [0.0, PI / 2.0, -PI / 2.0];
        let v = hyper_kuramoto_rhs(&x, &params(vec![0.0; 3]), &s).unwrap();
        // node 0: sin(pi/2 - pi/2 - 0) = 0
        // node 1: sin(0 - pi/2 - pi) = sin(-3pi/2) = 1
        // node 2: sin(0 + pi/2 + pi) = sin(3pi/2) = -1
        assert!(v[0].abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!((v[2] + 1.0).abs() < 1e-15);
    }

    fn random_case(r: &mut Rng, n: usize) -> (Vec<f64>, ConditionParams) {
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let mut p = params(OmegaSampler::default().sample(n, r));
        p.alpha = r.random_range(-1.0..1.0);
        (x, p)
    }

    #[test]
    fn rotational_symmetry() {
        let mut r = rng(21);
        for _ in 0..50 {
            let n = 7;
            let net = Structure::Pairwise(gen_er(n, 0.5, Directedness::Directed, &mut r).unwrap());
            let hyp = Structure::Hyper(gen_simplex(n, 2, 0.5, &mut r).unwrap());
            let (x, p) = random_case(&mut r, n);
            let c = r.random_range(-5.0..5.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let models: [(&dyn DynModel, &Structure); 3] =
                [(&Kuramoto, &net), (&Sakaguchi { alpha: p.alpha }, &net), (&HyperKuramoto { d: 2 }, &hyp)];
            for (m, s) in models {
                let a = m.rhs(&x, &p, s).unwrap();
                let b = m.rhs(&shifted, &p, s).unwrap();
                let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "{} diff {diff}", m.name());
            }
        }
    }

    #[test]
    fn edge_partials_match_finite_differences() {
        use crate::networks::{candidate_weight, candidates, CandidateKind};
        let mut r = rng(31);
        let h = 1e-5;
        for case in 0..100 {
            let n = 6;
            let (x, p) = random_case(&mut r, n);
            let (model, kind, base): (Box<dyn DynModel>, CandidateKind, Structure) = match case % 4 {
                0 => (Box::new(Kuramoto), CandidateKind::Unordered, {
                    let mut s = gen_er(n, 0.5, Directedness::Undirected, &mut r).unwrap();
                    s.set(0, 1, 0.3);
                    Structure::Pairwise(s)
                }),
                1 => (
                    Box::new(Sakaguchi { alpha: p.alpha }),
                    CandidateKind::Ordered,
                    Structure::Pairwise(gen_er(n, 0.5, Directedness::Directed, &mut r).unwrap()),
                ),
                2 => (
                    Box::new(Sakaguchi { alpha: p.alpha }),
                    CandidateKind::Unordered,
                    Structure::Pairwise(gen_er(n, 0.5, Directedness::Undirected, &mut r).unwrap()),
                ),
                _ => (
                    Box::new(HyperKuramoto { d: 2 }),
                    CandidateKind::Tuples { d: 2 },
                    Structure::Hyper(gen_simplex(n, 2, 0.5, &mut r).unwrap()),
                ),
            };
            let cands = candidates(kind, n);
            let c = &cands[r.random_range(0..cands.len())];
            let w0 = candidate_weight(&base, c);
            let perturbed = |dw: f64| {
                let mut s = base.clone();
                match (&mut s, c) {
                    (Structure::Pairwise(net), Candidate::Unordered(i, j)) => net.set(*i, *j, w0 + dw),
                    (Structure::Pairwise(net), Candidate::Ordered { target, source }) => {
                        net.set(*target, *source, w0 + dw)
                    }
                    (Structure::Hyper(hn), Candidate::Tuple(t)) => hn.insert(t.clone(), w0 + dw).unwrap(),
                    _ => unreachable!(),
                }
                model.rhs(&x, &p, &s).unwrap()
            };
            let (up, down) = (perturbed(h), perturbed(-h));
            let mut partials = Vec::new();
            model.edge_partials(&x, &p, c, &mut partials);
            let mut analytic = vec![0.0; n];
            for (i, v) in partials {
                analytic[i] += v;
            }
            for i in 0..n {
                let fd = (up[i] - down[i]) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3);
                assert!(err < 1e-6, "{} node {i}: fd {fd} analytic {}", model.name(), analytic[i]);
            }
        }
    }

    #[test]
    fn rk4_exponential_decay() {
        let (x, t) = integrate_rk4(|x, o| o[0] = -x[0], &[1.0], 0.01, 1.0, 1, |_, _| false).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!((x[0] - (-1f64).exp()).abs() < 1e-8, "{}", x[0]);
        assert!((x[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn rk4_still_system_is_exact() {
        let x0 = [0.25, -3.5, 1e3];
        let (x, _) = integrate_rk4(|_, o| o.fill(0.0), &x0, 0.01, 2.0, 10, |_, _| false).unwrap();
        assert_eq!(x, x0.to_vec());
    }

    #[test]
    fn rk4_fourth_order() {
        let err = |dt: f64| {
            let (x, _) = integrate_rk4(|x, o| o[0] = -x[0], &[1.0], dt, 1.0, 1, |_, _| false).unwrap();
            (x[0] - (-1f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_rejects_bad_steps_and_divergence() {
        assert!(integrate_rk4(|_, o| o.fill(0.0), &[0.0], 0.0, 1.0, 1, |_, _| false).is_err());
        assert!(integrate_rk4(|_, o| o.fill(0.0), &[0.0], 0.1, 0.01, 1, |_, _| false).is_err());
        let r = integrate_rk4(|x, o| o[0] = x[0] * x[0], &[10.0], 0.1, 10.0, 1, |_, _| false);
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn two_node_lock() {
        let s = Structure::Pairwise(pair(2));
        let opts = SteadyStateOptions::default();
        for seed in 0..5 {
            let rec = find_steady_state(&Kuramoto, params(vec![0.5, -0.5]), &s, &opts, &mut rng(seed)).unwrap();
            assert!(rec.accepted);
            assert!(rec.residual_norm < 1e-6);
            assert!(((rec.x[0] - rec.x[1]).sin() - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn no_lock_times_out() {
        let s = Structure::Pairwise(pair(2));
        let opts = SteadyStateOptions { t_max: 50.0, ..Default::default() };
        let rec = find_steady_state(&Kuramoto, params(vec![5.0, -5.0]), &s, &opts, &mut rng(1)).unwrap();
        assert!(!rec.accepted);
        assert_eq!(rec.reason, Some(RejectReason::Timeout));
    }

    #[test]
    fn single_node_accepts_immediately() {
        let s = Structure::Pairwise(PairwiseNetwork::empty(1, Directedness::Undirected));
        let rec =
            find_steady_state(&Kuramoto, params(vec![0.0]), &s, &SteadyStateOptions::default(), &mut rng(0)).unwrap();
        assert!(rec.accepted);
        assert_eq!(rec.residual_norm, 0.0);
    }

    #[test]
    fn dispersion_cases() {
        for kind in [DispersionKind::Circ, DispersionKind::Var, DispersionKind::Mpd] {
            assert_eq!(dispersion(&[1.3; 5], kind).unwrap(), 0.0);
            assert!(dispersion(&[1.0], kind).is_err());
        }
        let ring: Vec<f64> = (0..7).map(|k| TAU * k as f64 / 7.0).collect();
        assert!((dispersion(&ring, DispersionKind::Circ).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(dispersion(&[0.0, 1.0], DispersionKind::Mpd).unwrap(), 1.0);
        assert_eq!(dispersion(&[0.0, 2.0], DispersionKind::Var).unwrap(), 2.0);
        // synchronized up to a full turn
        assert!(dispersion(&[0.4, 0.4 + TAU, 0.4 - TAU], DispersionKind::Circ).unwrap() < 1e-12);
    }

    #[test]
    fn empty_network_never_locks() {
        let s = Structure::Pairwise(PairwiseNetwork::empty(4, Directedness::Undirected));
        let opts = CollectOptions {
            steady: SteadyStateOptions { t_max: 5.0, ..Default::default() },
            max_attempts: Some(10),
            ..Default::default()
        };
        let ds = collect_dataset(&Kuramoto, &s, 3, &opts, 7).unwrap();
        assert!(ds.records.is_empty());
        assert_eq!(ds.stats.timeouts, 10);
    }

    #[test]
    fn complete_graph_dataset() {
        let mut net = PairwiseNetwork::empty(8, Directedness::Undirected);
        for i in 0..8 {
            for j in (i + 1)..8 {
                net.set(i, j, 1.0);
            }
        }
        let s = Structure::Pairwise(net);
        let opts = CollectOptions::default();
        let ds = collect_dataset(&Kuramoto, &s, 10, &opts, 3).unwrap();
        assert_eq!(ds.records.len(), 10);
        for r in &ds.records {
            assert!(r.accepted && r.residual_norm < 1e-6 && r.dispersion > 1e-3);
            let re = Kuramoto.rhs(&r.x, &r.params, &s).unwrap();
            assert!(l2_norm(&re) < 1e-6);
            assert!(r.params.omega.iter().sum::<f64>().abs() < 1e-12);
        }
        let again = collect_dataset(&Kuramoto, &s, 10, &opts, 3).unwrap();
        assert_eq!(ds.records, again.records);

        let strict = CollectOptions { eps_sync: f64::INFINITY, max_attempts: Some(5), ..Default::default() };
        let none = collect_dataset(&Kuramoto, &s, 3, &strict, 3).unwrap();
        assert!(none.records.is_empty());
        assert_eq!(none.stats.synchronized, 5);
    }

    #[test]
    fn synchronized_states_are_filtered() {
        // identical oscillators on a complete graph synchronize fully
        let mut net = PairwiseNetwork::empty(5, Directedness::Undirected);
        for i in 0..5 {
            for j in (i + 1)..5 {
                net.set(i, j, 1.0);
            }
        }
        let s = Structure::Pairwise(net);
        let rec =
            settle(&Kuramoto, vec![0.1, 0.2, 0.3, 0.15, 0.25], params(vec![0.0; 5]), &s, &SteadyStateOptions::default())
                .unwrap();
        assert!(rec.accepted);
        assert!(rec.dispersion < 1e-12);
    }

    #[test]
    fn collection_is_batch_invariant() {
        let net = gen_er(10, 0.6, Directedness::Undirected, &mut rng(4)).unwrap();
        let s = Structure::Pairwise(net);
        let opts = CollectOptions::default();
        let mut c = Collector::new(&Kuramoto, &s, opts.clone(), 99).unwrap();
        c.extend_to(3, 100).unwrap();
        c.extend_to(12, 300).unwrap();
        let direct = collect_dataset(&Kuramoto, &s, 12, &CollectOptions { max_attempts: Some(300), ..opts }, 99).unwrap();
        assert_eq!(c.records(), &direct.records[..]);
    }

    #[test]
    fn dataset_lines_round_trip() {
        let rec = SteadyStateRecord {
            x: vec![0.1, 1.0 / 3.0],
            params: ConditionParams { omega: vec![0.5, -0.5], alpha: 0.0, frame: 0.0, trial_id: 4 },
            residual_norm: 1e-7,
            dispersion: 0.01,
            accepted: true,
            reason: None,
        };
        let text = write_dataset(&[rec.clone()]).unwrap();
        assert_eq!(
            text,
            "{\"trial_id\":4,\"omega\":[0.5,-0.5],\"x\":[0.1,0.3333333333333333],\"residual_norm\":1e-7,\"dispersion\":0.01,\"accepted\":true}\n"
        );
        assert_eq!(read_dataset(&text).unwrap(), vec![rec]);
        assert!(matches!(read_dataset("{}\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rotating_locks_are_observed_in_their_frame() {
        let directed = Structure::Pairwise(gen_er(12, 0.5, Directedness::Directed, &mut rng(2)).unwrap());
        let undirected = Structure::Pairwise(gen_er(12, 0.5, Directedness::Undirected, &mut rng(2)).unwrap());
        let simplex = Structure::Hyper(gen_simplex(7, 2, 0.5, &mut rng(2)).unwrap());
        let sak = Sakaguchi::default();
        let hyp = HyperKuramoto { d: 2 };
        let cases: [(&dyn DynModel, &Structure); 3] = [(&Kuramoto, &directed), (&sak, &undirected), (&hyp, &simplex)];
        for (model, s) in cases {
            assert!(!model.locks_at_rest(s));
            let ds = collect_dataset(model, s, 6, &CollectOptions::default(), 8).unwrap();
            assert_eq!(ds.records.len(), 6, "{}", model.name());
            for r in &ds.records {
                assert!(r.params.frame != 0.0);
                assert!(r.params.omega.iter().sum::<f64>().abs() < 1e-12);
                assert!(l2_norm(&model.rhs(&r.x, &r.params, s).unwrap()) < 1e-6);
            }
            let text = write_dataset(&ds.records).unwrap();
            assert!(text.contains("\"frame\""));
            assert_eq!(read_dataset(&text).unwrap(), ds.records);
        }
        assert!(Kuramoto.locks_at_rest(&undirected));
        let ds = collect_dataset(&Kuramoto, &undirected, 4, &CollectOptions::default(), 8).unwrap();
        assert!(ds.records.iter().all(|r| r.params.frame == 0.0));
    }

    #[test]
    fn frame_shifts_every_node_equally() {
        let s = Structure::Pairwise(pair(3));
        let mut p = params(vec![0.2, -0.1, -0.1]);
        let x = [0.3, 1.1, -0.4];
        let base = Kuramoto.rhs(&x, &p, &s).unwrap();
        p.frame = 0.25;
        let shifted = Kuramoto.rhs(&x, &p, &s).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b - 0.25).abs() < 1e-15);
        }
    }
}
