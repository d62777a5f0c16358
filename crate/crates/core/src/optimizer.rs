//! Diagonal-Fisher natural gradient and Adam, plus the training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ansatz::VariationalAnsatz;
use crate::error::{invalid, Error, Result};
use crate::loss::{BatchPolicy, ResidualSystem};
use crate::seed::rng;

/// Iterations between full-loss evaluations.
pub const TRACE_INTERVAL: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// Step size is `eta / |g|` away from zero gradient, so a usable `eta`
    /// depends on the loss scale of the problem.
    Natural,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub rule: UpdateRule,
    pub eta: f64,
    pub eps_fisher: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_rtol: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::Adam,
            eta: 5e-3,
            eps_fisher: 1e-6,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            max_iters: 20_000,
            plateau_window: 200,
            plateau_rtol: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.eps_fisher > 0.0 && self.eps_fisher.is_finite()) {
            return Err(invalid(format!("eps_fisher must be positive, got {}", self.eps_fisher)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid(format!("adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.adam_eps > 0.0) {
            return Err(invalid("adam_eps must be positive"));
        }
        if self.plateau_window == 0 || !(self.plateau_rtol >= 0.0) {
            return Err(invalid("plateau window must be positive and plateau_rtol non-negative"));
        }
        Ok(())
    }
}

fn check_grad(theta: &[f64], g: &[f64]) -> Result<()> {
    if theta.len() != g.len() {
        return Err(invalid(format!("theta has {} entries, gradient {}", theta.len(), g.len())));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite gradient at parameter {i}")));
    }
    Ok(())
}

/// `theta_e -= eta * g_e / (eps_fisher + g_e^2)`.
pub fn natural_step(theta: &mut [f64], g: &[f64], eta: f64, eps_fisher: f64) -> Result<()> {
    check_grad(theta, g)?;
    for (t, &ge) in theta.iter_mut().zip(g) {
        *t -= eta * ge / (eps_fisher + ge * ge);
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], g: &[f64], cfg: &OptimConfig) -> Result<()> {
    check_grad(theta, g)?;
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(invalid("adam state does not match parameter count"));
    }
    let (b1, b2) = cfg.adam_betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for e in 0..theta.len() {
        state.m[e] = b1 * state.m[e] + (1.0 - b1) * g[e];
        state.v[e] = b2 * state.v[e] + (1.0 - b2) * g[e] * g[e];
        let m_hat = state.m[e] / c1;
        let v_hat = state.v[e] / c2;
        theta[e] -= cfg.eta * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Plateau,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub sampled_loss: f64,
    pub full_loss: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub iterations: usize,
    pub stop: StopReason,
    pub final_full_loss: f64,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,sampled_loss,full_loss,grad_norm\n");
        for r in &self.rows {
            let full = r.full_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{},{:e}", r.iter, r.sampled_loss, full, r.grad_norm);
        }
        s
    }
}

/// Result of [`train`]; on divergence `error` is set and `ansatz` is the
/// checkpoint with the lowest full loss seen.
#[derive(Debug)]
pub struct TrainOutcome {
    pub ansatz: VariationalAnsatz,
    pub trace: TrainTrace,
    pub error: Option<Error>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(VariationalAnsatz, TrainTrace)> {
        match self.error {
            Some(e) => Err(e),
            None => Ok((self.ansatz, self.trace)),
        }
    }
}

/// Runs the update rule until `max_iters` or until the full loss, sampled
/// every [`TRACE_INTERVAL`] iterations, changes by less than `plateau_rtol`
/// (relative) over `plateau_window` iterations.
pub fn train(
    system: &ResidualSystem,
    ansatz: VariationalAnsatz,
    cfg: &OptimConfig,
    policy: BatchPolicy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ansatz.len() != system.param_count() {
        return Err(invalid(format!(
            "ansatz has {} parameters, residual system expects {}",
            ansatz.len(),
            system.param_count()
        )));
    }
    let mut rng = rng(cfg.seed);
    let mut a = ansatz;
    let mut adam = AdamState::new(a.len());
    let mut rows = Vec::with_capacity(cfg.max_iters.min(1 << 16));
    let mut history: Vec<(usize, f64)> = Vec::new();
    let mut best = (system.full_loss(&a.estimates()), a.clone());
    let lag = cfg.plateau_window.div_ceil(TRACE_INTERVAL).max(1);

    let diverged = |rows: Vec<TraceRow>, it: usize, best: (f64, VariationalAnsatz), msg: String| {
        Ok(TrainOutcome {
            ansatz: best.1,
            trace: TrainTrace { rows, iterations: it, stop: StopReason::Diverged, final_full_loss: best.0 },
            error: Some(Error::Divergence(msg)),
        })
    };
    if !best.0.is_finite() {
        return diverged(rows, 0, best, "initial loss is not finite".into());
    }

    for it in 1..=cfg.max_iters {
        let batch = policy.draw(system, &mut rng)?;
        let (loss, g) = system.loss_and_gradient(&a, &batch)?;
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            rows.push(TraceRow { iter: it, sampled_loss: loss, full_loss: None, grad_norm });
            return diverged(rows, it, best, format!("loss became non-finite at iteration {it}"));
        }
        match cfg.rule {
            UpdateRule::Natural => natural_step(&mut a.theta, &g, cfg.eta, cfg.eps_fisher)?,
            UpdateRule::Adam => adam_step(&mut adam, &mut a.theta, &g, cfg)?,
        }
        if a.theta.iter().any(|t| !t.is_finite()) {
            rows.push(TraceRow { iter: it, sampled_loss: loss, full_loss: None, grad_norm });
            return diverged(rows, it, best, format!("parameters became non-finite at iteration {it}"));
        }

        let traced = it % TRACE_INTERVAL == 0 || it == cfg.max_iters;
        let full = traced.then(|| system.full_loss(&a.estimates()));
        rows.push(TraceRow { iter: it, sampled_loss: loss, full_loss: full, grad_norm });
        let Some(full) = full else { continue };
        if !full.is_finite() {
            return diverged(rows, it, best, format!("full loss became non-finite at iteration {it}"));
        }
        if full < best.0 {
            best = (full, a.clone());
        }
        history.push((it, full));
        if history.len() > lag {
            let (_, prev) = history[history.len() - 1 - lag];
            let rel = (prev - full).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.plateau_rtol || full == 0.0 {
                let trace = TrainTrace { rows, iterations: it, stop: StopReason::Plateau, final_full_loss: full };
                return Ok(TrainOutcome { ansatz: a, trace, error: None });
            }
        }
    }
    let final_full_loss = history.last().map(|h| h.1).unwrap_or(best.0);
    let trace = TrainTrace { rows, iterations: cfg.max_iters, stop: StopReason::MaxIters, final_full_loss };
    Ok(TrainOutcome { ansatz: a, trace, error: None })
}
