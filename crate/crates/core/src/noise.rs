//! Observation, dynamical and structural noise injectors.
//!
//! Every injector takes its input by reference and returns a perturbed copy.

use std::f64::consts::{PI, TAU};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{dispersion_or_zero, l2_norm, ConditionParams, DispersionKind, DynModel, RejectReason, SteadyStateRecord};
use crate::error::{invalid, Result};
use crate::networks::{Directedness, Structure};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Observation,
    Dynamical,
    Structural,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("noise level must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation, `median(|v - median(v)|)`.
pub fn mad(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("MAD of an empty list"));
    }
    let mut v = values.to_vec();
    let med = median_in_place(&mut v);
    v.iter_mut().for_each(|x| *x = (*x - med).abs());
    Ok(median_in_place(&mut v))
}

/// Wraps an angle into `(-pi, pi]`.
fn wrap(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Spread of a phase dataset: the MAD of every entry's wrapped deviation
/// from the circular mean of its own state, pooled over the dataset.
///
/// A steady state is only defined up to a common rotation and up to `2 pi`
/// per entry, so raw entries carry an arbitrary offset per state; the
/// deviations do not.
pub fn phase_mad(records: &[SteadyStateRecord]) -> Result<f64> {
    let mut dev = Vec::with_capacity(records.iter().map(|r| r.x.len()).sum());
    for r in records {
        let (s, c) = r.x.iter().fold((0.0, 0.0), |(s, c), v| (s + v.sin(), c + v.cos()));
        let center = s.atan2(c);
        dev.extend(r.x.iter().map(|v| wrap(v - center)));
    }
    mad(&dev)
}

/// Adds `sigma_obs * MAD * xi` to every state entry, with the MAD from
/// [`phase_mad`]. A degenerate MAD (< 1e-12) falls back to an absolute
/// scale of `sigma_obs`.
pub fn apply_observation_noise(
    records: &[SteadyStateRecord],
    sigma_obs: f64,
    rng: &mut Rng,
) -> Result<Vec<SteadyStateRecord>> {
    if !(sigma_obs >= 0.0) {
        return Err(invalid("sigma_obs must be >= 0"));
    }
    if sigma_obs == 0.0 || records.is_empty() {
        return Ok(records.to_vec());
    }
    let scale = phase_mad(records)?;
    let amp = if scale < 1e-12 { sigma_obs } else { sigma_obs * scale };
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.x.iter_mut().for_each(|x| *x += amp * gauss(rng));
            r
        })
        .collect())
}

/// Perturbs every existing coupling by `sigma_str * xi`, clamping at zero.
/// Undirected pairs share one draw.
pub fn apply_structural_noise(structure: &Structure, sigma_str: f64, rng: &mut Rng) -> Result<Structure> {
    if !(sigma_str >= 0.0) {
        return Err(invalid("sigma_str must be >= 0"));
    }
    if sigma_str == 0.0 {
        return Ok(structure.clone());
    }
    Ok(match structure {
        Structure::Pairwise(net) => {
            let mut out = net.clone();
            for (s, t, w) in net.edges().collect::<Vec<_>>() {
                out.set(t, s, (w + sigma_str * gauss(rng)).max(0.0));
            }
            debug_assert!(net.mode() == Directedness::Directed || out.validate().is_ok());
            Structure::Pairwise(out)
        }
        Structure::Hyper(h) => {
            let mut out = h.clone();
            for (_, w) in out.iter_mut() {
                if *w != 0.0 {
                    *w = (*w + sigma_str * gauss(rng)).max(0.0);
                }
            }
            Structure::Hyper(out)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynNoiseOptions {
    pub sigma_dyn: f64,
    pub dt: f64,
    pub t_max: f64,
    /// Trailing fraction of the horizon that is time-averaged.
    pub avg_fraction: f64,
    pub eps_conv: f64,
    pub dispersion: DispersionKind,
}

impl DynNoiseOptions {
    /// Acceptance threshold on `||F(x_avg)||_2`.
    pub fn threshold(&self) -> f64 {
        self.eps_conv.max(3.0 * self.sigma_dyn)
    }
}

/// Runs Euler–Maruyama `x += dt F(x) + sigma_dyn sqrt(dt) xi` for the full
/// horizon and returns the state averaged over the trailing window.
///
/// The record is accepted when `||F(x_avg)||_2` falls below
/// `max(eps_conv, 3 sigma_dyn)`.
pub fn integrate_with_dyn_noise(
    model: &dyn DynModel,
    x0: Vec<f64>,
    params: ConditionParams,
    structure: &Structure,
    opts: &DynNoiseOptions,
    rng: &mut Rng,
) -> Result<SteadyStateRecord> {
    if !(opts.sigma_dyn >= 0.0) || !(opts.dt > 0.0) || !(opts.t_max >= opts.dt) {
        return Err(invalid("need sigma_dyn >= 0, dt > 0 and t_max >= dt"));
    }
    if !(opts.avg_fraction > 0.0 && opts.avg_fraction <= 1.0) {
        return Err(invalid("avg_fraction must lie in (0, 1]"));
    }
    model.check(x0.len(), &params, structure)?;
    let n = x0.len();
    let steps = (opts.t_max / opts.dt).round() as usize;
    let window = ((steps as f64 * opts.avg_fraction).round() as usize).clamp(1, steps);
    let kick = opts.sigma_dyn * opts.dt.sqrt();

    let at_rest = model.locks_at_rest(structure);
    let mut x = x0.clone();
    let mut f = vec![0.0; n];
    let mut avg = vec![0.0; n];
    let mut window_start = if window == steps { x0.clone() } else { Vec::new() };
    for step in 1..=steps {
        model.rhs_into(&x, &params, structure, &mut f);
        for i in 0..n {
            x[i] += opts.dt * f[i];
            if kick != 0.0 {
                x[i] += kick * gauss(rng);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(SteadyStateRecord {
                x: x0,
                params,
                residual_norm: f64::INFINITY,
                dispersion: 0.0,
                accepted: false,
                reason: Some(RejectReason::Diverged),
            });
        }
        if step == steps - window {
            window_start = x.clone();
        }
        if step > steps - window {
            avg.iter_mut().zip(&x).for_each(|(a, v)| *a += v);
        }
    }
    avg.iter_mut().for_each(|a| *a /= window as f64);
    let mut params = params;
    if !at_rest && n > 0 {
        // common drift over the window, removed so the average sits at the final time
        let span = window as f64 * opts.dt;
        let rate = x.iter().zip(&window_start).map(|(a, b)| a - b).sum::<f64>() / (n as f64 * span);
        let lag = 0.5 * (window - 1) as f64 * opts.dt;
        avg.iter_mut().for_each(|a| *a += rate * lag);
        params.frame += rate;
    }
    model.rhs_into(&avg, &params, structure, &mut f);
    let residual_norm = l2_norm(&f);
    let accepted = residual_norm < opts.threshold();
    Ok(SteadyStateRecord {
        dispersion: dispersion_or_zero(&avg, opts.dispersion),
        x: avg,
        params,
        residual_norm,
        accepted,
        reason: (!accepted).then_some(RejectReason::Timeout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_euler, random_phases, Kuramoto, OmegaSampler};
    use crate::networks::{gen_er, HyperNetwork, PairwiseNetwork};
    use crate::seed::rng;

    fn record(x: Vec<f64>) -> SteadyStateRecord {
        let n = x.len();
        SteadyStateRecord {
            x,
            params: ConditionParams { omega: vec![0.0; n], alpha: 0.0, frame: 0.0, trial_id: 0 },
            residual_norm: 0.0,
            dispersion: 0.0,
            accepted: true,
            reason: None,
        }
    }

    #[test]
    fn mad_cases() {
        assert_eq!(mad(&[2.5; 6]).unwrap(), 0.0);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 1.0);
        assert_eq!(mad(&[11.0, 12.0, 13.0, 14.0, 15.0]).unwrap(), 1.0);
        assert!(mad(&[]).is_err());
    }

    #[test]
    fn zero_observation_noise_is_identity() {
        let recs = vec![record(vec![0.1, 0.7, 2.0])];
        let out = apply_observation_noise(&recs, 0.0, &mut rng(1)).unwrap();
        assert_eq!(out, recs);
    }

    #[test]
    fn observation_noise_scale_and_independence() {
        // 0.0, 0.1, ..., 0.9 around their mean 0.45: absolute deviations 0.05..0.45, median 0.25
        let base: Vec<f64> = (0..10).map(|v| v as f64 / 10.0).collect();
        let recs: Vec<_> = (0..20_000).map(|_| record(base.clone())).collect();
        let scale = phase_mad(&recs).unwrap();
        assert!((scale - 0.25).abs() < 1e-12, "{scale}");
        let noisy = apply_observation_noise(&recs, 0.01, &mut rng(2)).unwrap();
        let deltas: Vec<f64> =
            noisy.iter().zip(&recs).flat_map(|(a, b)| a.x.iter().zip(&b.x).map(|(u, v)| u - v).collect::<Vec<_>>()).collect();
        let sd = (deltas.iter().map(|d| d * d).sum::<f64>() / deltas.len() as f64).sqrt();
        assert!((sd / (0.01 * scale) - 1.0).abs() < 0.05, "sd {sd}");

        // entry-wise correlation between paired records, 10^5 pairs
        let pairs = 100_000;
        let (a, b) = (&deltas[..pairs], &deltas[pairs..2 * pairs]);
        let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
        let corr = dot / (a.iter().map(|u| u * u).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(corr.abs() < 0.02, "corr {corr}");
        // input untouched
        assert_eq!(recs[0].x, base);
    }

    #[test]
    fn observation_noise_is_zero_mean() {
        let base = record(vec![0.0, 1.0, 3.0, 7.0]);
        let mut sums = vec![0.0; 4];
        let copies = 10_000;
        let scale = phase_mad(std::slice::from_ref(&base)).unwrap();
        let mut r = rng(3);
        for _ in 0..copies {
            let out = apply_observation_noise(std::slice::from_ref(&base), 0.2, &mut r).unwrap();
            sums.iter_mut().zip(&out[0].x).for_each(|(s, v)| *s += v);
        }
        for (s, v) in sums.iter().zip(&base.x) {
            let mean = s / copies as f64;
            assert!((mean - v).abs() < 5.0 * 0.2 * scale / (copies as f64).sqrt());
        }
    }

    #[test]
    fn phase_mad_ignores_rotation_and_winding() {
        let mut r = rng(9);
        let recs: Vec<_> =
            (0..50).map(|_| record((0..7).map(|_| 0.3 * gauss(&mut r)).collect())).collect();
        let base = phase_mad(&recs).unwrap();
        let moved: Vec<_> = recs
            .iter()
            .enumerate()
            .map(|(k, rec)| {
                let shift = 1.7 * k as f64;
                record(rec.x.iter().enumerate().map(|(i, v)| v + shift + TAU * (i % 3) as f64).collect())
            })
            .collect();
        assert!((phase_mad(&moved).unwrap() - base).abs() < 1e-12);
        // states straddling the 0/2pi seam are as tight as any other
        let seam = record(vec![TAU - 0.05, 0.05, TAU - 0.15, 0.15]);
        assert!((phase_mad(&[seam]).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mad_uses_absolute_scale() {
        let recs: Vec<_> = (0..2000).map(|_| record(vec![1.0; 5])).collect();
        let out = apply_observation_noise(&recs, 0.1, &mut rng(4)).unwrap();
        let d: Vec<f64> = out.iter().flat_map(|r| r.x.iter().map(|v| v - 1.0)).collect();
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "sd {sd}");
    }

    #[test]
    fn structural_noise() {
        let net = gen_er(10, 0.5, Directedness::Undirected, &mut rng(5)).unwrap();
        let s = Structure::Pairwise(net.clone());
        assert_eq!(apply_structural_noise(&s, 0.0, &mut rng(1)).unwrap(), s);
        let Structure::Pairwise(out) = apply_structural_noise(&s, 0.3, &mut rng(1)).unwrap() else { unreachable!() };
        out.validate().unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if net.get(i, j) == 0.0 {
                    assert_eq!(out.get(i, j), 0.0);
                }
                assert!(out.get(i, j) >= 0.0);
            }
        }

        // sample std on unit edges; sigma small enough that clamping never fires
        let mut full = PairwiseNetwork::empty(100, Directedness::Directed);
        for i in 0..100 {
            for j in 0..100 {
                if i != j {
                    full.set(i, j, 1.0);
                }
            }
        }
        let Structure::Pairwise(noisy) =
            apply_structural_noise(&Structure::Pairwise(full.clone()), 0.1, &mut rng(6)).unwrap()
        else {
            unreachable!()
        };
        let d: Vec<f64> = noisy.edges().map(|e| e.2 - 1.0).collect();
        assert!(d.len() >= 9900);
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd / 0.1 - 1.0).abs() < 0.05, "sd {sd}");

        let mut h = HyperNetwork::empty(5, 2).unwrap();
        h.insert(vec![0, 1, 2], 1.0).unwrap();
        let Structure::Hyper(hn) = apply_structural_noise(&Structure::Hyper(h), 0.2, &mut rng(2)).unwrap() else {
            unreachable!()
        };
        assert_eq!(hn.len(), 1);
        assert_ne!(hn.weight(&[0, 1, 2]), 1.0);
    }

    #[test]
    fn zero_dynamical_noise_matches_euler() {
        let net = Structure::Pairwise(gen_er(8, 0.5, Directedness::Undirected, &mut rng(7)).unwrap());
        let mut r = rng(8);
        let params = ConditionParams { omega: OmegaSampler::default().sample(8, &mut r), alpha: 0.0, frame: 0.0, trial_id: 0 };
        let x0 = random_phases(8, &mut r);
        let opts = DynNoiseOptions {
            sigma_dyn: 0.0,
            dt: 0.01,
            t_max: 3.0,
            avg_fraction: 1.0 / 300.0,
            eps_conv: 1e-6,
            dispersion: DispersionKind::Circ,
        };
        let rec = integrate_with_dyn_noise(&Kuramoto, x0.clone(), params.clone(), &net, &opts, &mut r).unwrap();
        let euler = integrate_euler(|x, o| Kuramoto.rhs_into(x, &params, &net, o), &x0, 0.01, 3.0).unwrap();
        for (a, b) in rec.x.iter().zip(&euler) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_variance_grows_linearly() {
        let s = Structure::Pairwise(PairwiseNetwork::empty(1, Directedness::Undirected));
        let params = ConditionParams { omega: vec![0.0], alpha: 0.0, frame: 0.0, trial_id: 0 };
        let (sigma, t) = (0.5, 4.0);
        let opts = DynNoiseOptions {
            sigma_dyn: sigma,
            dt: 0.01,
            t_max: t,
            avg_fraction: 1.0 / 400.0,
            eps_conv: 1e-6,
            dispersion: DispersionKind::Circ,
        };
        let mut r = rng(9);
        let runs = 4000;
        let finals: Vec<f64> = (0..runs)
            .map(|_| integrate_with_dyn_noise(&Kuramoto, vec![0.0], params.clone(), &s, &opts, &mut r).unwrap().x[0])
            .collect();
        let var = finals.iter().map(|v| v * v).sum::<f64>() / runs as f64;
        let expect = sigma * sigma * t;
        // sample variance of 4000 normals has relative sd sqrt(2/4000) ~ 2.2%
        assert!((var / expect - 1.0).abs() < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn quasi_steady_states_concentrate() {
        let mut net = PairwiseNetwork::empty(8, Directedness::Undirected);
        for i in 0..8 {
            for j in (i + 1)..8 {
                net.set(i, j, 1.0);
            }
        }
        let s = Structure::Pairwise(net);
        let opts = DynNoiseOptions {
            sigma_dyn: 0.1,
            dt: 0.01,
            t_max: 100.0,
            avg_fraction: 0.1,
            eps_conv: 1e-6,
            dispersion: DispersionKind::Circ,
        };
        let seeds = 40;
        let mut ok = 0;
        for seed in 0..seeds {
            let mut r = rng(100 + seed);
            let params = ConditionParams { omega: OmegaSampler::default().sample(8, &mut r), alpha: 0.0, frame: 0.0, trial_id: seed };
            let x0 = random_phases(8, &mut r);
            let rec = integrate_with_dyn_noise(&Kuramoto, x0, params, &s, &opts, &mut r).unwrap();
            if rec.residual_norm < 3.0 * 0.1 {
                assert!(rec.accepted);
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.9 * seeds as f64, "{ok}/{seeds}");
    }
}
