//! Steady-state residuals, full and sampled losses, and their gradients.
//!
//! For a model that is affine in the coupling weights the residual of node
//! `i` in record `m` is
//!
//! ```text
//! R_i^(m) = F_i(x^(m); p^(m), 0) + sum_{e ∋ i} A_e * dF_i/dA_e(x^(m), p^(m))
//! ```
//!
//! [`ResidualSystem`] precomputes the drift term and the edge partials once per
//! dataset, so a residual costs one dot product over the candidates incident
//! to `i`.

use rand::seq::index;
use rayon::prelude::*;

use crate::ansatz::{AnsatzMode, VariationalAnsatz};
use crate::dynamics::{DynModel, SteadyStateRecord};
use crate::error::{invalid, Result};
use crate::networks::{candidates, Directedness, HyperNetwork, PairwiseNetwork, Structure};
use crate::seed::Rng;

/// Batches at least this long are reduced in parallel chunks.
const PAR_MIN_PAIRS: usize = 4096;
/// Fixed chunk length, so the reduction order never depends on worker count.
const CHUNK: usize = 1024;

/// `(record, node)` index into the residual grid.
pub type Pair = (usize, usize);

/// Residual of every node for one record: `model.rhs(x, p, a_hat)`.
pub fn residual(model: &dyn DynModel, rec: &SteadyStateRecord, a_hat: &Structure) -> Result<Vec<f64>> {
    model.rhs(&rec.x, &rec.params, a_hat)
}

fn empty_like(mode: AnsatzMode, n: usize) -> Result<Structure> {
    Ok(match mode {
        AnsatzMode::Hyper { d } => Structure::Hyper(HyperNetwork::empty(n, d)?),
        AnsatzMode::Directed => Structure::Pairwise(PairwiseNetwork::empty(n, Directedness::Directed)),
        _ => Structure::Pairwise(PairwiseNetwork::empty(n, Directedness::Undirected)),
    })
}

/// Precomputed residual map for one dataset and one candidate enumeration.
#[derive(Clone, Debug)]
pub struct ResidualSystem {
    m: usize,
    n: usize,
    params: usize,
    /// `F(x^(m); p^(m), 0)`, row-major `m x n`.
    drift: Vec<f64>,
    /// CSR over nodes: `incidence[offsets[i]..offsets[i+1]]` are the
    /// parameters that drive node `i`.
    offsets: Vec<usize>,
    incidence: Vec<usize>,
    /// `partials[m * incidence.len() + k]` matches `incidence[k]`.
    partials: Vec<f64>,
}

impl ResidualSystem {
    pub fn new(model: &dyn DynModel, records: &[SteadyStateRecord], mode: AnsatzMode, n: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let empty = empty_like(mode, n)?;
        for r in records {
            model.check(r.x.len(), &r.params, &empty)?;
        }
        let cands = candidates(mode.candidate_kind(), n);

        // incidence from the first record; node lists are state independent
        let mut per_node: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut buf = Vec::new();
        for (p, c) in cands.iter().enumerate() {
            buf.clear();
            model.edge_partials(&records[0].x, &records[0].params, c, &mut buf);
            for (slot, &(node, _)) in buf.iter().enumerate() {
                per_node[node].push((p, slot));
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut incidence = Vec::new();
        let mut slots = Vec::new();
        offsets.push(0);
        for list in &per_node {
            for &(p, slot) in list {
                incidence.push(p);
                slots.push(slot);
            }
            offsets.push(incidence.len());
        }

        let m = records.len();
        let width = incidence.len();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = records
            .par_iter()
            .map(|r| {
                let drift = model.rhs(&r.x, &r.params, &empty).expect("checked above");
                let mut per_cand: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cands.len());
                for c in &cands {
                    let mut v = Vec::new();
                    model.edge_partials(&r.x, &r.params, c, &mut v);
                    per_cand.push(v);
                }
                let mut row = Vec::with_capacity(width);
                for node in 0..n {
                    for k in offsets[node]..offsets[node + 1] {
                        let (nd, val) = per_cand[incidence[k]][slots[k]];
                        debug_assert_eq!(nd, node);
                        row.push(val);
                    }
                }
                (drift, row)
            })
            .collect();
        let mut drift = Vec::with_capacity(m * n);
        let mut partials = Vec::with_capacity(m * width);
        for (d, p) in rows {
            drift.extend(d);
            partials.extend(p);
        }
        Ok(Self { m, n, params: cands.len(), drift, offsets, incidence, partials })
    }

    pub fn records(&self) -> usize {
        self.m
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    /// Number of `(record, node)` residuals.
    pub fn len(&self) -> usize {
        self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-adds needed to evaluate the residuals of `batch`.
    pub fn batch_work(&self, batch: &[Pair]) -> usize {
        batch.iter().map(|&(_, i)| self.offsets[i + 1] - self.offsets[i]).sum()
    }

    /// `R_i^(m)` for soft weights `est` in parameter order.
    #[inline]
    pub fn residual(&self, m: usize, i: usize, est: &[f64]) -> f64 {
        let width = self.incidence.len();
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        let part = &self.partials[m * width + lo..m * width + hi];
        let inc = &self.incidence[lo..hi];
        let mut r = self.drift[m * self.n + i];
        for (&p, &d) in inc.iter().zip(part) {
            r += est[p] * d;
        }
        r
    }

    /// Mean squared residual over all `M * N` pairs.
    pub fn full_loss(&self, est: &[f64]) -> f64 {
        let mut total = 0.0;
        for m in 0..self.m {
            for i in 0..self.n {
                total += self.residual(m, i, est).powi(2);
            }
        }
        total / self.len() as f64
    }

    fn check_batch(&self, batch: &[Pair]) -> Result<()> {
        if batch.is_empty() {
            return Err(invalid("empty residual batch"));
        }
        if let Some(&(m, i)) = batch.iter().find(|&&(m, i)| m >= self.m || i >= self.n) {
            return Err(invalid(format!("pair ({m}, {i}) outside the {} x {} residual grid", self.m, self.n)));
        }
        Ok(())
    }

    /// Mean squared residual over the sampled pairs.
    pub fn sampled_loss(&self, est: &[f64], batch: &[Pair]) -> Result<f64> {
        self.check_batch(batch)?;
        let sum: f64 = if batch.len() >= PAR_MIN_PAIRS {
            let parts: Vec<f64> = batch
                .par_chunks(CHUNK)
                .map(|c| c.iter().map(|&(m, i)| self.residual(m, i, est).powi(2)).sum())
                .collect();
            parts.iter().sum()
        } else {
            batch.iter().map(|&(m, i)| self.residual(m, i, est).powi(2)).sum()
        };
        Ok(sum / batch.len() as f64)
    }

    fn accumulate(&self, est: &[f64], pairs: &[Pair], grad: &mut [f64]) -> f64 {
        let width = self.incidence.len();
        let mut sq = 0.0;
        for &(m, i) in pairs {
            let r = self.residual(m, i, est);
            sq += r * r;
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            let part = &self.partials[m * width + lo..m * width + hi];
            for (&p, &d) in self.incidence[lo..hi].iter().zip(part) {
                grad[p] += r * d;
            }
        }
        sq
    }

    /// Sampled loss and its gradient with respect to the soft weights,
    /// `dL/dA_e = (2/|B|) sum_{(m,i) in B} R_i^(m) dF_i/dA_e`.
    pub fn loss_and_weight_gradient(&self, est: &[f64], batch: &[Pair]) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let mut grad = vec![0.0; self.params];
        let sq = if batch.len() >= PAR_MIN_PAIRS {
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .map(|c| {
                    let mut g = vec![0.0; self.params];
                    let sq = self.accumulate(est, c, &mut g);
                    (sq, g)
                })
                .collect();
            let mut sq = 0.0;
            for (s, g) in parts {
                sq += s;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            sq
        } else {
            self.accumulate(est, batch, &mut grad)
        };
        let b = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= 2.0 / b);
        Ok((sq / b, grad))
    }

    /// Sampled loss and its gradient with respect to `theta`, chaining
    /// through the sigmoid map.
    pub fn loss_and_gradient(&self, ansatz: &VariationalAnsatz, batch: &[Pair]) -> Result<(f64, Vec<f64>)> {
        if ansatz.len() != self.params {
            return Err(invalid(format!(
                "ansatz has {} parameters, residual system expects {}",
                ansatz.len(),
                self.params
            )));
        }
        let (loss, mut grad) = self.loss_and_weight_gradient(&ansatz.estimates(), batch)?;
        grad.iter_mut().zip(ansatz.dmap()).for_each(|(g, d)| *g *= d);
        Ok((loss, grad))
    }

    /// Every pair of the grid in row-major order.
    pub fn all_pairs(&self) -> Vec<Pair> {
        (0..self.m).flat_map(|m| (0..self.n).map(move |i| (m, i))).collect()
    }
}

/// Gradient of the sampled loss with respect to `theta`.
pub fn loss_gradient(system: &ResidualSystem, ansatz: &VariationalAnsatz, batch: &[Pair]) -> Result<Vec<f64>> {
    Ok(system.loss_and_gradient(ansatz, batch)?.1)
}

/// Full loss evaluated directly through `model.rhs`, without precomputation.
pub fn full_loss(model: &dyn DynModel, records: &[SteadyStateRecord], a_hat: &Structure) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        let res = residual(model, r, a_hat)?;
        total += res.iter().map(|v| v * v).sum::<f64>();
        count += res.len();
    }
    Ok(total / count as f64)
}

/// `batch_size` distinct pairs drawn uniformly from the `m_count x n` grid,
/// returned in row-major order.
pub fn sample_batch(m_count: usize, n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Pair>> {
    let total = m_count * n;
    if batch_size == 0 || batch_size > total {
        return Err(invalid(format!("batch size {batch_size} outside [1, {total}]")));
    }
    let mut flat: Vec<usize> = if batch_size == total {
        (0..total).collect()
    } else {
        index::sample(rng, total, batch_size).into_vec()
    };
    flat.sort_unstable();
    Ok(flat.into_iter().map(|k| (k / n, k % n)).collect())
}

/// How many residuals each optimizer step evaluates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchPolicy {
    Full,
    Sampled { size: usize },
}

impl BatchPolicy {
    /// `ceil(ratio * N) * M` pairs, or the full grid when `M * N <= 2048`.
    pub fn from_ratio(ratio: f64, m: usize, n: usize) -> Self {
        if m * n <= 2048 {
            return BatchPolicy::Full;
        }
        let size = ((ratio * n as f64).ceil() as usize).max(1) * m;
        if size >= m * n {
            BatchPolicy::Full
        } else {
            BatchPolicy::Sampled { size }
        }
    }

    pub fn draw(&self, system: &ResidualSystem, rng: &mut Rng) -> Result<Vec<Pair>> {
        match *self {
            BatchPolicy::Full => Ok(system.all_pairs()),
            BatchPolicy::Sampled { size } => sample_batch(system.records(), system.nodes(), size, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ConditionParams, HyperKuramoto, Kuramoto, OmegaSampler, Sakaguchi};
    use crate::networks::{gen_er, gen_simplex, Candidate};
    use crate::seed::rng;
    use rand::Rng as _;

    fn random_records(n: usize, m: usize, alpha: f64, r: &mut Rng) -> Vec<SteadyStateRecord> {
        (0..m)
            .map(|t| SteadyStateRecord {
                x: (0..n).map(|_| r.random_range(-3.0..3.0)).collect(),
                params: ConditionParams { omega: OmegaSampler::default().sample(n, r), alpha, frame: 0.0, trial_id: t as u64 },
                residual_norm: 0.0,
                dispersion: 0.1,
                accepted: true,
                reason: None,
            })
            .collect()
    }

    #[test]
    fn precomputed_residuals_match_rhs() {
        let mut r = rng(1);
        let n = 6;
        let cases: Vec<(Box<dyn DynModel>, AnsatzMode, f64)> = vec![
            (Box::new(Kuramoto), AnsatzMode::Undirected, 0.0),
            (Box::new(Kuramoto), AnsatzMode::Directed, 0.0),
            (Box::new(Sakaguchi { alpha: 0.3 }), AnsatzMode::Weighted, 0.3),
            (Box::new(HyperKuramoto { d: 2 }), AnsatzMode::Hyper { d: 2 }, 0.0),
            (Box::new(HyperKuramoto { d: 3 }), AnsatzMode::Hyper { d: 3 }, 0.0),
        ];
        for (model, mode, alpha) in cases {
            let recs = random_records(n, 4, alpha, &mut r);
            let a = VariationalAnsatz::init(mode, n, 12.0, 0.3, &mut r).unwrap();
            let sys = ResidualSystem::new(model.as_ref(), &recs, mode, n).unwrap();
            let est = a.estimates();
            let adj = a.to_adjacency();
            for (m, rec) in recs.iter().enumerate() {
                let direct = residual(model.as_ref(), rec, &adj).unwrap();
                for i in 0..n {
                    assert!((sys.residual(m, i, &est) - direct[i]).abs() < 1e-12, "{}", model.name());
                }
            }
            let direct = full_loss(model.as_ref(), &recs, &adj).unwrap();
            assert!((sys.full_loss(&est) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_half_weight_residual() {
        // locked pair: sin(x2 - x1) = omega_2 = -omega_1
        let delta = 0.5f64.asin();
        let rec = SteadyStateRecord {
            x: vec![delta, 0.0],
            params: ConditionParams { omega: vec![0.5, -0.5], alpha: 0.0, frame: 0.0, trial_id: 0 },
            residual_norm: 0.0,
            dispersion: 0.1,
            accepted: true,
            reason: None,
        };
        let mut half = PairwiseNetwork::empty(2, Directedness::Undirected);
        half.set(0, 1, 0.5);
        let res = residual(&Kuramoto, &rec, &Structure::Pairwise(half)).unwrap();
        assert!((res[0] - 0.25).abs() < 1e-15 && (res[1] + 0.25).abs() < 1e-15);
        let empty = Structure::Pairwise(PairwiseNetwork::empty(2, Directedness::Undirected));
        assert_eq!(residual(&Kuramoto, &rec, &empty).unwrap(), rec.params.omega);
    }

    #[test]
    fn single_residual_loss() {
        let rec = SteadyStateRecord {
            x: vec![0.0, 0.0],
            params: ConditionParams { omega: vec![2.0, -2.0], alpha: 0.0, frame: 0.0, trial_id: 0 },
            residual_norm: 0.0,
            dispersion: 0.0,
            accepted: true,
            reason: None,
        };
        let sys = ResidualSystem::new(&Kuramoto, &[rec], AnsatzMode::Undirected, 2).unwrap();
        assert_eq!(sys.sampled_loss(&[0.5], &[(0, 0)]).unwrap(), 4.0);
        assert_eq!(sys.full_loss(&[0.5]), 4.0);
        assert!(sys.sampled_loss(&[0.5], &[]).is_err());
        assert!(sys.sampled_loss(&[0.5], &[(1, 0)]).is_err());
        assert!(ResidualSystem::new(&Kuramoto, &[], AnsatzMode::Undirected, 2).is_err());
    }

    #[test]
    fn batch_decomposition_and_exhaustive_batch() {
        let mut r = rng(2);
        let recs = random_records(7, 6, 0.0, &mut r);
        let sys = ResidualSystem::new(&Kuramoto, &recs, AnsatzMode::Undirected, 7).unwrap();
        let a = VariationalAnsatz::init(AnsatzMode::Undirected, 7, 12.0, 0.4, &mut r).unwrap();
        let est = a.estimates();
        let all = sys.all_pairs();
        assert_eq!(sys.sampled_loss(&est, &all).unwrap(), sys.full_loss(&est));
        // equal-size blocks
        let means: Vec<f64> = all.chunks(7).map(|c| sys.sampled_loss(&est, c).unwrap()).collect();
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        assert!((avg - sys.full_loss(&est)).abs() < 1e-12);
    }

    #[test]
    fn sample_batch_contract() {
        let mut r = rng(3);
        let all = sample_batch(3, 4, 12, &mut r).unwrap();
        assert_eq!(all.len(), 12);
        let mut sorted = all.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(sample_batch(3, 4, 13, &mut r).is_err());
        assert!(sample_batch(3, 4, 0, &mut r).is_err());
        let b = sample_batch(10, 10, 17, &mut rng(5)).unwrap();
        assert_eq!(b, sample_batch(10, 10, 17, &mut rng(5)).unwrap());
        let mut uniq = b.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 17);
    }

    #[test]
    fn single_draws_are_uniform() {
        let (m, n) = (4, 5);
        let draws = 1_000_000;
        let mut counts = vec![0usize; m * n];
        let mut r = rng(4);
        for _ in 0..draws {
            let (a, b) = sample_batch(m, n, 1, &mut r).unwrap()[0];
            counts[a * n + b] += 1;
        }
        let p = 1.0 / (m * n) as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(6);
        let h = 1e-6;
        for case in 0..40 {
            let n = 6;
            let (model, mode, alpha): (Box<dyn DynModel>, AnsatzMode, f64) = match case % 4 {
                0 => (Box::new(Kuramoto), AnsatzMode::Undirected, 0.0),
                1 => (Box::new(Kuramoto), AnsatzMode::Directed, 0.0),
                2 => (Box::new(Sakaguchi { alpha: 0.3 }), AnsatzMode::Weighted, 0.3),
                _ => (Box::new(HyperKuramoto { d: 2 }), AnsatzMode::Hyper { d: 2 }, 0.0),
            };
            let recs = random_records(n, 5, alpha, &mut r);
            let sys = ResidualSystem::new(model.as_ref(), &recs, mode, n).unwrap();
            let a = VariationalAnsatz::init(mode, n, 12.0, 0.2, &mut r).unwrap();
            let batch = sample_batch(5, n, 11, &mut r).unwrap();
            let g = loss_gradient(&sys, &a, &batch).unwrap();
            for e in 0..a.len() {
                let mut up = a.clone();
                up.theta[e] += h;
                let mut dn = a.clone();
                dn.theta[e] -= h;
                let fd = (sys.sampled_loss(&up.estimates(), &batch).unwrap()
                    - sys.sampled_loss(&dn.estimates(), &batch).unwrap())
                    / (2.0 * h);
                let err = (fd - g[e]).abs() / g[e].abs().max(1e-4);
                assert!(err < 1e-5, "{} param {e}: fd {fd} analytic {}", model.name(), g[e]);
            }
        }
    }

    #[test]
    fn gradient_locality() {
        let mut r = rng(7);
        let n = 6;
        let recs = random_records(n, 3, 0.0, &mut r);
        let sys = ResidualSystem::new(&Kuramoto, &recs, AnsatzMode::Undirected, n).unwrap();
        let a = VariationalAnsatz::init(AnsatzMode::Undirected, n, 12.0, 0.2, &mut r).unwrap();
        // residuals of node 0 only: pairs not touching node 0 get zero gradient
        let batch = vec![(0, 0), (2, 0)];
        let g = loss_gradient(&sys, &a, &batch).unwrap();
        for (p, c) in a.candidates().iter().enumerate() {
            let Candidate::Unordered(i, j) = *c else { unreachable!() };
            if i != 0 && j != 0 {
                assert_eq!(g[p], 0.0);
            } else {
                assert_ne!(g[p], 0.0);
            }
        }
        // and perturbing a record outside the batch leaves it unchanged
        let mut recs2 = recs.clone();
        recs2[1].x[3] += 0.7;
        let sys2 = ResidualSystem::new(&Kuramoto, &recs2, AnsatzMode::Undirected, n).unwrap();
        assert_eq!(loss_gradient(&sys2, &a, &batch).unwrap(), g);
    }

    #[test]
    fn parallel_reduction_is_deterministic() {
        let mut r = rng(8);
        let n = 30;
        let recs = random_records(n, 200, 0.0, &mut r);
        let sys = ResidualSystem::new(&Kuramoto, &recs, AnsatzMode::Directed, n).unwrap();
        let a = VariationalAnsatz::init(AnsatzMode::Directed, n, 12.0, 0.2, &mut r).unwrap();
        let batch = sys.all_pairs();
        assert!(batch.len() >= PAR_MIN_PAIRS);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let x = one.install(|| sys.loss_and_gradient(&a, &batch).unwrap());
        let y = four.install(|| sys.loss_and_gradient(&a, &batch).unwrap());
        assert_eq!(x.0.to_bits(), y.0.to_bits());
        assert!(x.1.iter().zip(&y.1).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn work_is_linear_in_batch_size() {
        let mut r = rng(9);
        let n = 12;
        let recs = random_records(n, 50, 0.0, &mut r);
        let sys = ResidualSystem::new(&Kuramoto, &recs, AnsatzMode::Undirected, n).unwrap();
        for b in [60, 120, 240, 480] {
            let batch = sample_batch(50, n, b, &mut r).unwrap();
            // complete candidate set: every node has n - 1 incident parameters
            assert_eq!(sys.batch_work(&batch), b * (n - 1));
        }
    }

    #[test]
    fn batch_policy() {
        assert_eq!(BatchPolicy::from_ratio(0.05, 60, 16), BatchPolicy::Full);
        assert_eq!(BatchPolicy::from_ratio(0.05, 100, 100), BatchPolicy::Sampled { size: 500 });
        assert_eq!(BatchPolicy::from_ratio(0.05, 10, 300), BatchPolicy::Sampled { size: 150 });
    }

    #[test]
    fn true_structure_has_tiny_loss() {
        let net = gen_er(10, 0.5, Directedness::Undirected, &mut rng(10)).unwrap();
        let s = Structure::Pairwise(net.clone());
        let ds = crate::dynamics::collect_dataset(&Kuramoto, &s, 8, &Default::default(), 10).unwrap();
        assert_eq!(ds.records.len(), 8);
        assert!(full_loss(&Kuramoto, &ds.records, &s).unwrap() < 1e-12);
        let h = gen_simplex(6, 2, 0.5, &mut rng(11)).unwrap();
        assert!(!h.is_empty());
    }
}
