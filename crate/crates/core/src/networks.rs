//! Pairwise and higher-order interaction structures.
//!
//! Matrices use the row-target convention: `w[i][j]` is the influence of node
//! `j` on node `i`. File formats list edges as `[source, target, weight]`, so
//! a directed edge `s -> t` lands in row `t`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use itertools::Itertools;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directedness {
    Undirected,
    Directed,
}

impl fmt::Display for Directedness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directedness::Undirected => f.write_str("undirected"),
            Directedness::Directed => f.write_str("directed"),
        }
    }
}

/// Dense `n x n` coupling matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseNetwork {
    n: usize,
    mode: Directedness,
    w: Vec<f64>,
}

impl PairwiseNetwork {
    pub fn empty(n: usize, mode: Directedness) -> Self {
        Self { n, mode, w: vec![0.0; n * n] }
    }

    /// Builds a network from a row-major matrix, checking every invariant.
    pub fn from_matrix(n: usize, mode: Directedness, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n {
            return Err(invalid(format!("matrix has {} entries, expected {}", w.len(), n * n)));
        }
        let net = Self { n, mode, w };
        net.validate()?;
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> Directedness {
        self.mode
    }

    /// Row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    #[inline]
    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.w[target * self.n + source]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.w[target * self.n..(target + 1) * self.n]
    }

    /// Sets the influence of `source` on `target`; undirected networks write
    /// both entries.
    pub fn set(&mut self, target: usize, source: usize, weight: f64) {
        assert!(target != source, "self-loops are not representable");
        self.w[target * self.n + source] = weight;
        if self.mode == Directedness::Undirected {
            self.w[source * self.n + target] = weight;
        }
    }

    /// Number of non-zero couplings; unordered pairs for undirected networks.
    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    /// Non-zero couplings as `(source, target, weight)`. Undirected networks
    /// report each pair once with `source < target`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n;
        let undirected = self.mode == Directedness::Undirected;
        (0..n)
            .flat_map(move |t| (0..n).map(move |s| (s, t)))
            .filter(move |&(s, t)| s != t && (!undirected || s < t))
            .map(move |(s, t)| (s, t, self.w[t * n + s]))
            .filter(|&(_, _, w)| w != 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.w[i * n + i] != 0.0 {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            for j in 0..n {
                let v = self.w[i * n + j];
                if !v.is_finite() {
                    return Err(invalid(format!("non-finite weight at ({i}, {j})")));
                }
                if self.mode == Directedness::Undirected && v != self.w[j * n + i] {
                    return Err(invalid(format!("undirected network is asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> PairwiseFile {
        PairwiseFile { n: self.n, mode: self.mode, edges: self.edges().collect() }
    }

    pub fn from_file(file: &PairwiseFile) -> Result<Self> {
        let mut net = Self::empty(file.n, file.mode);
        for &(s, t, w) in &file.edges {
            if s >= file.n || t >= file.n {
                return Err(invalid(format!("edge ({s}, {t}) out of range for n = {}", file.n)));
            }
            if s == t {
                return Err(invalid(format!("self-loop at node {s}")));
            }
            net.set(t, s, w);
        }
        net.validate()?;
        Ok(net)
    }
}

/// Order-`d` interactions keyed by strictly increasing `(d+1)`-tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetwork {
    n: usize,
    d: usize,
    edges: BTreeMap<Vec<usize>, f64>,
}

impl HyperNetwork {
    pub fn empty(n: usize, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(invalid(format!("hyperedge order must be >= 2, got {d}")));
        }
        Ok(Self { n, d, edges: BTreeMap::new() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Simplex order; each hyperedge couples `d + 1` nodes.
    pub fn order(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn insert(&mut self, mut nodes: Vec<usize>, weight: f64) -> Result<()> {
        nodes.sort_unstable();
        if nodes.len() != self.d + 1 {
            return Err(invalid(format!("hyperedge {nodes:?} must have {} nodes", self.d + 1)));
        }
        if nodes.windows(2).any(|p| p[0] == p[1]) {
            return Err(invalid(format!("hyperedge {nodes:?} repeats a node")));
        }
        if nodes.last().is_some_and(|&v| v >= self.n) {
            return Err(invalid(format!("hyperedge {nodes:?} out of range for n = {}", self.n)));
        }
        if !weight.is_finite() {
            return Err(invalid(format!("non-finite weight on hyperedge {nodes:?}")));
        }
        self.edges.insert(nodes, weight);
        Ok(())
    }

    pub fn weight(&self, nodes: &[usize]) -> f64 {
        self.edges.get(nodes).copied().unwrap_or(0.0)
    }

    /// Hyperedges in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.edges.iter().map(|(k, &w)| (k.as_slice(), w))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&Vec<usize>, &mut f64)> + '_ {
        self.edges.iter_mut()
    }

    pub fn to_file(&self) -> HyperFile {
        HyperFile {
            n: self.n,
            d: self.d,
            edges: self.edges.iter().map(|(k, &w)| (k.clone(), w)).collect(),
        }
    }

    pub fn from_file(file: &HyperFile) -> Result<Self> {
        let mut net = Self::empty(file.n, file.d)?;
        for (nodes, w) in &file.edges {
            net.insert(nodes.clone(), *w)?;
        }
        Ok(net)
    }

    /// Symmetric `n x n x n` unfolding of an order-2 structure: every
    /// permutation of a stored triple carries its weight.
    pub fn dense_order2(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        if self.d != 2 {
            return Err(invalid("dense unfolding is only defined for order-2 structures"));
        }
        let n = self.n;
        let mut t = vec![vec![vec![0.0; n]; n]; n];
        for (k, &w) in &self.edges {
            for p in k.iter().permutations(3) {
                t[*p[0]][*p[1]][*p[2]] = w;
            }
        }
        Ok(t)
    }
}

/// Either kind of interaction structure.
#[derive(Clone, Debug, PartialEq)]
pub enum Structure {
    Pairwise(PairwiseNetwork),
    Hyper(HyperNetwork),
}

impl Structure {
    pub fn n(&self) -> usize {
        match self {
            Structure::Pairwise(p) => p.n(),
            Structure::Hyper(h) => h.n(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let s = match self {
            Structure::Pairwise(p) => serde_json::to_string(&p.to_file())?,
            Structure::Hyper(h) => serde_json::to_string(&h.to_file())?,
        };
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        match serde_json::from_str::<StructureFile>(s)? {
            StructureFile::Hyper(h) => Ok(Structure::Hyper(HyperNetwork::from_file(&h)?)),
            StructureFile::Pairwise(p) => Ok(Structure::Pairwise(PairwiseNetwork::from_file(&p)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseFile {
    pub n: usize,
    pub mode: Directedness,
    pub edges: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperFile {
    pub n: usize,
    pub d: usize,
    pub edges: Vec<(Vec<usize>, f64)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StructureFile {
    Hyper(HyperFile),
    Pairwise(PairwiseFile),
}

// ---------------------------------------------------------------------------
// Candidate enumeration

/// Which family of candidate interactions a reconstruction scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    /// Unordered pairs `i < j`.
    Unordered,
    /// Matrix entries `(target, source)`, `target != source`.
    Ordered,
    /// Sorted tuples of `d + 1` nodes.
    Tuples { d: usize },
}

/// One candidate interaction. `Ordered` is indexed as a matrix entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Candidate {
    Unordered(usize, usize),
    Ordered { target: usize, source: usize },
    Tuple(Vec<usize>),
}

/// Lexicographic candidate enumeration shared by the ansatz and the metrics.
/// Unordered pairs are `(i, j)` with `i < j`; ordered entries are row-major
/// over `(target, source)`; tuples are lexicographic combinations.
pub fn candidates(kind: CandidateKind, n: usize) -> Vec<Candidate> {
    match kind {
        CandidateKind::Unordered => (0..n)
            .tuple_combinations()
            .map(|(i, j)| Candidate::Unordered(i, j))
            .collect(),
        CandidateKind::Ordered => (0..n)
            .cartesian_product(0..n)
            .filter(|(t, s)| t != s)
            .map(|(target, source)| Candidate::Ordered { target, source })
            .collect(),
        CandidateKind::Tuples { d } => (0..n).combinations(d + 1).map(Candidate::Tuple).collect(),
    }
}

/// `C(n, k)` in floating point-free integer arithmetic.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

pub fn candidate_count(kind: CandidateKind, n: usize) -> usize {
    match kind {
        CandidateKind::Unordered => binomial(n, 2),
        CandidateKind::Ordered => n * n.saturating_sub(1),
        CandidateKind::Tuples { d } => binomial(n, d + 1),
    }
}

/// Weight of a candidate in a structure of the matching kind.
pub fn candidate_weight(s: &Structure, c: &Candidate) -> f64 {
    match (s, c) {
        (Structure::Pairwise(p), Candidate::Unordered(i, j)) => p.get(*i, *j),
        (Structure::Pairwise(p), Candidate::Ordered { target, source }) => p.get(*target, *source),
        (Structure::Hyper(h), Candidate::Tuple(t)) => h.weight(t),
        _ => panic!("candidate {c:?} does not match structure kind"),
    }
}

// ---------------------------------------------------------------------------
// Generators

fn check_er_args(n: usize, p: f64) -> Result<()> {
    if n < 2 {
        return Err(invalid(format!("network needs at least 2 nodes, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn gen_pairwise(
    n: usize,
    p: f64,
    mode: Directedness,
    rng: &mut Rng,
    mut weight: impl FnMut(&mut Rng) -> f64,
) -> Result<PairwiseNetwork> {
    check_er_args(n, p)?;
    let mut net = PairwiseNetwork::empty(n, mode);
    let kind = match mode {
        Directedness::Undirected => CandidateKind::Unordered,
        Directedness::Directed => CandidateKind::Ordered,
    };
    for c in candidates(kind, n) {
        if rng.random_bool(p) {
            let w = weight(rng);
            match c {
                Candidate::Unordered(i, j) => net.set(i, j, w),
                Candidate::Ordered { target, source } => net.set(target, source, w),
                Candidate::Tuple(_) => unreachable!(),
            }
        }
    }
    Ok(net)
}

/// Erdős–Rényi `G(n, p)` with unit weights.
pub fn gen_er(n: usize, p: f64, mode: Directedness, rng: &mut Rng) -> Result<PairwiseNetwork> {
    gen_pairwise(n, p, mode, rng, |_| 1.0)
}

/// Erdős–Rényi support with weights uniform on `(0, 1]`.
pub fn gen_weighted(n: usize, p: f64, mode: Directedness, rng: &mut Rng) -> Result<PairwiseNetwork> {
    gen_pairwise(n, p, mode, rng, |r| 1.0 - r.random::<f64>())
}

/// Includes every `(d+1)`-subset of the nodes independently with probability `p`.
pub fn gen_simplex(n: usize, d: usize, p: f64, rng: &mut Rng) -> Result<HyperNetwork> {
    if d < 2 {
        return Err(invalid(format!("simplex order must be >= 2, got {d}")));
    }
    if n < d + 1 {
        return Err(invalid(format!("{n} nodes cannot host a {d}-simplex")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("inclusion probability {p} outside [0, 1]")));
    }
    let mut net = HyperNetwork::empty(n, d)?;
    for nodes in (0..n).combinations(d + 1) {
        if rng.random_bool(p) {
            net.edges.insert(nodes, 1.0);
        }
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// Edge-list ingestion

/// Lines skipped while loading an edge list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops: usize,
    pub duplicates: usize,
    /// Original labels, indexed by assigned node id.
    pub labels: Vec<String>,
}

pub fn load_edge_list(
    path: &Path,
    mode: Directedness,
    weighted: bool,
) -> Result<(PairwiseNetwork, LoadReport)> {
    parse_edge_list(&std::fs::read_to_string(path)?, mode, weighted)
}

/// Parses `src dst [weight]` lines. Labels are relabeled to `0..n` in order of
/// first appearance; weights are rescaled by the largest magnitude.
pub fn parse_edge_list(
    text: &str,
    mode: Directedness,
    weighted: bool,
) -> Result<(PairwiseNetwork, LoadReport)> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut report = LoadReport::default();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `src dst [weight]`, got {} fields", fields.len()),
            });
        }
        let weight = match fields.get(2) {
            Some(raw) => {
                let w: f64 = raw.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("weight `{raw}` is not a number"),
                })?;
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("weight {w} must be finite and non-negative"),
                    });
                }
                if weighted {
                    w
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        if fields[0] == fields[1] {
            report.self_loops += 1;
            continue;
        }
        let mut id = |label| -> usize {
            let next = ids.len();
            *ids.entry(label).or_insert_with(|| {
                report.labels.push(label.to_string());
                next
            })
        };
        let (s, t) = (id(fields[0]), id(fields[1]));
        let key = match mode {
            Directedness::Undirected => (s.min(t), s.max(t)),
            Directedness::Directed => (s, t),
        };
        match edges.get_mut(&key) {
            Some(prev) => {
                report.duplicates += 1;
                *prev = prev.max(weight);
            }
            None => {
                edges.insert(key, weight);
            }
        }
    }

    let n = ids.len();
    let scale = edges.values().fold(0.0f64, |m, w| m.max(w.abs()));
    let mut net = PairwiseNetwork::empty(n, mode);
    for ((s, t), w) in edges {
        net.set(t, s, if scale > 0.0 { w / scale } else { w });
    }
    Ok((net, report))
}
