//! Sigmoidal variational ansatz over candidate interactions.
//!
//! Each candidate carries one parameter `theta_e`; its soft weight is
//! `sigmoid(k * theta_e)`. Undirected and weighted modes share one parameter
//! per unordered pair, directed mode has one per matrix entry, and hyper mode
//! one per sorted tuple. Parameters are stored flat in the lexicographic order
//! of [`crate::networks::candidates`].

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::networks::{
    candidate_count, candidates, Candidate, CandidateKind, Directedness, HyperNetwork, PairwiseNetwork, Structure,
};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnsatzMode {
    Undirected,
    Directed,
    Weighted,
    Hyper { d: usize },
}

impl AnsatzMode {
    pub fn candidate_kind(self) -> CandidateKind {
        match self {
            AnsatzMode::Undirected | AnsatzMode::Weighted => CandidateKind::Unordered,
            AnsatzMode::Directed => CandidateKind::Ordered,
            AnsatzMode::Hyper { d } => CandidateKind::Tuples { d },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnsatzMode::Undirected => "undirected",
            AnsatzMode::Directed => "directed",
            AnsatzMode::Weighted => "weighted",
            AnsatzMode::Hyper { .. } => "hyper",
        }
    }

    pub fn parse(name: &str, d: Option<usize>) -> Result<Self> {
        match (name, d) {
            ("undirected", _) => Ok(AnsatzMode::Undirected),
            ("directed", _) => Ok(AnsatzMode::Directed),
            ("weighted", _) => Ok(AnsatzMode::Weighted),
            ("hyper", Some(d)) if d >= 2 => Ok(AnsatzMode::Hyper { d }),
            ("hyper", _) => Err(invalid("hyper mode needs an order d >= 2")),
            (other, _) => Err(invalid(format!("unknown ansatz mode `{other}`"))),
        }
    }
}

impl fmt::Display for AnsatzMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnsatzMode::Hyper { d } => write!(f, "hyper(d={d})"),
            m => f.write_str(m.name()),
        }
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalAnsatz {
    mode: AnsatzMode,
    n: usize,
    k: f64,
    pub theta: Vec<f64>,
}

impl VariationalAnsatz {
    pub fn new(mode: AnsatzMode, n: usize, k: f64, theta: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("ansatz needs at least 2 nodes, got {n}")));
        }
        if let AnsatzMode::Hyper { d } = mode {
            if d < 2 || n < d + 1 {
                return Err(invalid(format!("hyper(d={d}) ansatz needs d >= 2 and n >= d + 1, got n = {n}")));
            }
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(invalid(format!("steepness k must be positive, got {k}")));
        }
        let expected = candidate_count(mode.candidate_kind(), n);
        if theta.len() != expected {
            return Err(invalid(format!("{mode} ansatz on {n} nodes needs {expected} parameters, got {}", theta.len())));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self { mode, n, k, theta })
    }

    /// Parameters drawn uniformly from `[-init_scale, init_scale]`.
    pub fn init(mode: AnsatzMode, n: usize, k: f64, init_scale: f64, rng: &mut Rng) -> Result<Self> {
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(invalid(format!("init_scale must be finite and >= 0, got {init_scale}")));
        }
        let count = match mode {
            AnsatzMode::Hyper { d } if n < d + 1 => 0,
            _ => candidate_count(mode.candidate_kind(), n),
        };
        let theta = (0..count)
            .map(|_| if init_scale == 0.0 { 0.0 } else { rng.random_range(-init_scale..=init_scale) })
            .collect();
        Self::new(mode, n, k, theta)
    }

    pub fn mode(&self) -> AnsatzMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        candidates(self.mode.candidate_kind(), self.n)
    }

    /// Soft weights `sigmoid(k theta_e)` in parameter order.
    pub fn estimates(&self) -> Vec<f64> {
        self.theta.iter().map(|t| sigmoid(self.k * t)).collect()
    }

    /// `d sigmoid(k theta_e) / d theta_e = k s (1 - s)`, with `1 - s`
    /// evaluated as `sigmoid(-k theta_e)` to keep precision in the tails.
    pub fn dmap(&self) -> Vec<f64> {
        self.theta.iter().map(|t| self.k * sigmoid(self.k * t) * sigmoid(-self.k * t)).collect()
    }

    /// The soft adjacency as a structure with zero diagonal.
    pub fn to_adjacency(&self) -> Structure {
        let est = self.estimates();
        match self.mode {
            AnsatzMode::Hyper { d } => {
                let mut h = HyperNetwork::empty(self.n, d).expect("order checked at construction");
                for (c, w) in self.candidates().into_iter().zip(est) {
                    let Candidate::Tuple(t) = c else { unreachable!() };
                    h.insert(t, w).expect("valid tuple");
                }
                Structure::Hyper(h)
            }
            mode => {
                let dir = if mode == AnsatzMode::Directed { Directedness::Directed } else { Directedness::Undirected };
                let mut net = PairwiseNetwork::empty(self.n, dir);
                for (c, w) in self.candidates().into_iter().zip(est) {
                    match c {
                        Candidate::Unordered(i, j) => net.set(i, j, w),
                        Candidate::Ordered { target, source } => net.set(target, source, w),
                        Candidate::Tuple(_) => unreachable!(),
                    }
                }
                Structure::Pairwise(net)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            mode: self.mode.name().to_string(),
            n: self.n,
            d: match self.mode {
                AnsatzMode::Hyper { d } => Some(d),
                _ => None,
            },
            k: self.k,
            theta: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Self::new(AnsatzMode::parse(&c.mode, c.d)?, c.n, c.k, c.theta.clone())
    }
}

/// Serialized ansatz: `{mode, n, d?, k, theta}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub mode: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub k: f64,
    pub theta: Vec<f64>,
}
