//! Ranking and classification scores for a reconstructed structure.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::networks::{candidate_weight, candidates, CandidateKind, Structure};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores and 0/1 labels over one candidate enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEdges {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredEdges {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(invalid("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }

    /// Scores from `estimate`, labels `weight > 0` from `truth`, both read in
    /// the enumeration order of `kind`.
    pub fn from_structures(truth: &Structure, estimate: &Structure, kind: CandidateKind) -> Result<Self> {
        if truth.n() != estimate.n() {
            return Err(invalid(format!("truth has {} nodes, estimate {}", truth.n(), estimate.n())));
        }
        let cands = candidates(kind, truth.n());
        let scores = cands.iter().map(|c| candidate_weight(estimate, c)).collect();
        let labels = cands.iter().map(|c| candidate_weight(truth, c) > 0.0).collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.n_pos(), self.n_neg());
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(format!("need both classes, got {p} positive and {n} negative")));
        }
        Ok((p, n))
    }
}

/// Rank-sum AUC with midranks for ties.
pub fn auc(s: &ScoredEdges) -> Result<f64> {
    let (n_pos, n_neg) = s.require_both()?;
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // ranks doubled so midranks stay integral
    let mut pos_rank2: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && s.scores[idx[end + 1]] == s.scores[idx[start]] {
            end += 1;
        }
        let mid2 = (start + 1 + end + 1) as u128;
        for &k in &idx[start..=end] {
            if s.labels[k] {
                pos_rank2 += mid2;
            }
        }
        start = end + 1;
    }
    let p = n_pos as u128;
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// ROC points from (0, 0) to (1, 1), one per distinct score, thresholds
/// descending.
pub fn roc_curve(s: &ScoredEdges) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = s.require_both()?;
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let v = s.scores[idx[k]];
        while k < idx.len() && s.scores[idx[k]] == v {
            if s.labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(pts)
}

/// Trapezoid area under a polyline.
pub fn trapezoid_area(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Confusion-matrix metrics for `score >= threshold`. An empty predicted
/// (or actual) positive set gives precision (or recall) 1 when there is
/// nothing to miss and 0 otherwise.
pub fn binary_metrics(s: &ScoredEdges, threshold: f64) -> BinaryMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&sc, &l) in s.scores.iter().zip(&s.labels) {
        match (sc >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = if tp + fp == 0 {
        if fn_ == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let accuracy = (tp + tn) as f64 / s.scores.len() as f64;
    BinaryMetrics { accuracy, precision, recall, f1, tp, fp, tn, fn_ }
}

/// Perfect ranking and perfect classification at 0.5.
pub fn success(s: &ScoredEdges) -> Result<bool> {
    let a = auc(s)?;
    let b = binary_metrics(s, DEFAULT_THRESHOLD);
    Ok(a == 1.0 && b.accuracy == 1.0 && b.precision == 1.0 && b.recall == 1.0 && b.f1 == 1.0)
}

/// `||est - truth||_F / ||truth||_F` over the candidate entries.
pub fn frobenius_rel(truth: &Structure, estimate: &Structure, kind: CandidateKind) -> Result<f64> {
    let cands = candidates(kind, truth.n());
    let (mut num, mut den) = (0.0, 0.0);
    for c in &cands {
        let (t, e) = (candidate_weight(truth, c), candidate_weight(estimate, c));
        num += (e - t) * (e - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("truth has no weight".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frobenius_rel: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
}

impl EvalReport {
    /// `with_weights` adds the relative Frobenius weight error.
    pub fn evaluate(
        truth: &Structure,
        estimate: &Structure,
        kind: CandidateKind,
        threshold: f64,
        with_weights: bool,
    ) -> Result<Self> {
        let s = ScoredEdges::from_structures(truth, estimate, kind)?;
        let b = binary_metrics(&s, threshold);
        Ok(Self {
            auc: auc(&s)?,
            accuracy: b.accuracy,
            precision: b.precision,
            recall: b.recall,
            f1: b.f1,
            frobenius_rel: if with_weights { Some(frobenius_rel(truth, estimate, kind)?) } else { None },
            n_pos: s.n_pos(),
            n_neg: s.n_neg(),
            threshold,
        })
    }

    /// Same rule as [`success`], applied to the stored numbers.
    pub fn is_success(&self) -> bool {
        self.auc == 1.0 && self.accuracy == 1.0 && self.precision == 1.0 && self.recall == 1.0 && self.f1 == 1.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
