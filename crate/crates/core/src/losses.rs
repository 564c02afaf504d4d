//! Training objectives over a batch of query/document embeddings.
//!
//! Both losses are recorded on a [`Graph`] so their gradients flow back to
//! the encoder. Negative mining reads the forward values, picks negatives
//! without gradient, and feeds the choice into the graph as a constant
//! `[B, B]` selection matrix `S`; the negative of anchor `j` is row `j` of
//! `S · D`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Real, Tensor, TensorError};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("unknown distance metric `{0}` (expected l1, l2 or cosine)")]
    UnknownMetric(String),
    #[error("unknown mining strategy `{0}` (expected batch_all, hard, semi_hard or random)")]
    UnknownStrategy(String),
    #[error("in-batch mining needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("label {0} is not 0 or 1")]
    BadLabel(f64),
    #[error("{0} labels for a batch of {1}")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
    Cosine,
}

impl FromStr for Metric {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(LossError::UnknownMetric(s.to_string())),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BatchAll,
    Hard,
    SemiHard,
    Random,
}

impl FromStr for Strategy {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_all" => Ok(Strategy::BatchAll),
            "hard" => Ok(Strategy::Hard),
            "semi_hard" => Ok(Strategy::SemiHard),
            "random" => Ok(Strategy::Random),
            _ => Err(LossError::UnknownStrategy(s.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::BatchAll => "batch_all",
            Strategy::Hard => "hard",
            Strategy::SemiHard => "semi_hard",
            Strategy::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub metric: Metric,
    pub strategy: Strategy,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            metric: Metric::L1,
            strategy: Strategy::SemiHard,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(LossError::BadMargin(self.margin));
        }
        Ok(())
    }
}

/// `max(0, qᵀd)`.
pub fn clamped_cosine(q: &[f64], d: &[f64]) -> f64 {
    q.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().max(0.0)
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
    }
}

/// `[B, B]` matrix with entry `(j, k) = dist(Q_j, D_k)`.
pub fn pairwise_distances<T: Real>(q: &Tensor<T>, d: &Tensor<T>, metric: Metric) -> Tensor<f64> {
    let (bq, bd) = (q.rows(), d.rows());
    let rows: Vec<Vec<f64>> = (0..bq).map(|j| q.row_slice(j).iter().map(|x| x.as_f64()).collect()).collect();
    let cols: Vec<Vec<f64>> = (0..bd).map(|k| d.row_slice(k).iter().map(|x| x.as_f64()).collect()).collect();
    let mut out = Vec::with_capacity(bq * bd);
    for r in &rows {
        for c in &cols {
            // Cosine distance of unit vectors can dip a hair below 0.
            out.push(distance(r, c, metric).max(0.0));
        }
    }
    Tensor::new(vec![bq, bd], out).expect("shape")
}

/// Negative chosen for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Negative {
    /// A single in-batch document.
    Single(usize),
    /// Mean of the embeddings of these documents (batch-all).
    Mean(Vec<usize>),
    /// No usable negative; the anchor is left out of the loss.
    Skip,
}

fn argmin_excluding(row: &[f64], j: usize, keep: impl Fn(usize, f64) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in row.iter().enumerate() {
        if k == j || !keep(k, v) {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Picks the negative for anchor `j` from a precomputed distance matrix.
/// Ties go to the lowest index. `rng` is only drawn from by `Random`.
pub fn mine_negative<R: Rng>(strategy: Strategy, j: usize, dist: &Tensor<f64>, margin: f64, rng: &mut R) -> Result<Negative> {
    let b = dist.rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let row = dist.row_slice(j);
    let pos = row[j];
    Ok(match strategy {
        Strategy::BatchAll => {
            let set: Vec<usize> = (0..b).filter(|&k| k != j && row[k] <= pos + margin).collect();
            if set.is_empty() {
                Negative::Skip
            } else {
                Negative::Mean(set)
            }
        }
        Strategy::Hard => Negative::Single(argmin_excluding(row, j, |_, _| true).expect("b >= 2")),
        Strategy::SemiHard => {
            let k = argmin_excluding(row, j, |_, v| v > pos).or_else(|| argmin_excluding(row, j, |_, _| true));
            Negative::Single(k.expect("b >= 2"))
        }
        Strategy::Random => {
            let k = rng.random_range(0..b - 1);
            Negative::Single(if k >= j { k + 1 } else { k })
        }
    })
}

/// Per-row distance between two `[B, M]` nodes, as a `[B, 1]` node.
pub fn row_distance<T: Real>(g: &mut Graph<'_, T>, a: NodeId, b: NodeId, metric: Metric) -> Result<NodeId> {
    Ok(match metric {
        Metric::L1 => {
            let diff = g.sub(a, b)?;
            let ad = g.abs(diff)?;
            g.row_sum(ad)?
        }
        Metric::L2 => {
            let diff = g.sub(a, b)?;
            let sq = g.mul(diff, diff)?;
            let s = g.row_sum(sq)?;
            g.sqrt(s)?
        }
        Metric::Cosine => {
            let p = g.mul(a, b)?;
            let dot = g.row_sum(p)?;
            let neg = g.scale(dot, -1.0)?;
            g.add_scalar(neg, 1.0)?
        }
    })
}

/// Mean binary cross-entropy of `ŷ = clamp(max(0, qᵀd), ε, 1 − ε)`.
pub fn cross_entropy_graph<T: Real>(g: &mut Graph<'_, T>, q: NodeId, d: NodeId, labels: &[f64]) -> Result<NodeId> {
    let b = g.value(q).rows();
    if labels.len() != b {
        return Err(LossError::LabelCount(labels.len(), b));
    }
    if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(LossError::BadLabel(*bad));
    }
    let p = g.mul(q, d)?;
    let dot = g.row_sum(p)?;
    let pos = g.relu(dot)?;
    let yhat = g.clamp(pos, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(yhat)?;
    let neg = g.scale(yhat, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_q = g.log(one_minus)?;
    let y = g.input(Tensor::new(vec![b, 1], labels.iter().map(|v| T::of(*v)).collect())?);
    let y_neg = g.scale(y, -1.0)?;
    let one_minus_y = g.add_scalar(y_neg, 1.0)?;
    let a = g.mul(y, log_p)?;
    let c = g.mul(one_minus_y, log_q)?;
    let s = g.add(a, c)?;
    let m = g.mean_all(s)?;
    Ok(g.scale(m, -1.0)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletStats {
    pub negatives: Vec<Negative>,
    pub active: usize,
    /// Every anchor was skipped; the loss is 0 and carries no gradient.
    pub all_skipped: bool,
}

/// Mines negatives for every anchor and records the mean hinge
/// `[dist(q_j, d_j) − dist(q_j, n_j) + α]₊` over non-skipped anchors.
pub fn triplet_graph<T: Real, R: Rng>(
    g: &mut Graph<'_, T>,
    q: NodeId,
    d: NodeId,
    cfg: &TripletConfig,
    rng: &mut R,
) -> Result<(NodeId, TripletStats)> {
    cfg.validate()?;
    let b = g.value(q).rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let dist = pairwise_distances(g.value(q), g.value(d), cfg.metric);
    let mut negatives = Vec::with_capacity(b);
    for j in 0..b {
        negatives.push(mine_negative(cfg.strategy, j, &dist, cfg.margin, rng)?);
    }
    let mut sel = vec![T::zero(); b * b];
    let mut mask = vec![T::zero(); b];
    for (j, n) in negatives.iter().enumerate() {
        match n {
            Negative::Single(k) => {
                sel[j * b + k] = T::one();
                mask[j] = T::one();
            }
            Negative::Mean(set) => {
                let w = T::of(1.0 / set.len() as f64);
                for &k in set {
                    sel[j * b + k] = w;
                }
                mask[j] = T::one();
            }
            Negative::Skip => {}
        }
    }
    let active = negatives.iter().filter(|n| **n != Negative::Skip).count();
    let stats = TripletStats {
        negatives,
        active,
        all_skipped: active == 0,
    };
    if active == 0 {
        let zero = g.input(Tensor::scalar(T::zero()));
        return Ok((zero, stats));
    }
    let s = g.input(Tensor::new(vec![b, b], sel)?);
    let neg = g.matmul(s, d)?;
    let dpos = row_distance(g, q, d, cfg.metric)?;
    let dneg = row_distance(g, q, neg, cfg.metric)?;
    let gap = g.sub(dpos, dneg)?;
    let gap = g.add_scalar(gap, cfg.margin)?;
    let hinge = g.relu(gap)?;
    let m = g.input(Tensor::new(vec![b, 1], mask)?);
    let masked = g.mul(hinge, m)?;
    let total = g.sum_all(masked)?;
    Ok((g.scale(total, 1.0 / active as f64)?, stats))
}

/// Cross-entropy of a batch, evaluated in `f64`.
pub fn cross_entropy_loss(q: &Tensor<f64>, d: &Tensor<f64>, labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (qn, dn) = (g.input(q.clone()), g.input(d.clone()));
    let out = cross_entropy_graph(&mut g, qn, dn, labels)?;
    Ok(g.value(out).item())
}

/// Triplet loss of a batch, evaluated in `f64`.
pub fn triplet_loss<R: Rng>(q: &Tensor<f64>, d: &Tensor<f64>, cfg: &TripletConfig, rng: &mut R) -> Result<(f64, TripletStats)> {
    let mut g = Graph::new();
    let (qn, dn) = (g.input(q.clone()), g.input(d.clone()));
    let (out, stats) = triplet_graph(&mut g, qn, dn, cfg, rng)?;
    Ok((g.value(out).item(), stats))
}

/// `Σ wᵢ · Lᵢ`.
pub fn multi_task_loss(task_losses: &[(f64, f64)]) -> f64 {
    task_losses.iter().map(|(l, w)| l * w).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn names_roundtrip() {
        for m in [Metric::L1, Metric::L2, Metric::Cosine] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        for s in [Strategy::BatchAll, Strategy::Hard, Strategy::SemiHard, Strategy::Random] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("manhattan".parse::<Metric>().is_err());
        assert!("easy".parse::<Strategy>().is_err());
    }

    #[test]
    fn clamped_cosine_cases() {
        assert_eq!(clamped_cosine(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(clamped_cosine(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        let q = [1.0, 0.0];
        let d = [0.37, (1.0f64 - 0.37 * 0.37).sqrt()];
        assert!((clamped_cosine(&q, &d) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_analytic_points() {
        // ŷ = 0.5 for both rows: loss = ln 2.
        let q = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let d = rows(&[&[0.5, 0.75f64.sqrt()], &[0.5, -(0.75f64.sqrt())]]);
        let l = cross_entropy_loss(&q, &d, &[1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = cross_entropy_loss(&q, &q, &[1.0, 1.0]).unwrap();
        assert!(perfect < 1e-6 && perfect >= 0.0);
        assert!(matches!(cross_entropy_loss(&q, &q, &[1.0, 0.5]), Err(LossError::BadLabel(_))));
        assert!(matches!(cross_entropy_loss(&q, &q, &[1.0]), Err(LossError::LabelCount(1, 2))));
    }

    #[test]
    fn distances_analytic() {
        let q = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l1 = pairwise_distances(&q, &q, Metric::L1);
        assert_eq!(l1.data(), &[0.0, 2.0, 2.0, 0.0]);
        let l2 = pairwise_distances(&q, &q, Metric::L2);
        assert!((l2.get(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l2.get(1, 1), 0.0);
        let cos = pairwise_distances(&q, &q, Metric::Cosine);
        assert_eq!(cos.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mining_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = Tensor::new(vec![2, 2], vec![0.1, 0.5, 0.3, 0.2]).unwrap();
        assert_eq!(mine_negative(Strategy::Hard, 0, &dist, 0.2, &mut rng).unwrap(), Negative::Single(1));
        // Negative at 0.5 > 0.1 + 0.2: easy, so batch-all skips.
        assert_eq!(mine_negative(Strategy::BatchAll, 0, &dist, 0.2, &mut rng).unwrap(), Negative::Skip);
        assert_eq!(mine_negative(Strategy::BatchAll, 1, &dist, 0.2, &mut rng).unwrap(), Negative::Mean(vec![0]));
        // No candidate farther than the positive: semi-hard falls back to hard.
        let dist = Tensor::new(vec![2, 2], vec![0.9, 0.5, 0.3, 0.2]).unwrap();
        assert_eq!(mine_negative(Strategy::SemiHard, 0, &dist, 0.2, &mut rng).unwrap(), Negative::Single(1));
        let one = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(mine_negative(Strategy::Hard, 0, &one, 0.2, &mut rng).is_err());
    }

    #[test]
    fn triplet_hinge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Positive and negative equidistant: loss = α.
        let q = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let d = rows(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let cfg = TripletConfig {
            margin: 0.3,
            metric: Metric::L1,
            strategy: Strategy::Hard,
        };
        let (l, s) = triplet_loss(&q, &d, &cfg, &mut rng).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        assert_eq!(s.active, 2);
        // Negatives far beyond the margin: loss 0.
        let q = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (l, _) = triplet_loss(&q, &q, &cfg, &mut rng).unwrap();
        assert_eq!(l, 0.0);
        // Batch-all with all easy negatives: every anchor skipped.
        let cfg = TripletConfig {
            strategy: Strategy::BatchAll,
            ..cfg
        };
        let (l, s) = triplet_loss(&q, &q, &cfg, &mut rng).unwrap();
        assert_eq!(l, 0.0);
        assert!(s.all_skipped);
        let bad = TripletConfig { margin: 0.0, ..cfg };
        assert!(matches!(triplet_loss(&q, &q, &bad, &mut rng), Err(LossError::BadMargin(_))));
    }

    #[test]
    fn multi_task_weighting() {
        assert_eq!(multi_task_loss(&[(1.7, 1.0)]), 1.7);
        assert_eq!(multi_task_loss(&[(1.0, 1.0), (2.0, 1.0)]), 3.0);
        assert_eq!(multi_task_loss(&[(4.0, 0.5), (1.0, 2.0)]), 4.0);
    }
}
