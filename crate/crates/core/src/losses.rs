//! Training losses and the competition metric.
//!
//! The three losses are graph builders so training can backpropagate
//! through them; thin value wrappers are provided for callers that only
//! need the number. AU detection combines a per-unit binary cross-entropy
//! (over sigmoid probabilities, with 1/12 normalization) and a circle loss
//! over the raw scores that pushes active scores up and inactive scores
//! down through a pair of stabilized log-sum-exp terms. Expression
//! recognition uses a soft-label cross-entropy with 1/8 normalization.

use crate::error::{CoreError, Result};
use crate::labels::{AU_COUNT, EXPR_COUNT};
use crate::tensor::{Graph, NodeId, Real};
use serde::{Deserialize, Serialize};

/// Clamp applied to probabilities before `log`.
pub const PROB_EPS: f64 = 1e-7;

/// Ground-truth AU activations for a batch, entries in {0, 1}.
#[derive(Debug, Clone)]
pub struct AuBatchLabels {
    pub rows: Vec<[u8; AU_COUNT]>,
}

impl AuBatchLabels {
    pub fn matrix<T: Real>(&self) -> Vec<T> {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|&b| T::from_f64(b as f64)))
            .collect()
    }
}

/// Expression targets for a batch: rows are distributions over the 8
/// classes (one-hot, or soft after remix).
#[derive(Debug, Clone)]
pub struct ExprBatchLabels {
    pub rows: Vec<[f64; EXPR_COUNT]>,
}

impl ExprBatchLabels {
    pub fn one_hot(classes: &[u8]) -> Result<Self> {
        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            if c as usize >= EXPR_COUNT {
                return Err(CoreError::contract(format!("class {} out of range", c)));
            }
            let mut row = [0.0f64; EXPR_COUNT];
            row[c as usize] = 1.0;
            rows.push(row);
        }
        Ok(ExprBatchLabels { rows })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) {
                return Err(CoreError::contract(format!("row {}: negative weight", i)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::contract(format!(
                    "row {}: weights sum to {}, expected 1",
                    i, s
                )));
            }
        }
        Ok(())
    }
}

fn check_batch_shape<T: Real>(
    g: &Graph<T>,
    node: NodeId,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<()> {
    if g.shape(node) != [rows, cols] {
        return Err(CoreError::contract(format!(
            "{}: expected shape [{}, {}], got {:?}",
            what,
            rows,
            cols,
            g.shape(node)
        )));
    }
    Ok(())
}

/// Mean over the batch of the per-sample AU cross-entropy
/// `-(1/12) sum_j [y_j log p_j + (1-y_j) log(1-p_j)]`, with probabilities
/// clamped to `[eps, 1-eps]`.
pub fn au_ce_loss<T: Real>(g: &mut Graph<T>, probs: NodeId, labels: &AuBatchLabels) -> Result<NodeId> {
    let b = labels.rows.len();
    check_batch_shape(g, probs, b, AU_COUNT, "au_ce_loss probabilities")?;
    let y = g.constant(&[b, AU_COUNT], labels.matrix())?;
    let y_neg: Vec<T> = labels
        .rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| T::from_f64(1.0 - v as f64)))
        .collect();
    let y_neg = g.constant(&[b, AU_COUNT], y_neg)?;

    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(p)?;
    let pos = g.mul(y, log_p)?;

    let neg_p = g.scale(probs, -1.0)?;
    let one_minus = g.add_scalar(neg_p, 1.0)?;
    let q = g.clamp(one_minus, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_q = g.log(q)?;
    let neg = g.mul(y_neg, log_q)?;

    let s = g.add(pos, neg)?;
    let m = g.mean_all(s)?;
    g.scale(m, -1.0)
}

/// Mean over the batch of
/// `log(1 + sum_{inactive} e^{s_i}) + log(1 + sum_{active} e^{-s_j})`
/// on the unscaled scores, with log-sum-exp stabilization.
pub fn au_circle_loss<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    labels: &AuBatchLabels,
) -> Result<NodeId> {
    let b = labels.rows.len();
    check_batch_shape(g, scores, b, AU_COUNT, "au_circle_loss scores")?;
    let active: Vec<T> = labels.matrix();
    let inactive: Vec<T> = active
        .iter()
        .map(|&v| T::one() - v)
        .collect();
    let m_active = g.constant(&[b, AU_COUNT], active)?;
    let m_inactive = g.constant(&[b, AU_COUNT], inactive)?;

    let term0 = g.log_sum_exp_zero_masked(scores, m_inactive)?;
    let neg_scores = g.scale(scores, -1.0)?;
    let term1 = g.log_sum_exp_zero_masked(neg_scores, m_active)?;
    let s = g.add(term0, term1)?;
    g.mean_all(s)
}

/// Mean over the batch of `-(1/8) sum_j z_j log zhat_j` (the 1/8
/// normalization is kept as written).
pub fn expr_ce_loss<T: Real>(
    g: &mut Graph<T>,
    probs: NodeId,
    labels: &ExprBatchLabels,
) -> Result<NodeId> {
    let b = labels.rows.len();
    check_batch_shape(g, probs, b, EXPR_COUNT, "expr_ce_loss probabilities")?;
    labels.validate()?;
    let z: Vec<T> = labels
        .rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| T::from_f64(v)))
        .collect();
    let z = g.constant(&[b, EXPR_COUNT], z)?;
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = g.log(p)?;
    let nll = g.mul(z, lp)?;
    let m = g.mean_all(nll)?;
    g.scale(m, -1.0)
}

// ---- value wrappers -------------------------------------------------------

fn run_scalar(f: impl FnOnce(&mut Graph<f64>) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let id = f(&mut g)?;
    g.scalar(id)
}

pub fn au_ce_value(probs: &[Vec<f64>], labels: &AuBatchLabels) -> Result<f64> {
    run_scalar(|g| {
        let b = probs.len();
        let flat: Vec<f64> = probs.iter().flatten().copied().collect();
        let p = g.leaf(&[b, AU_COUNT], flat)?;
        au_ce_loss(g, p, labels)
    })
}

pub fn au_circle_value(scores: &[Vec<f64>], labels: &AuBatchLabels) -> Result<f64> {
    run_scalar(|g| {
        let b = scores.len();
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let s = g.leaf(&[b, AU_COUNT], flat)?;
        au_circle_loss(g, s, labels)
    })
}

pub fn expr_ce_value(probs: &[Vec<f64>], labels: &ExprBatchLabels) -> Result<f64> {
    run_scalar(|g| {
        let b = probs.len();
        let flat: Vec<f64> = probs.iter().flatten().copied().collect();
        let p = g.leaf(&[b, EXPR_COUNT], flat)?;
        expr_ce_loss(g, p, labels)
    })
}

// ---- macro F1 ---------------------------------------------------------------

/// Per-class F1 scores plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_avg: f64,
    /// Positive-label count per class in the ground truth.
    pub support: Vec<usize>,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    // F1 = 2 tp / (2 tp + fp + fn); zero when precision + recall is zero
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// One-vs-rest macro F1 over integer class labels.
pub fn expr_macro_f1(preds: &[u8], labels: &[u8], class_count: usize) -> Result<F1Report> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(CoreError::contract(
            "macro_f1 requires equal, non-empty prediction and label lists",
        ));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    let mut support = vec![0usize; class_count];
    for (&p, &y) in preds.iter().zip(labels) {
        let (p, y) = (p as usize, y as usize);
        if p >= class_count || y >= class_count {
            return Err(CoreError::contract("class id out of range"));
        }
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..class_count)
        .map(|c| f1_from_counts(tp[c], fp[c], fn_[c]))
        .collect();
    let macro_avg = per_class.iter().sum::<f64>() / class_count as f64;
    Ok(F1Report {
        per_class,
        macro_avg,
        support,
    })
}

/// Per-unit binary F1 over AU bit vectors, averaged over the 12 units.
pub fn au_macro_f1(preds: &[[u8; AU_COUNT]], labels: &[[u8; AU_COUNT]]) -> Result<F1Report> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(CoreError::contract(
            "macro_f1 requires equal, non-empty prediction and label lists",
        ));
    }
    let mut tp = [0usize; AU_COUNT];
    let mut fp = [0usize; AU_COUNT];
    let mut fn_ = [0usize; AU_COUNT];
    let mut support = [0usize; AU_COUNT];
    for (p, y) in preds.iter().zip(labels) {
        for j in 0..AU_COUNT {
            support[j] += (y[j] == 1) as usize;
            match (p[j], y[j]) {
                (1, 1) => tp[j] += 1,
                (1, 0) => fp[j] += 1,
                (0, 1) => fn_[j] += 1,
                _ => {}
            }
        }
    }
    let per_class: Vec<f64> = (0..AU_COUNT)
        .map(|j| f1_from_counts(tp[j], fp[j], fn_[j]))
        .collect();
    let macro_avg = per_class.iter().sum::<f64>() / AU_COUNT as f64;
    Ok(F1Report {
        per_class,
        macro_avg,
        support: support.to_vec(),
    })
}
