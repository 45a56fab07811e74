//! Contrastive objectives over softmax outputs.
//!
//! The main training objective scores a mini-batch against the banks: each
//! anchor's softmax output is pulled toward the stored predictions of its K
//! nearest neighbors (positive pairs) and pushed away from the stored
//! neighbor predictions of the remaining, unmasked batch members (negative
//! pairs):
//!
//! ```text
//! loss = (1/S) * sum_i ( alpha * sum_{b unmasked, h in N[b]} z_i . P[h]
//!                        -        sum_{j in N[i]}            z_i . P[j] )
//! ```
//!
//! `alpha` follows a decay schedule that tapers the negative term over
//! training, which counters the bias negative pairs introduce under class
//! imbalance. The similarity mask zeroes batch members that appear among an
//! anchor's direct or expanded neighbors, removing probable same-class
//! samples from the negative pool.
//!
//! Bank rows are constants: gradients flow only through the anchor rows of
//! `batch_probs`. Anchors without a bank entry (fraction mode) contribute
//! nothing.
//!
//! Two further objectives support testing and diagnostics: a multi-positive
//! noise-contrastive baseline, and the likelihood-ratio objective that the
//! main loss approximates, evaluated exactly over the stored samples.

use crate::banks::Banks;
use crate::error::{CacError, Result};
use crate::matrix::{dot, Matrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Negative-term decay: `alpha(iter) = (max_iter / (max_iter + iter))^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub beta: f64,
    /// Total optimizer steps planned for the run.
    pub max_iter: usize,
}

/// Evaluates the decay factor at an iteration count. Equal to 1 at
/// iteration 0 and nonincreasing afterwards; beta = 0 disables the decay.
pub fn decay_factor(iter: usize, schedule: &DecaySchedule) -> f64 {
    let max_iter = schedule.max_iter as f64;
    (max_iter / (max_iter + iter as f64)).powf(schedule.beta)
}

/// Which side of the objective is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    PosOnly,
    NegOnly,
    Full,
}

/// S x S batch mask: entry (i, j) = 1 when batch member j is a usable
/// negative for anchor i. The diagonal is structurally excluded and never
/// consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    size: usize,
    data: Vec<u8>,
}

impl MaskMatrix {
    /// The permissive mask: every off-diagonal pair is a usable negative.
    pub fn all_ones(size: usize) -> Self {
        let mut data = vec![1u8; size * size];
        for i in 0..size {
            data[i * size + i] = 0;
        }
        MaskMatrix { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.size + j]
    }

    /// True when batch member j participates in anchor i's negative pool.
    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        i != j && self.entry(i, j) == 1
    }

    fn zero(&mut self, i: usize, j: usize) {
        self.data[i * self.size + j] = 0;
    }

    /// Count of usable negatives across all anchors.
    pub fn open_pairs(&self) -> usize {
        (0..self.size)
            .map(|i| (0..self.size).filter(|&j| self.is_negative(i, j)).count())
            .sum()
    }
}

/// Builds the similarity mask for a batch: entry (i, j) is zeroed exactly
/// when batch member j's dataset index lies in anchor i's direct or
/// expanded neighbor set. Anchors without a bank entry exclude nothing.
pub fn build_similarity_mask(batch_indices: &[usize], banks: &Banks) -> Result<MaskMatrix> {
    let size = batch_indices.len();
    let mut mask = MaskMatrix::all_ones(size);
    for (i, &anchor) in batch_indices.iter().enumerate() {
        let Some(direct) = banks.neighbor_row(anchor) else {
            continue;
        };
        let mut excluded: BTreeSet<usize> = direct.iter().copied().collect();
        excluded.extend(banks.expanded_neighbors(anchor)?);
        for (j, idx) in batch_indices.iter().enumerate() {
            if i != j && excluded.contains(idx) {
                mask.zero(i, j);
            }
        }
    }
    Ok(mask)
}

/// Value, per-term split, decay factor, and gradient of the main objective.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// `alpha * negative_term - positive_term`, with the omitted term
    /// zeroed under `pos_only` / `neg_only`.
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub alpha: f64,
    /// Gradient w.r.t. `batch_probs`; bank rows are constants.
    pub grad_wrt_batch_probs: Matrix,
}

fn check_probability_rows(probs: &Matrix, what: &str) -> Result<()> {
    for r in 0..probs.rows() {
        let sum: f64 = probs.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CacError::Numeric(format!(
                "{what} row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// The neighborhood-pair contrastive loss for one mini-batch.
///
/// Positive pairs are the anchor's K bank neighbors; negative pairs are the
/// bank neighbors of every unmasked other batch member. Both sides are raw
/// dot products of softmax outputs, averaged over the batch. A batch row
/// whose unmasked negative pool is empty simply contributes no negative
/// term; this keeps short final batches trainable.
pub fn cac_loss(
    batch_probs: &Matrix,
    batch_indices: &[usize],
    banks: &Banks,
    mask: &MaskMatrix,
    alpha: f64,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let batch = batch_probs.rows();
    if batch_indices.len() != batch {
        return Err(CacError::Shape("batch indices do not align with probs".into()));
    }
    if mask.size() != batch {
        return Err(CacError::Shape("mask size does not match the batch".into()));
    }
    check_probability_rows(batch_probs, "batch probability")?;

    let scale = 1.0 / batch as f64;
    let classes = batch_probs.cols();
    let mut grad = Matrix::zeros(batch, classes);
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let (use_pos, use_neg) = match mode {
        LossMode::PosOnly => (true, false),
        LossMode::NegOnly => (false, true),
        LossMode::Full => (true, true),
    };

    for i in 0..batch {
        let anchor = batch_probs.row(i);

        if let Some(neighbors) = banks.neighbor_row(batch_indices[i]) {
            for &j in neighbors {
                let stored = banks.prediction_row(j).expect("neighbors are stored");
                pos_sum += dot(anchor, stored);
                if use_pos {
                    for (g, &p) in grad.row_mut(i).iter_mut().zip(stored) {
                        *g -= scale * p;
                    }
                }
            }
        }

        for b in 0..batch {
            if !mask.is_negative(i, b) {
                continue;
            }
            let Some(neighbors) = banks.neighbor_row(batch_indices[b]) else {
                continue;
            };
            for &h in neighbors {
                let stored = banks.prediction_row(h).expect("neighbors are stored");
                neg_sum += dot(anchor, stored);
                if use_neg {
                    for (g, &p) in grad.row_mut(i).iter_mut().zip(stored) {
                        *g += scale * alpha * p;
                    }
                }
            }
        }
    }

    let positive_term = if use_pos { scale * pos_sum } else { 0.0 };
    let negative_term = if use_neg { scale * neg_sum } else { 0.0 };
    let total = alpha * negative_term - positive_term;
    if !total.is_finite() {
        return Err(CacError::Numeric("contrastive loss diverged".into()));
    }
    Ok(LossBreakdown {
        total,
        positive_term,
        negative_term,
        alpha,
        grad_wrt_batch_probs: grad,
    })
}

/// Multi-positive noise-contrastive baseline.
///
/// For each anchor i and each bank neighbor j, scores the neighbor's stored
/// prediction against the anchor's other batch members:
///
/// ```text
/// -(1/S) sum_i sum_{j in N[i]} log( e^{z_i . P[j]}
///     / (sum_{b in batch, b != i, idx_b != j} e^{z_i . z_b} + e^{z_i . P[j]}) )
/// ```
///
/// Gradients flow through the anchor row and through the other batch rows
/// appearing in the denominators; bank rows stay constant.
pub fn multi_positive_nce(
    batch_probs: &Matrix,
    batch_indices: &[usize],
    banks: &Banks,
) -> Result<(f64, Matrix)> {
    let batch = batch_probs.rows();
    if batch_indices.len() != batch {
        return Err(CacError::Shape("batch indices do not align with probs".into()));
    }
    check_probability_rows(batch_probs, "batch probability")?;

    let classes = batch_probs.cols();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(batch, classes);

    for i in 0..batch {
        let anchor = batch_probs.row(i).to_vec();
        let Some(neighbors) = banks.neighbor_row(batch_indices[i]) else {
            continue;
        };
        let batch_dots: Vec<f64> = (0..batch)
            .map(|b| dot(&anchor, batch_probs.row(b)))
            .collect();

        for &j in neighbors {
            let positive = banks.prediction_row(j).expect("neighbors are stored");
            let pos_dot = dot(&anchor, positive);
            let pos_exp = pos_dot.exp();

            let mut denom = pos_exp;
            for b in 0..batch {
                if b != i && batch_indices[b] != j {
                    denom += batch_dots[b].exp();
                }
            }
            value += denom.ln() - pos_dot;

            // d/d z_i: -P[j] + (sum_b e^{d_b} z_b + e^{pos} P[j]) / denom
            for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g += (pos_exp / denom - 1.0) * positive[c];
            }
            for b in 0..batch {
                if b == i || batch_indices[b] == j {
                    continue;
                }
                let weight = batch_dots[b].exp() / denom;
                let other = batch_probs.row(b).to_vec();
                for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
                    *g += weight * other[c];
                }
                // d/d z_b: e^{d_b} / denom * z_i
                for (c, g) in grad.row_mut(b).iter_mut().enumerate() {
                    *g += weight * anchor[c];
                }
            }
        }
    }

    let scale = 1.0 / batch as f64;
    value *= scale;
    grad = grad.scale(scale);
    if !value.is_finite() {
        return Err(CacError::Numeric("nce loss diverged".into()));
    }
    Ok((value, grad))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The exact likelihood-ratio objective the contrastive loss approximates:
/// `-(1/S) sum_i log(P_same(i) / P_dis(i))`, where both likelihoods are
/// products of softmax-similarity ratios whose denominators range over all
/// stored samples. Desk-scale diagnostic only.
pub fn likelihood_ratio_objective(
    batch_probs: &Matrix,
    batch_indices: &[usize],
    banks: &Banks,
    mask: &MaskMatrix,
) -> Result<f64> {
    let batch = batch_probs.rows();
    if batch_indices.len() != batch || mask.size() != batch {
        return Err(CacError::Shape("batch pieces do not align".into()));
    }
    check_probability_rows(batch_probs, "batch probability")?;

    let mut total = 0.0;
    for i in 0..batch {
        let anchor = batch_probs.row(i);
        let Some(neighbors) = banks.neighbor_row(batch_indices[i]) else {
            continue;
        };

        let dots: Vec<f64> = banks
            .stored_indices()
            .iter()
            .filter(|&&q| q != batch_indices[i])
            .map(|&q| dot(anchor, banks.prediction_row(q).expect("stored")))
            .collect();
        let lse = log_sum_exp(&dots);

        let mut log_same = 0.0;
        for &j in neighbors {
            log_same += dot(anchor, banks.prediction_row(j).expect("stored")) - lse;
        }

        let mut log_dis = 0.0;
        for b in 0..batch {
            if !mask.is_negative(i, b) {
                continue;
            }
            let Some(neg_neighbors) = banks.neighbor_row(batch_indices[b]) else {
                continue;
            };
            for &h in neg_neighbors {
                log_dis += dot(anchor, banks.prediction_row(h).expect("stored")) - lse;
            }
        }

        total -= log_same - log_dis;
    }
    total /= batch as f64;
    if !total.is_finite() {
        return Err(CacError::Numeric(
            "likelihood-ratio objective diverged".into(),
        ));
    }
    Ok(total)
}
