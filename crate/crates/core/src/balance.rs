//! Per-batch confounder balancing.
//!
//! Each tanh feature column, binarized by sign, is treated in turn as a
//! binary "treatment". The balancing loss measures, for every such column,
//! how far the weighted means of the *remaining* columns differ between the
//! treated group and the control group, plus a ridge penalty that keeps the
//! weights from collapsing onto a few samples:
//!
//! ```text
//! loss(w) = sum_j || m_treated_j(w) - m_control_j(w) ||^2  +  alpha * ||w||^2
//! ```
//!
//! where `m_*_j` are the weighted means of all columns except `j` within the
//! two groups induced by column `j`. The weights are constrained to the
//! probability simplex and learned by projected gradient descent with a
//! backtracking line search, starting from uniform.
//!
//! A column whose indicator is constant has an empty treated or control arm;
//! its term is defined as zero and the column is reported as degenerate.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Tensor;

/// Effective group weights below this floor signal that the sample weights
/// have collapsed onto one arm of a treatment split.
const GROUP_WEIGHT_FLOOR: f64 = 1e-12;

/// Smallest backtracking step before the line search gives up.
const STEP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BalanceError {
    #[error("feature batch needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature batch needs at least 1 feature, got 0")]
    NoFeatures,
    #[error("feature values must be finite and strictly inside (-1, 1); offending value {value} at ({row}, {col})")]
    FeatureOutOfRange { row: usize, col: usize, value: f64 },
    #[error("expected {expected} values for a {n}x{p} batch, got {actual}")]
    BadLength {
        n: usize,
        p: usize,
        expected: usize,
        actual: usize,
    },
    #[error("weights must be non-negative, got {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights must sum to 1 within 1e-9, off by {0:.3e}")]
    NotNormalized(f64),
    #[error("weight vector must be non-empty")]
    EmptyWeights,
    #[error("weights/indicator shapes disagree with the feature batch")]
    DimensionMismatch,
    #[error("effective weight of the {arm} group for feature {column} fell below 1e-12; weights collapsed onto one arm")]
    WeightCollapse { column: usize, arm: &'static str },
    #[error("alpha must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("invalid solver config: {0}")]
    BadConfig(&'static str),
    #[error("projection input must be non-empty with finite entries")]
    BadProjectionInput,
}

/// An `n x p` matrix of extracted features, all strictly inside (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<Self, BalanceError> {
        if n < 2 {
            return Err(BalanceError::TooFewSamples(n));
        }
        if p == 0 {
            return Err(BalanceError::NoFeatures);
        }
        if values.len() != n * p {
            return Err(BalanceError::BadLength {
                n,
                p,
                expected: n * p,
                actual: values.len(),
            });
        }
        for (idx, &v) in values.iter().enumerate() {
            if !v.is_finite() || v <= -1.0 || v >= 1.0 {
                return Err(BalanceError::FeatureOutOfRange {
                    row: idx / p,
                    col: idx % p,
                    value: v,
                });
            }
        }
        Ok(Self { n, p, values })
    }

    /// Wraps the `[n, p]` output of a tanh feature layer.
    pub fn from_tensor(t: &Tensor) -> Result<Self, BalanceError> {
        Self::new(t.rows(), t.row_len(), t.data().to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.p + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Binary treatment-status matrix derived from a feature batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    n: usize,
    p: usize,
    ones: Vec<bool>,
    /// Columns whose indicator is constant across the batch.
    degenerate_columns: BTreeSet<usize>,
}

impl IndicatorMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Treatment status of sample `row` when column `col` is the treatment.
    #[inline]
    pub fn treated(&self, row: usize, col: usize) -> bool {
        self.ones[row * self.p + col]
    }

    pub fn degenerate_columns(&self) -> &BTreeSet<usize> {
        &self.degenerate_columns
    }
}

/// `I[i][j] = 1` iff feature `(i, j)` is strictly positive. Exact zeros land
/// in the control group; tanh features are sign-symmetric around zero, so
/// ties at exactly 0.0 carry no information.
pub fn binarize_features(f: &FeatureBatch) -> IndicatorMatrix {
    let (n, p) = (f.n, f.p);
    let mut ones = vec![false; n * p];
    for (slot, &v) in ones.iter_mut().zip(&f.values) {
        *slot = v > 0.0;
    }
    let mut degenerate = BTreeSet::new();
    for j in 0..p {
        let first = ones[j];
        if (1..n).all(|i| ones[i * p + j] == first) {
            degenerate.insert(j);
        }
    }
    IndicatorMatrix {
        n,
        p,
        ones,
        degenerate_columns: degenerate,
    }
}

/// A simplex-constrained sample weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    w: Vec<f64>,
}

impl SampleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, BalanceError> {
        if w.is_empty() {
            return Err(BalanceError::EmptyWeights);
        }
        if let Some((index, &value)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(BalanceError::NegativeWeight { index, value });
        }
        let gap = math::abs(w.iter().sum::<f64>() - 1.0);
        if gap > 1e-9 {
            return Err(BalanceError::NotNormalized(gap));
        }
        Ok(Self { w })
    }

    pub fn uniform(n: usize) -> Result<Self, BalanceError> {
        if n == 0 {
            return Err(BalanceError::EmptyWeights);
        }
        Ok(Self {
            w: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

/// Hyperparameters of the inner weight solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// Ridge coefficient on the weights; large values pull toward uniform.
    pub alpha: f64,
    /// Gradient step before backtracking.
    pub step_size: f64,
    /// Iteration cap for the projected descent loop.
    pub max_iters: usize,
    /// Stop once the relative loss improvement falls below this.
    pub rel_tol: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            alpha: 1e3,
            step_size: 0.1,
            max_iters: 200,
            rel_tol: 1e-6,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<(), BalanceError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(BalanceError::BadAlpha(self.alpha));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(BalanceError::BadConfig("step_size must be positive"));
        }
        if self.max_iters == 0 {
            return Err(BalanceError::BadConfig("max_iters must be positive"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(BalanceError::BadConfig("rel_tol must be positive"));
        }
        Ok(())
    }
}

fn check_inputs(
    f: &FeatureBatch,
    ind: &IndicatorMatrix,
    w: &SampleWeights,
    alpha: f64,
) -> Result<(), BalanceError> {
    if ind.n != f.n || ind.p != f.p || w.len() != f.n {
        return Err(BalanceError::DimensionMismatch);
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(BalanceError::BadAlpha(alpha));
    }
    Ok(())
}

/// Weighted means of all columns except `j`, over the treated and control
/// groups induced by column `j`. Returns `(m_treated, m_control)` laid out
/// over the `p - 1` remaining columns in order.
fn group_means(
    f: &FeatureBatch,
    ind: &IndicatorMatrix,
    w: &[f64],
    j: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64), BalanceError> {
    let (n, p) = (f.n, f.p);
    let mut s_treated = 0.0;
    let mut s_control = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        if ind.treated(i, j) {
            s_treated += wi;
        } else {
            s_control += wi;
        }
    }
    if s_treated < GROUP_WEIGHT_FLOOR {
        return Err(BalanceError::WeightCollapse {
            column: j,
            arm: "treated",
        });
    }
    if s_control < GROUP_WEIGHT_FLOOR {
        return Err(BalanceError::WeightCollapse {
            column: j,
            arm: "control",
        });
    }
    let mut m_treated = vec![0.0; p - 1];
    let mut m_control = vec![0.0; p - 1];
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let target = if ind.treated(i, j) {
            &mut m_treated
        } else {
            &mut m_control
        };
        let row = &f.values[i * p..(i + 1) * p];
        let mut q = 0;
        for (col, &v) in row.iter().enumerate() {
            if col == j {
                continue;
            }
            target[q] += wi * v;
            q += 1;
        }
    }
    for v in &mut m_treated {
        *v /= s_treated;
    }
    for v in &mut m_control {
        *v /= s_control;
    }
    Ok((m_treated, m_control, s_treated, s_control))
}

/// The batch confounder-balancing loss at weights `w`.
pub fn balance_loss(
    f: &FeatureBatch,
    ind: &IndicatorMatrix,
    w: &SampleWeights,
    alpha: f64,
) -> Result<f64, BalanceError> {
    check_inputs(f, ind, w, alpha)?;
    let ws = w.as_slice();
    let mut loss = 0.0;
    for j in 0..f.p {
        if ind.degenerate_columns.contains(&j) {
            continue;
        }
        let (m_t, m_c, _, _) = group_means(f, ind, ws, j)?;
        for (t, c) in m_t.iter().zip(&m_c) {
            let d = t - c;
            loss += d * d;
        }
    }
    loss += alpha * ws.iter().map(|v| v * v).sum::<f64>();
    Ok(loss)
}

/// Exact gradient of [`balance_loss`] with respect to `w`, ignoring the
/// simplex constraint (the projection handles feasibility).
///
/// For one treatment column with imbalance vector `d = m_t - m_c`, the
/// derivative of `||d||^2` in `w_i` follows from differentiating the
/// weighted means: a treated sample contributes
/// `2 d . (row_i - m_t) / s_t`, a control sample `-2 d . (row_i - m_c) / s_c`.
pub fn balance_loss_grad(
    f: &FeatureBatch,
    ind: &IndicatorMatrix,
    w: &SampleWeights,
    alpha: f64,
) -> Result<Vec<f64>, BalanceError> {
    check_inputs(f, ind, w, alpha)?;
    let (n, p) = (f.n, f.p);
    let ws = w.as_slice();
    let mut grad = vec![0.0; n];
    for j in 0..p {
        if ind.degenerate_columns.contains(&j) {
            continue;
        }
        let (m_t, m_c, s_t, s_c) = group_means(f, ind, ws, j)?;
        let d: Vec<f64> = m_t.iter().zip(&m_c).map(|(t, c)| t - c).collect();
        for i in 0..n {
            let row = &f.values[i * p..(i + 1) * p];
            let treated = ind.treated(i, j);
            let (mean, scale) = if treated {
                (&m_t, 2.0 / s_t)
            } else {
                (&m_c, -2.0 / s_c)
            };
            let mut dot = 0.0;
            let mut q = 0;
            for (col, &v) in row.iter().enumerate() {
                if col == j {
                    continue;
                }
                dot += d[q] * (v - mean[q]);
                q += 1;
            }
            grad[i] += scale * dot;
        }
    }
    for (g, &wi) in grad.iter_mut().zip(ws) {
        *g += 2.0 * alpha * wi;
    }
    Ok(grad)
}

/// Euclidean projection onto the probability simplex via the classic
/// sort-and-threshold rule: with entries sorted in decreasing order, find the
/// largest prefix whose running average leaves every member positive after
/// shifting, and clip the rest to zero.
pub fn project_simplex(v: &[f64]) -> Result<SampleWeights, BalanceError> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(BalanceError::BadProjectionInput);
    }
    let n = v.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("entries are finite"));
    let mut prefix = 0.0;
    let mut tau = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        prefix += u;
        let candidate = (prefix - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut w = vec![0.0; n];
    let mut sum = 0.0;
    for (wi, &vi) in w.iter_mut().zip(v) {
        *wi = (vi - tau).max(0.0);
        sum += *wi;
    }
    // Rounding can leave the sum a few ulps off 1; rescale to stay within
    // the simplex tolerance of downstream checks.
    if sum > 0.0 && sum != 1.0 {
        for wi in &mut w {
            *wi /= sum;
        }
    }
    SampleWeights::new(w)
}

/// Learns simplex-constrained weights minimizing the balancing loss by
/// projected gradient descent from a uniform start. Returns the weights and
/// the (non-increasing) loss trace, whose first entry is the loss at uniform.
///
/// Backtracking halves the step until the candidate does not increase the
/// loss; candidates whose loss is undefined because the weights collapsed
/// onto one arm are treated the same as ascent and rejected.
pub fn optimize_weights(
    f: &FeatureBatch,
    cfg: &BalanceConfig,
) -> Result<(SampleWeights, Vec<f64>), BalanceError> {
    cfg.validate()?;
    let ind = binarize_features(f);
    let mut w = SampleWeights::uniform(f.n)?;
    let mut loss = balance_loss(f, &ind, &w, cfg.alpha)?;
    let mut trace = vec![loss];

    for _ in 0..cfg.max_iters {
        let grad = balance_loss_grad(f, &ind, &w, cfg.alpha)?;
        let mut step = cfg.step_size;
        let mut accepted: Option<(SampleWeights, f64)> = None;
        loop {
            let moved: Vec<f64> = w
                .as_slice()
                .iter()
                .zip(&grad)
                .map(|(wi, gi)| wi - step * gi)
                .collect();
            let candidate = project_simplex(&moved)?;
            if let Ok(candidate_loss) = balance_loss(f, &ind, &candidate, cfg.alpha) {
                if candidate_loss <= loss {
                    accepted = Some((candidate, candidate_loss));
                    break;
                }
            }
            if step <= STEP_FLOOR {
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_loss)) = accepted else {
            break;
        };
        let improvement = (loss - next_loss) / math::abs(loss).max(1e-12);
        w = next;
        loss = next_loss;
        trace.push(loss);
        if improvement < cfg.rel_tol {
            break;
        }
    }
    Ok((w, trace))
}

#[cfg(test)]
mod tests;
