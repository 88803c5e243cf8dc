//! Distribution-shift and classification metrics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("feature sets must be non-empty")]
    EmptyInput,
    #[error("feature sets have different widths: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("dimension {dim} is constant across both sets but the means differ by {gap:.3e}; the normalized shift is undefined")]
    ConstantDimensionShift { dim: usize, gap: f64 },
    #[error("sequences have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequences must be non-empty")]
    EmptySequence,
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("{0} input has zero variance")]
    ZeroVariance(&'static str),
}

/// Per-class shift index values produced by one feature extractor.
///
/// The raw numbers are only comparable when the extractor is held fixed, so
/// every report carries a tag identifying which extractor produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NIReport {
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
    pub extractor_id: String,
}

impl NIReport {
    pub fn new(per_class: BTreeMap<String, f64>, extractor_id: String) -> Self {
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        Self {
            per_class,
            mean,
            extractor_id,
        }
    }

    pub fn min(&self) -> f64 {
        self.per_class.values().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.per_class
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Degree of distribution shift between two feature sets: the 2-norm of the
/// per-dimension difference of means, normalized by the population standard
/// deviation over the pooled samples.
///
/// A dimension that is constant across the pool contributes zero when the
/// means agree (an uninformative dimension should not poison the index) and
/// is an error when they do not, since no normalization scale exists.
pub fn ni_index(train_features: &Tensor, test_features: &Tensor) -> Result<f64, MetricsError> {
    let p = train_features.row_len();
    if p != test_features.row_len() {
        return Err(MetricsError::WidthMismatch(p, test_features.row_len()));
    }
    let n1 = train_features.rows();
    let n2 = test_features.rows();
    if train_features.is_empty() || test_features.is_empty() {
        return Err(MetricsError::EmptyInput);
    }

    let mut sum_sq = 0.0;
    for d in 0..p {
        let mut mean1 = 0.0;
        for i in 0..n1 {
            mean1 += train_features.row(i)[d];
        }
        mean1 /= n1 as f64;
        let mut mean2 = 0.0;
        for i in 0..n2 {
            mean2 += test_features.row(i)[d];
        }
        mean2 /= n2 as f64;

        let total = (n1 + n2) as f64;
        let mut pooled_mean = 0.0;
        for i in 0..n1 {
            pooled_mean += train_features.row(i)[d];
        }
        for i in 0..n2 {
            pooled_mean += test_features.row(i)[d];
        }
        pooled_mean /= total;
        let mut var = 0.0;
        for i in 0..n1 {
            let c = train_features.row(i)[d] - pooled_mean;
            var += c * c;
        }
        for i in 0..n2 {
            let c = test_features.row(i)[d] - pooled_mean;
            var += c * c;
        }
        let sigma = math::sqrt(var / total);

        let gap = mean1 - mean2;
        if sigma < 1e-12 {
            if math::abs(gap) < 1e-12 {
                continue;
            }
            return Err(MetricsError::ConstantDimensionShift {
                dim: d,
                gap: math::abs(gap),
            });
        }
        let delta = gap / sigma;
        sum_sq += delta * delta;
    }
    Ok(math::sqrt(sum_sq))
}

/// Fraction of positions where the predicted class matches the actual one.
pub fn accuracy(predicted: &[usize], actual: &[usize]) -> Result<f64, MetricsError> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let hits = predicted
        .iter()
        .zip(actual)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mean_x;
        let dy = yi - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricsError::ZeroVariance("first"));
    }
    if var_y == 0.0 {
        return Err(MetricsError::ZeroVariance("second"));
    }
    Ok(cov / math::sqrt(var_x * var_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn ni_identical_sets_is_exactly_zero() {
        let a = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.9, 0.4, -0.7, 0.1]).unwrap();
        assert_eq!(ni_index(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ni_one_dimensional_worked_example() {
        // means 1 and 3; pooled {0,2,2,4} has population sigma sqrt(2)
        let train = column(&[0.0, 2.0]);
        let test = column(&[2.0, 4.0]);
        let ni = ni_index(&train, &test).unwrap();
        assert!((ni - core::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn ni_constant_dimension_contributes_zero() {
        let train = Tensor::new(vec![2, 2], vec![5.0, 0.0, 5.0, 2.0]).unwrap();
        let test = Tensor::new(vec![2, 2], vec![5.0, 2.0, 5.0, 4.0]).unwrap();
        // first dimension constant at 5 on both sides, second matches the 1-d example
        let ni = ni_index(&train, &test).unwrap();
        assert!((ni - core::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn ni_constant_dimension_with_shift_errors() {
        let train = column(&[1.0, 1.0]);
        let test = column(&[2.0, 2.0]);
        assert!(matches!(
            ni_index(&train, &test),
            Err(MetricsError::ConstantDimensionShift { dim: 0, .. })
        ));
    }

    #[test]
    fn ni_is_symmetric() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.5, -0.3, 0.2]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.4, -0.1, 0.2, 0.2, -0.5, 0.9]).unwrap();
        assert_eq!(ni_index(&a, &b).unwrap(), ni_index(&b, &a).unwrap());
    }

    #[test]
    fn ni_scale_invariance() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.5, -0.3, 0.2]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.4, -0.1, 0.2, 0.2, -0.5, 0.9]).unwrap();
        let scale = |t: &Tensor, c: f64| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * c).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let base = ni_index(&a, &b).unwrap();
        for c in [2.0, -3.5, 0.25] {
            let scaled = ni_index(&scale(&a, c), &scale(&b, c)).unwrap();
            assert!((scaled - base).abs() < 1e-9, "scale {c}: {scaled} vs {base}");
        }
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
        assert!(matches!(accuracy(&[], &[]), Err(MetricsError::EmptySequence)));
    }

    #[test]
    fn pearson_perfect_lines() {
        let x = [1.0, 2.0, 5.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_constant_input() {
        let x = [3.0, 3.0, 3.0];
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&x, &y),
            Err(MetricsError::ZeroVariance("first"))
        ));
    }
}
