//! Sample-quality metrics: correctness score against an oracle recognizer,
//! Frechet distance between Gaussian feature fits, and the
//! inception-style diversity score.

use ndarray::{Array1, Array2, Array4};

use crate::error::{CoreError, CoreResult};
use crate::linalg::sqrtm_psd;

use super::classifier::ClassifierModel;

/// Fraction of synthetic samples whose oracle prediction matches the
/// conditioning category.
pub fn correctness_score(
    oracle: &ClassifierModel,
    images: &Array4<f32>,
    conditioned: &[usize],
) -> CoreResult<f64> {
    assert_eq!(images.dim().0, conditioned.len(), "one condition per sample");
    for &c in conditioned {
        if c >= oracle.covered.len() || !oracle.covered[c] {
            return Err(CoreError::CategoryNotCovered(c));
        }
    }
    if conditioned.is_empty() {
        return Ok(0.0);
    }
    let preds = oracle.predict(images);
    let correct = preds
        .iter()
        .zip(conditioned.iter())
        .filter(|(p, c)| p == c)
        .count();
    Ok(correct as f64 / conditioned.len() as f64)
}

/// Gaussian fit of a feature set: mean, covariance, sample count.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Fit from rows of features. Requires at least 2 rows; the covariance is
    /// the unbiased estimate.
    pub fn from_rows(features: &Array2<f32>) -> CoreResult<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(CoreError::DimensionMismatch(format!(
                "need at least 2 feature rows, got {n}"
            )));
        }
        let mut mean = Array1::<f64>::zeros(d);
        for row in features.rows() {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += f64::from(v);
            }
        }
        mean.mapv_inplace(|v| v / n as f64);
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in features.rows() {
            let centered: Vec<f64> = row
                .iter()
                .zip(mean.iter())
                .map(|(&v, &m)| f64::from(v) - m)
                .collect();
            for i in 0..d {
                for j in i..d {
                    cov[[i, j]] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[[i, j]] / (n - 1) as f64;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }
}

/// Diagonal ridge added to both covariances before the matrix square root.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Frechet distance between two Gaussian fits:
/// ‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^½).
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> CoreResult<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "feature dims {} vs {}",
            d,
            b.mean.len()
        )));
    }
    let mut cov_a = a.cov.clone();
    let mut cov_b = b.cov.clone();
    for i in 0..d {
        cov_a[[i, i]] += COVARIANCE_RIDGE;
        cov_b[[i, i]] += COVARIANCE_RIDGE;
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    // Tr((Σa Σb)^½) via the symmetric similar product S_a Σ_b S_a.
    let s_a = sqrtm_psd(&cov_a, 1e-8)?;
    let inner = s_a.dot(&cov_b).dot(&s_a);
    // Symmetrize against accumulation noise before the eigen solve.
    let inner = (&inner + &inner.t()) * 0.5;
    let root = sqrtm_psd(&inner, 1e-8)?;
    let tr_a: f64 = (0..d).map(|i| cov_a[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[[i, i]]).sum();
    let tr_root: f64 = (0..d).map(|i| root[[i, i]]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_root).max(0.0))
}

/// exp(mean KL(p(y|x) ‖ p̄)) over class-probability rows. At least 1; rows
/// must sum to 1 within 1e-5.
pub fn inception_style_score(probs: &Array2<f32>) -> CoreResult<f64> {
    const TOL: f64 = 1e-5;
    let (n, k) = probs.dim();
    if n == 0 {
        return Err(CoreError::InvalidRange("no probability rows".into()));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > TOL {
            return Err(CoreError::NonNormalizedRow { row: i, sum, tol: TOL });
        }
        if row.iter().any(|&v| v < 0.0) {
            return Err(CoreError::NonNormalizedRow { row: i, sum: -1.0, tol: TOL });
        }
    }
    let mut marginal = vec![0.0f64; k];
    for row in probs.rows() {
        for (m, &v) in marginal.iter_mut().zip(row.iter()) {
            *m += f64::from(v) / n as f64;
        }
    }
    let mut kl_sum = 0.0;
    for row in probs.rows() {
        for (j, &v) in row.iter().enumerate() {
            let p = f64::from(v);
            if p > 0.0 {
                kl_sum += p * (p.ln() - marginal[j].ln());
            }
        }
    }
    Ok((kl_sum / n as f64).exp().max(1.0))
}
