//! Dense symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix
//! square root built on it. Dimensions here are feature dimensions (tens to
//! low hundreds), where Jacobi is plenty fast and fully deterministic.

use ndarray::{Array1, Array2};

use crate::error::{CoreError, CoreResult};

/// Eigendecomposition of a symmetric matrix: returns (eigenvalues, V) with
/// columns of V the corresponding eigenvectors, `a ≈ V diag(λ) Vᵀ`.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let diag = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (diag, v)
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues below `-neg_tol` raise an indefinite-matrix error; negatives
/// within tolerance clamp to zero.
pub fn sqrtm_psd(a: &Array2<f64>, neg_tol: f64) -> CoreResult<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a);
    let mut roots = Array1::<f64>::zeros(vals.len());
    for (i, &l) in vals.iter().enumerate() {
        if l < -neg_tol {
            return Err(CoreError::IndefiniteMatrix(l));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    // V diag(√λ) Vᵀ
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[[i, j]] *= roots[j];
        }
    }
    Ok(scaled.dot(&vecs.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "linalg", &[n as u64]);
        let b = Array2::from_shape_fn((n, n), |_| r.gen::<f64>() * 2.0 - 1.0);
        &b + &b.t()
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        for n in [2usize, 5, 16] {
            let a = random_symmetric(n, 3);
            let (vals, vecs) = symmetric_eigen(&a);
            let mut lam = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                lam[[i, i]] = vals[i];
            }
            let rec = vecs.dot(&lam).dot(&vecs.t());
            for (x, y) in a.iter().zip(rec.iter()) {
                assert!((x - y).abs() < 1e-9, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        // PSD matrix from BᵀB.
        let mut r = rng::stream(9, "psd", &[]);
        let b = Array2::from_shape_fn((6, 6), |_| r.gen::<f64>() - 0.5);
        let a = b.t().dot(&b);
        let s = sqrtm_psd(&a, 1e-8).unwrap();
        let back = s.dot(&s);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        let mut a = Array2::<f64>::eye(3);
        a[[2, 2]] = -0.5;
        assert!(matches!(
            sqrtm_psd(&a, 1e-8),
            Err(CoreError::IndefiniteMatrix(_))
        ));
        // Tiny negatives clamp instead.
        let mut b = Array2::<f64>::eye(3);
        b[[2, 2]] = -1e-12;
        assert!(sqrtm_psd(&b, 1e-8).is_ok());
    }
}
