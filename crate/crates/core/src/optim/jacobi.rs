//! Cyclic Jacobi eigensolver for dense symmetric matrices.
//!
//! Sufficient for the covariance sizes that arise here (up to the network
//! width). Eigenvalues come back sorted descending with matching eigenvector
//! columns.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JacobiError {
    #[error("jacobi sweep limit reached (off-diagonal {off:.3e} > tol {tol:.3e})")]
    NoConvergence { off: f64, tol: f64 },
    #[error("matrix must be square and symmetric")]
    NotSymmetric,
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s += a[(p, q)] * a[(p, q)];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition `A = V diag(w) V^T` by cyclic Jacobi rotations.
///
/// `tol` is relative to the Frobenius norm; hitting `max_sweeps` without
/// reaching it is reported as an error so callers can keep a previous basis.
pub fn jacobi_eigen(
    a: &Array2<f64>,
    max_sweeps: usize,
    tol: f64,
) -> Result<(Vec<f64>, Array2<f64>), JacobiError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(JacobiError::NotSymmetric);
    }
    let mut m = a.clone();
    let mut v = Array2::eye(n);
    let fro = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let threshold = tol * fro;

    for _ in 0..max_sweeps {
        if off_diagonal_norm(&m) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= threshold / (n as f64) {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let off = off_diagonal_norm(&m);
    if off > threshold {
        return Err(JacobiError::NoConvergence { off, tol: threshold });
    }

    // Sort descending by eigenvalue, carrying the eigenvector columns.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new_col)] = v[(k, old_col)];
        }
    }
    Ok((eigenvalues, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn two_by_two_matches_closed_form() {
        // Symmetric [[a, b], [b, d]]: closed-form eigenpairs.
        let (a, b, d) = (3.0, 1.5, -2.0);
        let mat = array![[a, b], [b, d]];
        let (w, v) = jacobi_eigen(&mat, 20, 1e-12).unwrap();
        let mean = (a + d) / 2.0;
        let disc = (((a - d) / 2.0).powi(2) + b * b).sqrt();
        assert_relative_eq!(w[0], mean + disc, epsilon = 1e-10);
        assert_relative_eq!(w[1], mean - disc, epsilon = 1e-10);
        // Eigenvector of w[0], up to sign: direction (b, w0 - a).
        let dir = [b, w[0] - a];
        let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let expect = [dir[0] / norm, dir[1] / norm];
        let got = [v[(0, 0)], v[(1, 0)]];
        let sign = if got[0] * expect[0] + got[1] * expect[1] < 0.0 {
            -1.0
        } else {
            1.0
        };
        assert_relative_eq!(got[0], sign * expect[0], epsilon = 1e-8);
        assert_relative_eq!(got[1], sign * expect[1], epsilon = 1e-8);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let n = 24;
        let mut rng = crate::rng::seeded_rng(5, 0);
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x = rng.gen_range(-1.0..1.0);
                a[(i, j)] = x;
                a[(j, i)] = x;
            }
        }
        let (w, v) = jacobi_eigen(&a, 20, 1e-10).unwrap();
        // V^T V = I to 1e-8.
        let vtv = v.t().dot(&v);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[(i, j)] - expect).abs() < 1e-8);
            }
        }
        // A V = V diag(w).
        let av = a.dot(&v);
        for j in 0..n {
            for i in 0..n {
                assert_relative_eq!(av[(i, j)], w[j] * v[(i, j)], epsilon = 1e-7);
            }
        }
        // Descending order.
        for pair in w.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }
}
