//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition,
//! used by the Fréchet feature distance.

/// Eigenvalues and eigenvectors of a symmetric matrix (row-major `n x n`).
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns:
/// `a = v * diag(l) * v^T`. Cyclic Jacobi; plenty for feature-dim matrices.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for r in 0..n {
            for c in r + 1..n {
                off += m[r * n + c] * m[r * n + c];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}

/// `c = a * b` for row-major `n x n` matrices.
pub fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric positive square root via eigendecomposition, with an eigenvalue
/// floor. Returns `None` if an eigenvalue is too negative for flooring.
pub fn symmetric_sqrt(a: &[f64], n: usize, floor: f64, neg_tol: f64) -> Option<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut roots = Vec::with_capacity(n);
    for &l in &vals {
        if l < -neg_tol * max_abs {
            return None;
        }
        roots.push(l.max(floor).sqrt());
    }
    // v * diag(sqrt l) * v^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_standard_normal, substream};

    #[test]
    fn eigen_reconstructs_matrix() {
        let mut rng = substream(1, "linalg", 0);
        let n = 6;
        let mut g = vec![0.0; n * n];
        fill_standard_normal(&mut rng, &mut g);
        // symmetrize
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = 0.5 * (g[i * n + j] + g[j * n + i]);
            }
        }
        let (vals, vecs) = symmetric_eigen(&a, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += vecs[i * n + k] * vals[k] * vecs[j * n + k];
                }
                assert!((acc - a[i * n + j]).abs() < 1e-9, "at {i},{j}");
            }
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let a = vec![4.0, 0.0, 0.0, 9.0];
        let r = symmetric_sqrt(&a, 2, 1e-10, 1e-5).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-10);
        assert!((r[3] - 3.0).abs() < 1e-10);
        assert!(r[1].abs() < 1e-10);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = substream(2, "linalg", 0);
        let n = 5;
        let mut g = vec![0.0; n * n];
        fill_standard_normal(&mut rng, &mut g);
        // a = g g^T is PSD
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += g[i * n + k] * g[j * n + k];
                }
                a[i * n + j] = acc;
            }
        }
        let r = symmetric_sqrt(&a, n, 1e-12, 1e-6).unwrap();
        let sq = matmul_square(&r, &r, n);
        for i in 0..n * n {
            assert!((sq[i] - a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn strongly_negative_matrix_rejected() {
        let a = vec![-1.0, 0.0, 0.0, 2.0];
        assert!(symmetric_sqrt(&a, 2, 1e-10, 1e-5).is_none());
    }
}
