//! Thin SVD by one-sided Jacobi rotations.
//!
//! Accurate to near machine precision for the moderate sizes this crate
//! needs (snapshot matrices, projection bases). Tall inputs are handled
//! directly; wide inputs go through the transpose.

use super::{Matrix, NumError};

/// Thin SVD `A = U diag(S) Vᵀ` with orthonormal columns in U and V and the
/// singular values sorted descending.
pub fn svd_thin(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), NumError> {
    a.check_finite()?;
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let (u, s, v) = svd_tall(&a.transpose())?;
        Ok((v, s, u))
    }
}

fn svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), NumError> {
    let m = a.rows();
    let n = a.cols();
    // Work on columns of A; accumulate right rotations into V.
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                // Jacobi rotation zeroing the (p,q) entry of WᵀW.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if off <= tol {
            break;
        }
    }

    // Column norms are the singular values; normalize W into U.
    let mut order: Vec<usize> = (0..n).collect();
    let mut sigma = vec![0.0; n];
    for j in 0..n {
        sigma[j] = (0..m).map(|i| w.get(i, j) * w.get(i, j)).sum::<f64>().sqrt();
    }
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    let scale = sigma.iter().cloned().fold(0.0, f64::max);
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = sigma[src];
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
        }
        if sigma[src] > scale * 1e-300 && sigma[src] > 0.0 {
            for i in 0..m {
                u.set(i, dst, w.get(i, src) / sigma[src]);
            }
        }
    }
    fill_null_columns(&mut u, &s_sorted, scale);
    Ok((u, s_sorted, v_sorted))
}

/// Replace U columns belonging to (numerically) zero singular values with an
/// orthonormal completion, so U always has orthonormal columns.
fn fill_null_columns(u: &mut Matrix, sigma: &[f64], scale: f64) {
    let m = u.rows();
    let n = u.cols();
    let cutoff = scale * 1e-300;
    for j in 0..n {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            continue;
        }
        // Gram-Schmidt a canonical basis vector against the kept columns.
        'candidates: for e in 0..m {
            let mut col = vec![0.0; m];
            col[e] = 1.0;
            for k in 0..n {
                if k == j {
                    continue;
                }
                let proj: f64 = (0..m).map(|i| u.get(i, k) * col[i]).sum();
                for i in 0..m {
                    col[i] -= proj * u.get(i, k);
                }
            }
            let norm = col.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for i in 0..m {
                    u.set(i, j, col[i] / norm);
                }
                break 'candidates;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{vec_norm, RngStream};

    fn reconstruct(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
        let us = Matrix::from_fn(u.rows(), s.len(), |i, j| u.get(i, j) * s[j]);
        us.matmul(&v.transpose())
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let (u, s, v) = svd_thin(&Matrix::identity(3)).unwrap();
        for &sv in &s {
            assert!((sv - 1.0).abs() < 1e-12);
        }
        let r = reconstruct(&u, &s, &v);
        assert!(r.sub(&Matrix::identity(3)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let uv = vec![1.0, -2.0, 0.5];
        let vv = vec![3.0, 1.0];
        let a = Matrix::from_fn(3, 2, |i, j| uv[i] * vv[j]);
        let (u, s, v) = svd_thin(&a).unwrap();
        assert!((s[0] - vec_norm(&uv) * vec_norm(&vv)).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        let r = reconstruct(&u, &s, &v);
        assert!(r.sub(&a).frobenius_norm() < 1e-12);
        // Orthonormality must hold even for the null column.
        let gram = u.transpose().matmul(&u);
        assert!(gram.sub(&Matrix::identity(2)).frobenius_norm() < 1e-10);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut stream = RngStream::new(5);
        for &(m, n) in &[(8usize, 5usize), (5, 8), (12, 12)] {
            let a = Matrix::from_fn(m, n, |_, _| stream.gaussian(0.0, 1.0));
            let (u, s, v) = svd_thin(&a).unwrap();
            let r = reconstruct(&u, &s, &v);
            let rel = r.sub(&a).frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-10, "residual {rel}");
            let k = m.min(n);
            let gu = u.transpose().matmul(&u).sub(&Matrix::identity(k)).frobenius_norm();
            let gv = v.transpose().matmul(&v).sub(&Matrix::identity(k)).frobenius_norm();
            assert!(gu < 1e-10 && gv < 1e-10, "orthonormality {gu} {gv}");
            for w in s.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }
}
