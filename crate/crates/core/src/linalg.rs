//! Small dense linear algebra helpers: symmetric eigensolve by cyclic
//! Jacobi rotations, plus matrix products used by the metric head.

use crate::scalar::Scalar;

/// C = A·Bᵀ for row-major n×n matrices.
pub fn mul_abt<S: Scalar>(a: &[S], b: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = S::zero();
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A·B for row-major n×n matrices.
pub fn mul<S: Scalar>(a: &[S], b: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for p in 0..n {
            let aip = a[i * n + p];
            if aip == S::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

pub fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut m = vec![S::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = S::one();
    }
    m
}

/// Eigenvalues of a symmetric n×n matrix in non-increasing order,
/// via cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<S: Scalar>(matrix: &[S], n: usize) -> Vec<S> {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let tol = S::from_f64(1e-10);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = S::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * S::from_f64(1e-6) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (S::from_f64(2.0) * apq);
                let t = {
                    let sign = if theta >= S::zero() { S::one() } else { -S::one() };
                    sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    eigs
}
