//! Dense symmetric eigenvalues (cyclic Jacobi) for covariance determinants.

use alloc::vec::Vec;

/// Eigenvalues of a symmetric row-major `n x n` matrix.
pub(crate) fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    let mut a: Vec<f64> = matrix.to_vec();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>();
    if scale == 0.0 {
        return alloc::vec![0.0; n];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
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
    (0..n).map(|i| a[i * n + i]).collect()
}

/// `ln det` of a symmetric PSD matrix after clamping eigenvalues at zero;
/// `-inf` when singular. Eigenvalues within rounding noise of zero (relative
/// to the largest) count as zero.
pub(crate) fn psd_log_det(matrix: &[f64], n: usize) -> f64 {
    let evs = symmetric_eigenvalues(matrix, n);
    let largest = evs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = largest * n as f64 * 16.0 * f64::EPSILON;
    let mut acc = 0.0;
    for ev in evs {
        if ev <= tol {
            return f64::NEG_INFINITY;
        }
        acc += libm::log(ev);
    }
    acc
}
