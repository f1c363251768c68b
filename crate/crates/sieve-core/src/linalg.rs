//! Small dense symmetric linear algebra in f64: covariance estimation,
//! Cholesky log-determinant, and Jacobi eigenvalues.

use crate::error::{Error, Result};

/// Column covariance matrix of row-major samples `[n, d]`, with the 1/(n-1)
/// normalization.
pub fn covariance(samples: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if n < 2 || samples.len() != n * d {
        return Err(Error::InvalidArg {
            op: "covariance",
            msg: format!("need >= 2 samples of dim {d}, got len {}", samples.len()),
        });
    }
    let mut mean = vec![0.0f64; d];
    for row in samples.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for row in samples.chunks_exact(d) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] *= norm;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok(cov)
}

/// log-determinant of a symmetric positive-definite matrix via Cholesky,
/// after adding `ridge` to the diagonal. Errors if a pivot is non-positive.
pub fn cholesky_logdet(matrix: &[f64], d: usize, ridge: f64) -> Result<f64> {
    assert_eq!(matrix.len(), d * d);
    let mut a = matrix.to_vec();
    for i in 0..d {
        a[i * d + i] += ridge;
    }
    let mut logdet = 0.0f64;
    for j in 0..d {
        let mut pivot = a[j * d + j];
        for k in 0..j {
            pivot -= a[j * d + k] * a[j * d + k];
        }
        if pivot <= 0.0 {
            return Err(Error::NotPositiveDefinite { row: j, pivot });
        }
        let ljj = pivot.sqrt();
        a[j * d + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / ljj;
        }
    }
    Ok(logdet)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending.
pub fn jacobi_eigenvalues(matrix: &[f64], d: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), d * d);
    let mut a = matrix.to_vec();
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_identity_pairs() {
        // samples: (1,0), (-1,0), (0,2), (0,-2) -> Cov = diag(2/3, 8/3)
        let s = vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0];
        let cov = covariance(&s, 4, 2).unwrap();
        assert!((cov[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((cov[3] - 8.0 / 3.0).abs() < 1e-12);
        assert!(cov[1].abs() < 1e-12);
    }

    #[test]
    fn logdet_of_diagonal() {
        let m = vec![4.0, 0.0, 0.0, 9.0];
        let ld = cholesky_logdet(&m, 2, 0.0).unwrap();
        assert!((ld - (36.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let m = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(matches!(
            cholesky_logdet(&m, 2, 1e-8),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1
        let m = vec![2.0, 1.0, 1.0, 2.0];
        let e = jacobi_eigenvalues(&m, 2);
        assert!((e[0] - 3.0).abs() < 1e-10);
        assert!((e[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_logdet_agreement_on_random_spd() {
        // A A^T + I is SPD; product of eigenvalues must match the Cholesky
        // determinant.
        let mut state = 1234u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as f64 / (1u64 << 24) as f64) - 0.5
        };
        let d = 5;
        let a: Vec<f64> = (0..d * d).map(|_| next()).collect();
        let mut spd = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                for k in 0..d {
                    acc += a[i * d + k] * a[j * d + k];
                }
                spd[i * d + j] = acc;
            }
        }
        let ld = cholesky_logdet(&spd, d, 0.0).unwrap();
        let eig = jacobi_eigenvalues(&spd, d);
        let ld_eig: f64 = eig.iter().map(|&e| e.ln()).sum();
        assert!((ld - ld_eig).abs() < 1e-8, "{ld} vs {ld_eig}");
    }
}
