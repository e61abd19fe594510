//! Small dense linear algebra on square rank-2 tensors.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn square(a: &Tensor, op: &'static str) -> Result<usize> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(dim_err(op, a.shape(), &[r, r]));
    }
    Ok(r)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
///
/// Fails with [`Error::Degenerate`] when a pivot falls below `1e-12` times the
/// largest absolute entry.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "inverse")?;
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("singular matrix"));
    }
    let mut m = a.clone();
    let mut inv = Tensor::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| libm::fabs(m.get2(i, col)).total_cmp(&libm::fabs(m.get2(j, col))))
            .unwrap_or(col);
        let pv = m.get2(pivot, col);
        if libm::fabs(pv) <= 1e-12 * scale {
            return Err(Error::Degenerate("singular matrix"));
        }
        if pivot != col {
            for j in 0..n {
                let (x, y) = (m.get2(col, j), m.get2(pivot, j));
                m.set2(col, j, y);
                m.set2(pivot, j, x);
                let (x, y) = (inv.get2(col, j), inv.get2(pivot, j));
                inv.set2(col, j, y);
                inv.set2(pivot, j, x);
            }
        }
        for j in 0..n {
            m.set2(col, j, m.get2(col, j) / pv);
            inv.set2(col, j, inv.get2(col, j) / pv);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = m.get2(i, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                m.set2(i, j, m.get2(i, j) - factor * m.get2(col, j));
                inv.set2(i, j, inv.get2(i, j) - factor * inv.get2(col, j));
            }
        }
    }
    Ok(inv)
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "symmetrize")?;
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.set2(i, j, 0.5 * (a.get2(i, j) + a.get2(j, i)));
        }
    }
    Ok(out)
}

/// Frobenius norm of the antisymmetric part `(A − Aᵀ)/2`.
pub fn asymmetry(a: &Tensor) -> Result<f64> {
    let n = square(a, "asymmetry")?;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = 0.5 * (a.get2(i, j) - a.get2(j, i));
            s += d * d;
        }
    }
    Ok(libm::sqrt(s))
}

/// Eigenvalues of the symmetric part of `a`, ascending, by cyclic Jacobi sweeps.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<alloc::vec::Vec<f64>> {
    let n = square(a, "symmetric_eigenvalues")?;
    let mut m = symmetrize(a)?;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m.get2(i, j) * m.get2(i, j);
                }
            }
        }
        let total: f64 = m.data().iter().map(|v| v * v).sum();
        if off <= 1e-30 * total.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get2(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get2(q, q) - m.get2(p, p)) / (2.0 * apq);
                let t = theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.get2(k, p), m.get2(k, q));
                    m.set2(k, p, c * akp - s * akq);
                    m.set2(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.get2(p, k), m.get2(q, k));
                    m.set2(p, k, c * apk - s * aqk);
                    m.set2(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: alloc::vec::Vec<f64> = (0..n).map(|i| m.get2(i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Symmetric (to `1e-9`) with smallest eigenvalue `≥ −1e-9`.
pub fn is_psd(a: &Tensor) -> bool {
    match (asymmetry(a), symmetric_eigenvalues(a)) {
        (Ok(asym), Ok(eig)) => asym < 1e-9 && eig.first().is_some_and(|&e| e >= -1e-9),
        _ => false,
    }
}

pub fn trace(a: &Tensor) -> f64 {
    let n = a.shape()[0];
    (0..n).map(|i| a.get2(i, i)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn spd(seed: u64, n: usize) -> Tensor {
        let mut s = seed;
        let data: Vec<f64> = (0..n * n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        let a = Tensor::new(&[n, n], data).unwrap();
        a.matmul(&a.transpose().unwrap())
            .unwrap()
            .add(&Tensor::eye(n).scale(0.1))
            .unwrap()
    }

    #[test]
    fn inverse_round_trip() {
        for seed in 0..20 {
            let a = spd(seed, 5);
            let id = a.matmul(&inverse(&a).unwrap()).unwrap();
            assert!(id.max_abs_diff(&Tensor::eye(5)) < 1e-9);
        }
    }

    #[test]
    fn singular_is_rejected() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(inverse(&a), Err(Error::Degenerate(_))));
        assert!(inverse(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn eigenvalues_of_diagonal_and_rotated() {
        let d = Tensor::diag(&[3.0, -1.0, 2.0]);
        let e = symmetric_eigenvalues(&d).unwrap();
        assert_eq!(e, alloc::vec![-1.0, 2.0, 3.0]);
        let a = Tensor::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
        assert!(is_psd(&spd(9, 8)));
        assert!(!is_psd(&d));
    }
}
