//! Full SVD and Haar-orthogonal sampling.
//!
//! The decomposition itself is delegated to faer (sequential, pinned by the
//! lockfile); this wrapper fixes the remaining gauge freedom so factors are
//! deterministic: each column of `u` is flipped, together with its partner
//! column of `v`, so that its largest-magnitude entry is nonnegative.

use super::{clear_simd_upper_state, ensure_sequential_backend, gaussian_matrix, DenseMatrix, Rng};
use crate::error::{Error, Result};

/// Full factorization `m = u * diag_rect(s) * vᵀ`.
///
/// `u` is rows x rows, `v` is cols x cols, `s` has min(rows, cols) entries
/// in descending order, all nonnegative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

/// Full SVD with the deterministic sign convention.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    ensure_sequential_backend();
    let f = m.as_faer().svd();
    clear_simd_upper_state();
    let f = f.map_err(|_| Error::SvdNonConvergence)?;
    let mut u = DenseMatrix::from_faer(f.U());
    let mut v = DenseMatrix::from_faer(f.V());
    let sd = f.S().column_vector();
    let k = m.rows().min(m.cols());
    let s: Vec<f64> = (0..k).map(|i| sd[i]).collect();
    apply_sign_convention(&mut u, &mut v, k);
    Ok(SvdResult { u, s, v })
}

/// Thin factors (u: rows x k, v: cols x k, k = min) for polar maps; the
/// sign convention is irrelevant there because only `u vᵀ` is consumed.
pub(crate) fn thin_svd_factors(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    ensure_sequential_backend();
    let f = m.as_faer().thin_svd();
    clear_simd_upper_state();
    let f = f.map_err(|_| Error::SvdNonConvergence)?;
    let u = DenseMatrix::from_faer(f.U());
    let v = DenseMatrix::from_faer(f.V());
    let sd = f.S().column_vector();
    let k = m.rows().min(m.cols());
    let s: Vec<f64> = (0..k).map(|i| sd[i]).collect();
    Ok((u, s, v))
}

/// Flip signs so the largest-magnitude entry of each `u` column is
/// nonnegative (first index wins ties). Columns `0..k` flip their `v`
/// partner too; trailing basis-completion columns of either factor are
/// fixed independently by the same rule.
fn apply_sign_convention(u: &mut DenseMatrix, v: &mut DenseMatrix, k: usize) {
    for j in 0..u.cols() {
        if dominant_entry_negative(u, j) {
            negate_col(u, j);
            if j < k {
                negate_col(v, j);
            }
        }
    }
    for j in k..v.cols() {
        if dominant_entry_negative(v, j) {
            negate_col(v, j);
        }
    }
}

fn dominant_entry_negative(m: &DenseMatrix, j: usize) -> bool {
    let mut best = 0usize;
    let mut best_abs = m.get(0, j).abs();
    for i in 1..m.rows() {
        let a = m.get(i, j).abs();
        if a > best_abs {
            best_abs = a;
            best = i;
        }
    }
    m.get(best, j) < 0.0
}

fn negate_col(m: &mut DenseMatrix, j: usize) {
    for i in 0..m.rows() {
        let x = m.get(i, j);
        m.set(i, j, -x);
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// R-diagonal sign correction (without it, QR alone is not Haar).
pub fn haar_orthogonal(n: usize, rng: &mut Rng) -> DenseMatrix {
    assert!(n > 0, "zero-dimension matrix");
    ensure_sequential_backend();
    let g = gaussian_matrix(n, n, rng);
    let qr = g.as_faer().qr();
    let qf = qr.compute_Q();
    let rf = qr.R();
    let mut q = DenseMatrix::from_faer(qf.as_ref());
    for j in 0..n {
        if rf[(j, j)] < 0.0 {
            negate_col(&mut q, j);
        }
    }
    clear_simd_upper_state();
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::diag_rect;

    fn reconstruct(r: &SvdResult, rows: usize, cols: usize) -> DenseMatrix {
        let sd = diag_rect(&r.s, rows, cols);
        r.u.matmul(&sd).unwrap().matmul(&r.v.transpose()).unwrap()
    }

    fn assert_valid_svd(m: &DenseMatrix, r: &SvdResult) {
        assert_eq!(r.u.shape(), (m.rows(), m.rows()));
        assert_eq!(r.v.shape(), (m.cols(), m.cols()));
        assert_eq!(r.s.len(), m.rows().min(m.cols()));
        assert!(r.u.orthogonality_deviation() <= 1e-10, "u not orthogonal");
        assert!(r.v.orthogonality_deviation() <= 1e-10, "v not orthogonal");
        for w in r.s.windows(2) {
            assert!(w[0] >= w[1], "singular values not sorted");
        }
        assert!(r.s.iter().all(|&s| s >= 0.0));
        let recon = reconstruct(r, m.rows(), m.cols());
        let scale = m.frobenius_norm().max(1e-300);
        let err = recon.sub(m).unwrap().frobenius_norm() / scale;
        assert!(err <= 1e-12, "reconstruction error {err:.3e}");
        for j in 0..r.u.cols() {
            assert!(!super::dominant_entry_negative(&r.u, j), "sign convention");
        }
    }

    #[test]
    fn diagonal_matrix_recovers_exact_factors() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0]);
        assert_eq!(r.u, DenseMatrix::identity(2));
        assert_eq!(r.v, DenseMatrix::identity(2));
    }

    #[test]
    fn orthogonal_input_has_unit_spectrum() {
        let mut rng = Rng::from_seed(5);
        let o = haar_orthogonal(8, &mut rng);
        let r = svd(&o).unwrap();
        for &s in &r.s {
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert_valid_svd(&o, &r);
    }

    #[test]
    fn random_square_and_rectangular_shapes() {
        let mut rng = Rng::from_seed(17);
        for &(rows, cols) in &[(8usize, 8usize), (8, 1), (1, 8), (16, 4), (4, 16), (33, 7)] {
            for _ in 0..5 {
                let m = gaussian_matrix(rows, cols, &mut rng);
                let r = svd(&m).unwrap();
                assert_valid_svd(&m, &r);
            }
        }
    }

    #[test]
    fn rank_deficient_input_keeps_full_factors() {
        // diag(3, 0): the zero singular value still gets basis columns.
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.s[0], 3.0);
        assert!(r.s[1].abs() <= 1e-15);
        assert_valid_svd(&m, &r);
    }

    #[test]
    fn svd_is_deterministic() {
        let mut rng = Rng::from_seed(3);
        let m = gaussian_matrix(12, 5, &mut rng);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn haar_is_orthogonal_and_seed_dependent() {
        let mut rng = Rng::from_seed(9);
        let q = haar_orthogonal(8, &mut rng);
        assert!(q.orthogonality_deviation() <= 1e-12);
        let q1 = haar_orthogonal(8, &mut Rng::from_seed(10));
        let q2 = haar_orthogonal(8, &mut Rng::from_seed(10));
        assert_eq!(q1, q2);
        assert!(q.sub(&q1).unwrap().frobenius_norm() > 1e-3);
    }

    #[test]
    fn haar_one_by_one_is_a_sign() {
        let mut plus = 0;
        for seed in 0..64 {
            let q = haar_orthogonal(1, &mut Rng::from_seed(seed));
            let v = q.get(0, 0);
            assert!(v == 1.0 || v == -1.0, "got {v}");
            if v == 1.0 {
                plus += 1;
            }
        }
        // both signs occur
        assert!(plus > 8 && plus < 56, "plus={plus}");
    }

    #[test]
    fn haar_first_column_direction_is_not_biased() {
        // crude isotropy check: mean of first-column entries over seeds
        let n = 4;
        let mut acc = vec![0.0; n];
        let trials = 200;
        for seed in 0..trials {
            let q = haar_orthogonal(n, &mut Rng::from_seed(seed as u64));
            for i in 0..n {
                acc[i] += q.get(i, 0);
            }
        }
        for a in acc {
            assert!((a / trials as f64).abs() < 0.1, "biased column mean {a}");
        }
    }
}
