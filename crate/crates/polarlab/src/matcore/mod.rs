//! Dense matrix core: a row-major `f64` container plus the numerical
//! primitives everything else builds on (gemm, SVD, Haar sampling, seeded
//! streams, bf16 rounding).
//!
//! All heavy linear algebra is delegated to `faer`, pinned to sequential
//! execution so results are a pure function of the input bytes on a given
//! build. Everything downstream relies on that: repeated runs with the same
//! seed must reproduce output files byte for byte.

mod bf16;
mod rng;
mod svd;

pub use bf16::{round_bf16, round_bf16_matrix, BF16_MAX};
pub(crate) use bf16::round_bf16_in_place;
pub use rng::{derive_seed, gaussian_matrix, Rng};
pub use svd::{haar_orthogonal, svd, SvdResult};
pub(crate) use svd::thin_svd_factors;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Once;

/// Force faer onto the sequential code path exactly once per process.
pub(crate) fn ensure_sequential_backend() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Reset the upper halves of the vector registers after a faer kernel.
///
/// faer dispatches to 256/512-bit kernels at runtime and can return with the
/// wide register state still marked in use. On x86-64 that puts later
/// SSE-encoded scalar math — notably libm's `exp` — into a merge-penalty mode
/// that is ~30x slower until the state is cleared, which would silently
/// dominate any workload mixing gemms with transcendental loops.
#[inline]
pub(crate) fn clear_simd_upper_state() {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            #[target_feature(enable = "avx")]
            unsafe fn zeroupper() {
                core::arch::x86_64::_mm256_zeroupper();
            }
            // SAFETY: guarded by the runtime AVX check above.
            unsafe { zeroupper() }
        }
    }
}

/// Row-major dense matrix with positive dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Build from row-major data. Fails on zero dimensions or length mismatch.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix. Zero dimensions are a programming error here.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-dimension matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-dimension matrix");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from nested rows; all rows must have equal, positive length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::EmptyMatrix {
                rows: rows.len(),
                cols: rows.first().map_or(0, Vec::len),
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn as_faer(&self) -> faer::MatRef<'_, f64> {
        faer::MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub(crate) fn as_faer_mut(&mut self) -> faer::MatMut<'_, f64> {
        faer::MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    pub(crate) fn from_faer(m: faer::MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self * rhs`, shape-checked.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_into(&mut out, self, false, rhs, false, false);
        Ok(out)
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "tr_matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        gemm_into(&mut out, self, true, rhs, false, false);
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_tr(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tr {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        gemm_into(&mut out, self, false, rhs, true, false);
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    /// `self += c * rhs`, shape-checked.
    pub fn add_scaled_in_place(&mut self, c: f64, rhs: &Self) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "axpy {}x{} with {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        for (x, &y) in self.data.iter_mut().zip(&rhs.data) {
            *x += c * y;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Deviation of `selfᵀ self` from the identity, in max-abs norm.
    pub fn orthogonality_deviation(&self) -> f64 {
        let gram = self.tr_matmul(self).expect("same matrix");
        let mut dev: f64 = 0.0;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram.get(i, j) - target).abs());
            }
        }
        dev
    }
}

/// `dst = a(ᵀ) * b(ᵀ)` or `dst += ...` when `accumulate` is set.
/// Shapes are checked by debug assertion: callers own the contract.
pub(crate) fn gemm_into(
    dst: &mut DenseMatrix,
    a: &DenseMatrix,
    a_transpose: bool,
    b: &DenseMatrix,
    b_transpose: bool,
    accumulate: bool,
) {
    ensure_sequential_backend();
    let av = a.as_faer();
    let bv = b.as_faer();
    let av = if a_transpose { av.transpose() } else { av };
    let bv = if b_transpose { bv.transpose() } else { bv };
    debug_assert_eq!(av.nrows(), dst.rows);
    debug_assert_eq!(bv.ncols(), dst.cols);
    debug_assert_eq!(av.ncols(), bv.nrows());
    let accum = if accumulate {
        faer::Accum::Add
    } else {
        faer::Accum::Replace
    };
    faer::linalg::matmul::matmul(dst.as_faer_mut(), accum, av, bv, 1.0f64, faer::Par::Seq);
    clear_simd_upper_state();
}

/// Embed singular values into a rows x cols rectangular diagonal.
pub fn diag_rect(values: &[f64], rows: usize, cols: usize) -> DenseMatrix {
    assert!(values.len() == rows.min(cols));
    let mut m = DenseMatrix::zeros(rows, cols);
    for (i, &s) in values.iter().enumerate() {
        m.set(i, i, s);
    }
    m
}
