//! Multiplicity-block machinery for basis-adapted equivariant linear maps.
//!
//! In a basis adapted to an isotypic decomposition, an equivariant linear
//! map is block-diagonal with one block `B_λ ⊗ I_{d_λ}` per irreducible
//! type `λ`: the trainable content is the multiplicity matrix `B_λ` of
//! shape `n_λ × m_λ`, replicated `d_λ` times along the diagonal. This
//! module provides the data model for such decompositions, the assembly
//! and extraction maps between block and ambient form, and blockwise polar
//! operators. The central property (exercised by the tests) is that the
//! polar map of an assembled matrix equals the assembly of the per-block
//! polar maps, exactly for the SVD-based polar and — under a shared
//! ambient normalization — for the Newton–Schulz approximation as well.

use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;
use crate::polar::{exact_polar, newton_schulz_with_norm, NsConfig};

/// One isotypic entry: an irreducible type `label` of dimension `dim`
/// occurring `mult_in` times in the input space and `mult_out` times in
/// the output space. Zero multiplicities are allowed; such an entry
/// contributes rows/columns to the ambient shape but carries no block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsotypicEntry {
    pub label: String,
    pub dim: usize,
    pub mult_in: usize,
    pub mult_out: usize,
}

impl IsotypicEntry {
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        mult_in: usize,
        mult_out: usize,
    ) -> Self {
        IsotypicEntry {
            label: label.into(),
            dim,
            mult_in,
            mult_out,
        }
    }

    /// Whether this entry carries a multiplicity block (both mults ≥ 1).
    pub fn has_block(&self) -> bool {
        self.mult_in > 0 && self.mult_out > 0
    }
}

/// An ordered, validated list of isotypic entries. The order fixes the
/// ambient block layout: entry `k` occupies the rows after the first
/// `Σ_{j<k} d_j·n_j` and the columns after the first `Σ_{j<k} d_j·m_j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsotypicSpec {
    entries: Vec<IsotypicEntry>,
}

impl IsotypicSpec {
    /// Validates that labels are unique and every irreducible dimension is
    /// at least 1.
    pub fn new(entries: Vec<IsotypicEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::SpecMismatch(
                "isotypic spec must contain at least one entry".to_string(),
            ));
        }
        for (k, e) in entries.iter().enumerate() {
            if e.dim == 0 {
                return Err(Error::SpecMismatch(format!(
                    "entry {:?} has irreducible dimension 0",
                    e.label
                )));
            }
            if entries[..k].iter().any(|prev| prev.label == e.label) {
                return Err(Error::SpecMismatch(format!(
                    "duplicate isotypic label {:?}",
                    e.label
                )));
            }
        }
        Ok(IsotypicSpec { entries })
    }

    pub fn entries(&self) -> &[IsotypicEntry] {
        &self.entries
    }

    /// Ambient input dimension `Σ d_λ·m_λ`.
    pub fn input_dim(&self) -> usize {
        self.entries.iter().map(|e| e.dim * e.mult_in).sum()
    }

    /// Ambient output dimension `Σ d_λ·n_λ`.
    pub fn output_dim(&self) -> usize {
        self.entries.iter().map(|e| e.dim * e.mult_out).sum()
    }
}

/// The trainable content of one isotypic entry: a dense `n_λ × m_λ`
/// multiplicity matrix tagged with its entry label.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplicityBlock {
    pub label: String,
    pub b: DenseMatrix,
}

impl MultiplicityBlock {
    pub fn new(label: impl Into<String>, b: DenseMatrix) -> Self {
        MultiplicityBlock {
            label: label.into(),
            b,
        }
    }
}

/// Kronecker product of `b` with the `d × d` identity: output shape
/// `(n·d) × (m·d)` with entry `(i·d + r, j·d + c) = b[i,j]·[r == c]`.
pub fn kron_identity(b: &DenseMatrix, d: usize) -> DenseMatrix {
    assert!(d >= 1, "irreducible dimension must be at least 1");
    let mut out = DenseMatrix::zeros(b.rows() * d, b.cols() * d);
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            let v = b.get(i, j);
            for r in 0..d {
                out.set(i * d + r, j * d + r, v);
            }
        }
    }
    out
}

/// Checks that `blocks` provides exactly one correctly-shaped block, in
/// order, for every spec entry that carries one.
fn validate_blocks(spec: &IsotypicSpec, blocks: &[MultiplicityBlock]) -> Result<()> {
    let expected = spec.entries().iter().filter(|e| e.has_block()).count();
    if blocks.len() != expected {
        return Err(Error::SpecMismatch(format!(
            "expected {} multiplicity blocks, got {}",
            expected,
            blocks.len()
        )));
    }
    let mut bi = 0;
    for e in spec.entries().iter().filter(|e| e.has_block()) {
        let blk = &blocks[bi];
        bi += 1;
        if blk.label != e.label {
            return Err(Error::SpecMismatch(format!(
                "block {} labelled {:?}, spec entry is {:?}",
                bi - 1,
                blk.label,
                e.label
            )));
        }
        if blk.b.shape() != (e.mult_out, e.mult_in) {
            return Err(Error::SpecMismatch(format!(
                "block {:?} has shape {:?}, spec requires ({}, {})",
                e.label,
                blk.b.shape(),
                e.mult_out,
                e.mult_in
            )));
        }
    }
    Ok(())
}

/// Assembles the ambient block-diagonal matrix `⊕_λ B_λ ⊗ I_{d_λ}` in
/// spec order. Entries without a block leave their ambient band zero.
pub fn assemble_equivariant(
    spec: &IsotypicSpec,
    blocks: &[MultiplicityBlock],
) -> Result<DenseMatrix> {
    validate_blocks(spec, blocks)?;
    let (rows, cols) = (spec.output_dim(), spec.input_dim());
    if rows == 0 || cols == 0 {
        return Err(Error::SpecMismatch(
            "ambient space is empty (all multiplicities zero on one side)".to_string(),
        ));
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut bi = 0;
    let mut row_off = 0;
    let mut col_off = 0;
    for e in spec.entries() {
        if e.has_block() {
            let b = &blocks[bi].b;
            bi += 1;
            for i in 0..e.mult_out {
                for j in 0..e.mult_in {
                    let v = b.get(i, j);
                    for r in 0..e.dim {
                        out.set(row_off + i * e.dim + r, col_off + j * e.dim + r, v);
                    }
                }
            }
        }
        row_off += e.dim * e.mult_out;
        col_off += e.dim * e.mult_in;
    }
    Ok(out)
}

/// Recovers multiplicity blocks from an ambient matrix by averaging the
/// `d_λ` replicated diagonal sub-entries, and reports the Frobenius norm
/// of the part of `m` outside the equivariant subspace.
///
/// Extraction followed by assembly is the orthogonal projection onto the
/// space of matrices of the form `⊕ B_λ ⊗ I_{d_λ}`; the residual is
/// `‖m − projection(m)‖_F`, zero exactly when `m` is equivariant. When
/// all `d_λ` replicas agree bitwise the average short-circuits to the
/// common value, so extract∘assemble is exact in floating point.
pub fn extract_blocks(
    spec: &IsotypicSpec,
    m: &DenseMatrix,
) -> Result<(Vec<MultiplicityBlock>, f64)> {
    let (rows, cols) = (spec.output_dim(), spec.input_dim());
    if m.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "ambient matrix is {:?}, spec implies ({rows}, {cols})",
            m.shape()
        )));
    }
    let mut blocks = Vec::new();
    let mut row_off = 0;
    let mut col_off = 0;
    for e in spec.entries() {
        if e.has_block() {
            let d = e.dim;
            let b = DenseMatrix::from_fn(e.mult_out, e.mult_in, |i, j| {
                let first = m.get(row_off + i * d, col_off + j * d);
                let mut sum = 0.0;
                let mut all_equal = true;
                for r in 0..d {
                    let v = m.get(row_off + i * d + r, col_off + j * d + r);
                    sum += v;
                    if v.to_bits() != first.to_bits() {
                        all_equal = false;
                    }
                }
                if all_equal {
                    first
                } else {
                    sum / d as f64
                }
            });
            blocks.push(MultiplicityBlock::new(e.label.clone(), b));
        }
        row_off += e.dim * e.mult_out;
        col_off += e.dim * e.mult_in;
    }
    let recon = assemble_equivariant(spec, &blocks)?;
    let residual = m.sub(&recon)?.frobenius_norm();
    Ok((blocks, residual))
}

/// Applies the exact (SVD-based) polar map to every block independently.
///
/// For full-rank blocks whose assembled matrix has full rank, this equals
/// extracting the blocks of the ambient polar map: the per-type structure
/// is preserved by the polar decomposition.
pub fn block_polar(
    spec: &IsotypicSpec,
    blocks: &[MultiplicityBlock],
) -> Result<Vec<MultiplicityBlock>> {
    validate_blocks(spec, blocks)?;
    blocks
        .iter()
        .map(|blk| {
            exact_polar(&blk.b).map(|b| MultiplicityBlock::new(blk.label.clone(), b))
        })
        .collect()
}

/// The shared ambient Frobenius norm `sqrt(Σ_λ d_λ·‖B_λ‖_F²)` — equal to
/// the Frobenius norm of the assembled matrix, computed without
/// assembling it.
pub fn ambient_frobenius_norm(
    spec: &IsotypicSpec,
    blocks: &[MultiplicityBlock],
) -> Result<f64> {
    validate_blocks(spec, blocks)?;
    let mut sum = 0.0;
    let mut bi = 0;
    for e in spec.entries().iter().filter(|e| e.has_block()) {
        let n = blocks[bi].b.frobenius_norm();
        bi += 1;
        sum += e.dim as f64 * n * n;
    }
    Ok(sum.sqrt())
}

/// Applies Newton–Schulz to every block under the *shared* ambient
/// normalization: each block is divided by the ambient Frobenius norm of
/// the whole assembled matrix, not by its own norm. Because the iteration
/// polynomial acts blockwise on a block-diagonal matrix and commutes with
/// `⊗ I_d`, this matches running Newton–Schulz on the assembled matrix
/// and extracting the blocks. A zero block maps to a zero block, as the
/// polynomial iteration does.
pub fn block_newton_schulz(
    spec: &IsotypicSpec,
    blocks: &[MultiplicityBlock],
    cfg: &NsConfig,
) -> Result<Vec<MultiplicityBlock>> {
    validate_blocks(spec, blocks)?;
    let shared = ambient_frobenius_norm(spec, blocks)?;
    if shared == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    blocks
        .iter()
        .map(|blk| {
            let b = if blk.b.frobenius_norm() == 0.0 {
                DenseMatrix::zeros(blk.b.rows(), blk.b.cols())
            } else {
                newton_schulz_with_norm(&blk.b, cfg, shared)?
            };
            Ok(MultiplicityBlock::new(blk.label.clone(), b))
        })
        .collect()
}
