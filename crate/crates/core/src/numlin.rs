//! Dense linear algebra kernel.
//!
//! The Sylvester systems produced by the solver always have a symmetric
//! positive definite left operand and a symmetric positive semidefinite right
//! operand, so `AX + XB = C` diagonalises in the two eigenbases:
//! `X = Q_A ((Q_Aᵀ C Q_B) ⊘ (λ_i^A + λ_j^B)) Q_Bᵀ`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense 64-bit matrix used for features, prototypes and projections.
pub type DenseMatrix = DMatrix<f64>;

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalue sums at or below this are treated as a singular Sylvester system.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Rows per block in Gram accumulations. Blocks are reduced in index order, so
/// results do not depend on the number of worker threads.
pub const CHUNK_ROWS: usize = 512;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DenseMatrix,
}

impl SymEig {
    pub fn reconstruct(&self) -> DenseMatrix {
        &self.vectors * DenseMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `||S - Sᵀ||_F / max(||S||_F, tiny)`.
pub fn relative_asymmetry(s: &DenseMatrix) -> f64 {
    let norm = s.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (s - s.transpose()).norm() / norm
}

pub fn sym_eig(s: &DenseMatrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::dim(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    let asym = relative_asymmetry(s);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let n = s.nrows();
    if n == 0 {
        return Ok(SymEig {
            values: DVector::zeros(0),
            vectors: DenseMatrix::zeros(0, 0),
        });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

/// Solves `AX + XB = C` for symmetric `A` (d×d) and `B` (k×k).
pub fn solve_sylvester(a: &DenseMatrix, b: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix> {
    let eig_a = sym_eig(a)?;
    let eig_b = sym_eig(b)?;
    solve_sylvester_eig(&eig_a, &eig_b, c)
}

/// Sylvester solve against precomputed eigendecompositions of `A` and `B`.
pub fn solve_sylvester_eig(eig_a: &SymEig, eig_b: &SymEig, c: &DenseMatrix) -> Result<DenseMatrix> {
    let (d, k) = (eig_a.values.len(), eig_b.values.len());
    if c.nrows() != d || c.ncols() != k {
        return Err(Error::dim(format!(
            "right-hand side is {}x{}, expected {d}x{k}",
            c.nrows(),
            c.ncols()
        )));
    }
    if d == 0 || k == 0 {
        return Ok(DenseMatrix::zeros(d, k));
    }
    let smallest = eig_a.min_value() + eig_b.min_value();
    if smallest.is_nan() || smallest <= SINGULAR_TOL {
        return Err(Error::SingularSystem(smallest));
    }
    let mut rotated = eig_a.vectors.tr_mul(c) * &eig_b.vectors;
    for j in 0..k {
        let lb = eig_b.values[j];
        for i in 0..d {
            rotated[(i, j)] /= eig_a.values[i] + lb;
        }
    }
    Ok(&eig_a.vectors * rotated * eig_b.vectors.transpose())
}

/// `||AX + XB - C||_F / max(1, ||C||_F)`.
pub fn sylvester_residual(
    a: &DenseMatrix,
    b: &DenseMatrix,
    c: &DenseMatrix,
    x: &DenseMatrix,
) -> f64 {
    (a * x + x * b - c).norm() / c.norm().max(1.0)
}

pub fn frobenius_distance(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim(format!(
            "cannot compare {:?} with {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn row_chunks(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(CHUNK_ROWS)
        .map(|start| start..(start + CHUNK_ROWS).min(n))
        .collect()
}

/// Sums `block(range)` over fixed row blocks of `n` rows, reducing in block order.
pub fn chunked_sum<F>(n: usize, rows: usize, cols: usize, block: F) -> DenseMatrix
where
    F: Fn(Range<usize>) -> DenseMatrix + Sync + Send,
{
    let parts: Vec<DenseMatrix> = row_chunks(n).into_par_iter().map(block).collect();
    parts
        .into_iter()
        .fold(DenseMatrix::zeros(rows, cols), |acc, part| acc + part)
}

/// `Σ_i x_i x_iᵀ` over the rows of `x`.
pub fn gram(x: &DenseMatrix) -> DenseMatrix {
    let d = x.ncols();
    chunked_sum(x.nrows(), d, d, |r| {
        let block = x.rows(r.start, r.len());
        block.tr_mul(&block)
    })
}

/// `Σ_i x_i m_iᵀ` over paired rows of `x` and `m`.
pub fn cross(x: &DenseMatrix, m: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(x.nrows(), m.nrows());
    chunked_sum(x.nrows(), x.ncols(), m.ncols(), |r| {
        x.rows(r.start, r.len()).tr_mul(&m.rows(r.start, r.len()))
    })
}

/// `Σ_j w_j y_j y_jᵀ` over the rows of `y`.
pub fn weighted_gram(y: &DenseMatrix, weights: &[f64]) -> DenseMatrix {
    debug_assert_eq!(y.nrows(), weights.len());
    let mut scaled = y.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(weights) {
        row *= w;
    }
    scaled.tr_mul(y)
}

/// Copies row `i` into a column vector.
pub fn row_vector(m: &DenseMatrix, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}
