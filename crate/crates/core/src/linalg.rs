//! Minimal dense kernels shared by the solver modules.
//!
//! Summation order is fixed (sequential by index) everywhere, so results are
//! bit-identical across runs and across the parallel/sequential builds. The
//! parallel paths only split work along output rows; every output entry is
//! still one fixed-order reduction.

use crate::error::{CoreError, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(CoreError::DimensionMismatch {
                op: "DenseMatrix::from_vec",
                detail: format!("{rows}x{cols} needs {} entries, got {}", rows * cols, entries.len()),
            });
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                op: "DenseMatrix::from_vec",
                detail: "matrix entries must be finite".into(),
            });
        }
        Ok(DenseMatrix { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::DimensionMismatch {
                    op: "DenseMatrix::from_rows",
                    detail: "ragged rows".into(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::from_vec(r, c, entries)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies column `j` into `out`.
    pub fn col_to(&self, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.entries[i * self.cols + j];
        }
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.col_to(j, &mut out);
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.entries[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.entries[i * self.cols + j]
    }
}

/// Dense vector of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    entries: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        DenseVector {
            entries: vec![0.0; len],
        }
    }

    pub fn from_vec(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                op: "DenseVector::from_vec",
                detail: "vector entries must be finite".into(),
            });
        }
        Ok(DenseVector { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.entries)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.entries[i]
    }
}

/// Euclidean norm with fixed sequential summation order.
pub fn norm2(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in x {
        acc += v * v;
    }
    acc.sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// y = M x.
pub fn matvec(m: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if m.cols() != x.len() {
        return Err(CoreError::DimensionMismatch {
            op: "matvec",
            detail: format!("{}x{} times vector of {}", m.rows(), m.cols(), x.len()),
        });
    }
    let mut out = DenseVector::zeros(m.rows());
    matvec_into(m, x.entries(), out.entries_mut());
    Ok(out)
}

/// out = M x over raw slices; the hot-path version without allocation.
pub fn matvec_into(m: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.cols());
    debug_assert_eq!(out.len(), m.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), x);
    }
}

/// out = Mᵀ x without materializing the transpose.
pub fn matvec_transpose_into(m: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows());
    debug_assert_eq!(out.len(), m.cols());
    out.fill(0.0);
    for (i, xi) in x.iter().enumerate() {
        let row = m.row(i);
        for (o, mij) in out.iter_mut().zip(row) {
            *o += xi * mij;
        }
    }
}

/// Vector of column ℓ2 norms; each norm is a fixed-order sum of squares.
pub fn column_norms(m: &DenseMatrix) -> DenseVector {
    let mut out = DenseVector::zeros(m.cols());
    for j in 0..m.cols() {
        let mut acc = 0.0;
        for i in 0..m.rows() {
            let v = m[(i, j)];
            acc += v * v;
        }
        out[j] = acc.sqrt();
    }
    out
}

/// Result of the power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `m` via power iteration on MᵀM.
///
/// The start vector is the normalized all-ones vector, so the estimate is
/// deterministic. If that start happens to be orthogonal to the leading
/// singular subspace (detected by a vanishing Rayleigh quotient while the
/// matrix is nonzero), the first coordinate is perturbed by 1e-8 and the
/// iteration restarts.
pub fn spectral_norm(m: &DenseMatrix, tol: f64, max_iter: usize) -> SpectralEstimate {
    assert!(tol > 0.0, "spectral_norm requires tol > 0");
    assert!(m.rows() > 0 && m.cols() > 0, "spectral_norm requires a nonempty matrix");
    let n = m.cols();
    let mut z = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; m.rows()];
    let mut t = vec![0.0; n];
    let matrix_is_zero = m.entries().iter().all(|&v| v == 0.0);
    if matrix_is_zero {
        return SpectralEstimate {
            sigma: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut sigma_prev = 0.0;
    let mut perturbed = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        matvec_into(m, &z, &mut y);
        matvec_transpose_into(m, &y, &mut t);
        let sigma_sq = dot(&z, &t); // Rayleigh quotient of MᵀM at unit z
        if sigma_sq <= 0.0 {
            if !perturbed {
                // ones vector sits in the null space; nudge it out
                z[0] += 1e-8;
                let nz = norm2(&z);
                for v in z.iter_mut() {
                    *v /= nz;
                }
                perturbed = true;
                continue;
            }
            return SpectralEstimate {
                sigma: 0.0,
                converged: false,
                iterations,
            };
        }
        let sigma = sigma_sq.sqrt();
        let tn = norm2(&t);
        for (zi, ti) in z.iter_mut().zip(&t) {
            *zi = ti / tn;
        }
        if (sigma - sigma_prev).abs() <= tol * sigma {
            return SpectralEstimate {
                sigma,
                converged: true,
                iterations,
            };
        }
        sigma_prev = sigma;
    }
    SpectralEstimate {
        sigma: sigma_prev,
        converged: false,
        iterations,
    }
}

/// σ_max of the augmented block [-W  I] via the identity ‖[-W I]‖² = 1 + σ_max(W)².
pub fn spectral_norm_augmented(w: &DenseMatrix, tol: f64, max_iter: usize) -> SpectralEstimate {
    let est = spectral_norm(w, tol, max_iter);
    SpectralEstimate {
        sigma: (1.0 + est.sigma * est.sigma).sqrt(),
        converged: est.converged,
        iterations: est.iterations,
    }
}

/// out[i][j] = Σ_n a_n[i]·b_n[j] for sample-major blocks `a` (n×da) and `b` (n×db).
///
/// Each output row is an independent fixed-order sum over samples, so the
/// parallel build produces bitwise the same matrix as the sequential one.
pub fn cross_gram(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> DenseMatrix {
    debug_assert_eq!(a.len(), n * da);
    debug_assert_eq!(b.len(), n * db);
    let mut out = DenseMatrix::zeros(da, db);
    let fill_row = |i: usize, row: &mut [f64]| {
        for s in 0..n {
            let ai = a[s * da + i];
            if ai == 0.0 {
                continue;
            }
            let bs = &b[s * db..(s + 1) * db];
            for (r, bv) in row.iter_mut().zip(bs) {
                *r += ai * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        out.entries_mut()
            .par_chunks_mut(db)
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for i in 0..da {
            fill_row(i, &mut out.entries_mut()[i * db..(i + 1) * db]);
        }
    }
    out
}

/// C = A·B with the row-parallel, fixed-inner-order layout.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(CoreError::DimensionMismatch {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let (ar, ac, bc) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseMatrix::zeros(ar, bc);
    let fill_row = |i: usize, row: &mut [f64]| {
        let arow = a.row(i);
        for k in 0..ac {
            let aik = arow[k];
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (r, bv) in row.iter_mut().zip(brow) {
                *r += aik * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        out.entries_mut()
            .par_chunks_mut(bc)
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for i in 0..ar {
            fill_row(i, &mut out.entries_mut()[i * bc..(i + 1) * bc]);
        }
    }
    Ok(out)
}
