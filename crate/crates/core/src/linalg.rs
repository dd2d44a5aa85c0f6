//! Dense linear algebra used by the rest of the crate.
//!
//! Matrices are row-major `f64`. Cholesky factors follow the `M = LᵀL`
//! convention with `L` upper triangular.

use std::cell::Cell;
use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{check_dim, Error, Result};

/// Relative asymmetry above which a matrix is rejected instead of symmetrized.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("DenseMatrix::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("matmul", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn tr_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("tr_matmul", self.rows, other.rows)?;
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let rhs = other.row(r);
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a != 0.0 {
                    axpy(a, rhs, out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("tr_matvec", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("add rows", self.rows, other.rows)?;
        check_dim("add cols", self.cols, other.cols)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.add(&other.scaled(-1.0))
    }

    pub fn scaled(&self, c: f64) -> DenseMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) -> Result<()> {
        check_dim("add_diagonal", self.rows.min(self.cols), diag.len())?;
        for (i, d) in diag.iter().enumerate() {
            self[(i, i)] += d;
        }
        Ok(())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            check_dim("vstack", cols, b.cols)?;
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// Dense block-diagonal assembly.
    pub fn block_diagonal(blocks: &[DenseMatrix]) -> DenseMatrix {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for i in 0..b.rows {
                out.row_mut(r0 + i)[c0..c0 + b.cols].copy_from_slice(b.row(i));
            }
            r0 += b.rows;
            c0 += b.cols;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `‖m − mᵀ‖_F / ‖m‖_F`, zero for the zero matrix.
    pub fn relative_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let scale = self.frobenius_norm();
        if scale == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                let d = self[(i, j)] - self[(j, i)];
                acc += 2.0 * d * d;
            }
        }
        acc.sqrt() / scale
    }

    /// Symmetrizes as `(m + mᵀ)/2`, rejecting matrices whose asymmetry
    /// exceeds [`SYMMETRY_TOLERANCE`].
    pub fn symmetrized(&self) -> Result<DenseMatrix> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                context: "symmetrized",
                expected: self.rows,
                actual: self.cols,
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("symmetric matrix input"));
        }
        let asymmetry = self.relative_asymmetry();
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Upper-triangular Cholesky factor `L` with `M = LᵀL`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperTriangularFactor {
    matrix: DenseMatrix,
}

impl UpperTriangularFactor {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DenseMatrix::identity(n),
        }
    }

    /// Wraps an upper-triangular matrix with a positive diagonal.
    pub fn from_matrix(matrix: DenseMatrix) -> Result<Self> {
        check_dim("UpperTriangularFactor", matrix.rows, matrix.cols)?;
        for i in 0..matrix.rows {
            if !(matrix[(i, i)] > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    index: i,
                    pivot: matrix[(i, i)],
                });
            }
            for j in 0..i {
                if matrix[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "factor has nonzero entry below the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    /// `LᵀL`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.matrix.tr_matmul(&self.matrix).expect("square factor")
    }

    /// Solves `Lᵀ z = b` in place (forward substitution).
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for k in 0..n {
            let row = self.matrix.row(k);
            b[k] /= row[k];
            let zk = b[k];
            if zk != 0.0 {
                for i in k + 1..n {
                    b[i] -= zk * row[i];
                }
            }
        }
    }

    /// Solves `L x = z` in place (back substitution).
    pub fn solve_upper_in_place(&self, z: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(z.len(), n);
        for i in (0..n).rev() {
            let row = self.matrix.row(i);
            let s = dot(&row[i + 1..], &z[i + 1..]);
            z[i] = (z[i] - s) / row[i];
        }
    }

    /// Solves `LᵀL x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_dim("UpperTriangularFactor::solve", self.dim(), b.len())?;
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        Ok(x)
    }
}

/// Positive diagonal matrix, the per-layer mass matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalMatrix {
    diagonal: Vec<f64>,
}

impl DiagonalMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if let Some((i, &d)) = diagonal
            .iter()
            .enumerate()
            .find(|(_, d)| !(d.is_finite() && **d > 0.0))
        {
            return Err(Error::NotPositiveDefinite { index: i, pivot: d });
        }
        Ok(Self { diagonal })
    }

    pub fn scalar(value: f64, dim: usize) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn min(&self) -> f64 {
        self.diagonal.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.diagonal.iter().map(|d| c * d).collect())
    }

    /// `D⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("DiagonalMatrix::solve", self.dim(), v.len())?;
        Ok(v.iter().zip(&self.diagonal).map(|(x, d)| x / d).collect())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_diagonal(&self.diagonal)
    }
}

thread_local! {
    static FACTORIZATION_MAX_DIM: Cell<usize> = const { Cell::new(0) };
    static FACTORIZATION_COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Cholesky factorizations performed on the current thread inside
/// [`track_factorizations`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FactorizationStats {
    pub count: usize,
    pub max_dim: usize,
}

/// Runs `f` and reports the Cholesky factorizations it performed on this thread.
pub fn track_factorizations<R>(f: impl FnOnce() -> R) -> (R, FactorizationStats) {
    let saved = (
        FACTORIZATION_COUNT.with(Cell::get),
        FACTORIZATION_MAX_DIM.with(Cell::get),
    );
    FACTORIZATION_COUNT.with(|c| c.set(0));
    FACTORIZATION_MAX_DIM.with(|c| c.set(0));
    let out = f();
    let stats = FactorizationStats {
        count: FACTORIZATION_COUNT.with(Cell::get),
        max_dim: FACTORIZATION_MAX_DIM.with(Cell::get),
    };
    FACTORIZATION_COUNT.with(|c| c.set(saved.0 + stats.count));
    FACTORIZATION_MAX_DIM.with(|c| c.set(saved.1.max(stats.max_dim)));
    (out, stats)
}

fn record_factorization(dim: usize) {
    FACTORIZATION_COUNT.with(|c| c.set(c.get() + 1));
    FACTORIZATION_MAX_DIM.with(|c| c.set(c.get().max(dim)));
}

/// Cholesky factorization `m = LᵀL` with `L` upper triangular.
///
/// Inputs within [`SYMMETRY_TOLERANCE`] of symmetric are symmetrized first.
pub fn cholesky_upper(m: &DenseMatrix) -> Result<UpperTriangularFactor> {
    let sym = m.symmetrized()?;
    cholesky_upper_unchecked(sym)
}

/// Factorizes a matrix already known to be symmetric; only the upper
/// triangle is read.
pub(crate) fn cholesky_upper_unchecked(mut a: DenseMatrix) -> Result<UpperTriangularFactor> {
    let n = a.rows;
    record_factorization(n);
    // Right-looking elimination on the upper triangle; row k of the result is row k of L.
    for k in 0..n {
        let pivot = a[(k, k)];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(if pivot.is_nan() {
                Error::NonFinite("cholesky pivot")
            } else {
                Error::NotPositiveDefinite { index: k, pivot }
            });
        }
        let d = pivot.sqrt();
        let (head, tail) = a.data.split_at_mut((k + 1) * n);
        let row_k = &mut head[k * n..];
        row_k[k] = d;
        for x in &mut row_k[k + 1..] {
            *x /= d;
        }
        for i in k + 1..n {
            let f = row_k[i];
            if f != 0.0 {
                let row_i = &mut tail[(i - k - 1) * n..(i - k) * n];
                for (dst, src) in row_i[i..].iter_mut().zip(&row_k[i..]) {
                    *dst -= f * src;
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            a[(i, j)] = 0.0;
        }
    }
    Ok(UpperTriangularFactor { matrix: a })
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    check_dim("solve_spd", m.rows, rhs.len())?;
    cholesky_upper(m)?.solve(rhs)
}

/// Eigenvalues of a symmetric matrix in ascending order, by Householder
/// reduction to tridiagonal form and implicit QL iteration.
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::NonFinite("eigenvalue input"));
    }
    let mut a = m.symmetrized()?;
    let n = a.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut d, mut e) = tridiagonalize(&mut a);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Householder reduction of a symmetric matrix, working on its lower
/// triangle. Returns the diagonal and the subdiagonal (`e[i]` couples
/// `i − 1` and `i`).
fn tridiagonalize(a: &mut DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows;
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        if l == 0 {
            e[i] = a[(i, l)];
            continue;
        }
        let scale: f64 = (0..=l).map(|k| a[(i, k)].abs()).sum();
        if scale == 0.0 {
            e[i] = a[(i, l)];
            continue;
        }
        let mut h = 0.0;
        for k in 0..=l {
            a[(i, k)] /= scale;
            h += a[(i, k)] * a[(i, k)];
        }
        let f = a[(i, l)];
        let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
        e[i] = scale * g;
        h -= f * g;
        a[(i, l)] = f - g;
        let mut f = 0.0;
        for j in 0..=l {
            let mut g = 0.0;
            for k in 0..=j {
                g += a[(j, k)] * a[(i, k)];
            }
            for k in j + 1..=l {
                g += a[(k, j)] * a[(i, k)];
            }
            e[j] = g / h;
            f += e[j] * a[(i, j)];
        }
        let hh = f / (h + h);
        for j in 0..=l {
            let f = a[(i, j)];
            let g = e[j] - hh * f;
            e[j] = g;
            for k in 0..=j {
                a[(j, k)] -= f * e[k] + g * a[(i, k)];
            }
        }
    }
    let d = (0..n).map(|i| a[(i, i)]).collect();
    (d, e)
}

/// Implicit QL with Wilkinson-style shifts on a symmetric tridiagonal
/// matrix; `d` is overwritten with the eigenvalues.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() + dd == dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::InvalidArgument(
                    "tridiagonal QL did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DenseMatrix) -> Result<f64> {
    let eig = symmetric_eigenvalues(m)?;
    eig.first()
        .copied()
        .ok_or_else(|| Error::InvalidArgument("empty matrix".into()))
}

/// Largest singular value, `sqrt(λ_max(mᵀm))` or `sqrt(λ_max(mmᵀ))` whichever is smaller.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    let gram = if m.rows <= m.cols {
        m.matmul(&m.transpose())?
    } else {
        m.tr_matmul(m)?
    };
    let eig = symmetric_eigenvalues(&gram)?;
    Ok(eig.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error when `b = 0`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_spd(rng: &mut SplitMix64, n: usize) -> DenseMatrix {
        let b = DenseMatrix::new(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
        let mut m = b.tr_matmul(&b).unwrap();
        m.add_diagonal(&vec![0.5; n]).unwrap();
        m
    }

    fn random_symmetric(rng: &mut SplitMix64, n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Number of eigenvalues below `sigma`, by Sylvester inertia of the
    /// pivots of symmetric Gaussian elimination on `m − σI`.
    fn count_below(m: &DenseMatrix, sigma: f64) -> usize {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| m[(i, j)] - if i == j { sigma } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut negatives = 0;
        for k in 0..n {
            let mut p = a[k][k];
            if p == 0.0 {
                p = -1e-300;
            }
            if p < 0.0 {
                negatives += 1;
            }
            for i in k + 1..n {
                let f = a[i][k] / p;
                for j in k + 1..n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        negatives
    }

    fn bisection_min_eigenvalue(m: &DenseMatrix) -> f64 {
        let bound: f64 = (0..m.rows())
            .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if count_below(m, mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky_upper(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(l.as_matrix(), &DenseMatrix::identity(3));
    }

    #[test]
    fn cholesky_reconstructs_small_matrix() {
        let m = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky_upper(&m).unwrap();
        assert_eq!(l.as_matrix()[(1, 0)], 0.0);
        assert!((l.as_matrix()[(0, 0)] - 2.0).abs() < 1e-15);
        let r = l.reconstruct();
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[(i, j)] - m[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            cholesky_upper(&m),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric_but_symmetrizes_roundoff() {
        let m = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(
            cholesky_upper(&m),
            Err(Error::NotSymmetric { .. })
        ));
        let m = DenseMatrix::from_rows(&[[2.0, 1.0 + 1e-14], [1.0, 2.0]]);
        assert!(cholesky_upper(&m).is_ok());
    }

    #[test]
    fn cholesky_rejects_nan() {
        let m = DenseMatrix::from_rows(&[[f64::NAN, 0.0], [0.0, 1.0]]);
        assert!(matches!(cholesky_upper(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn solve_spd_trivial_cases() {
        assert_eq!(
            solve_spd(&DenseMatrix::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let x = solve_spd(&DenseMatrix::from_diagonal(&[2.0, 4.0]), &[2.0, 4.0]).unwrap();
        assert!(relative_error(&x, &[1.0, 1.0]) <= 1e-15);
        assert!(matches!(
            solve_spd(&DenseMatrix::identity(2), &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solve_spd_residual_random_8x8() {
        let mut rng = SplitMix64::new(11);
        let m = random_spd(&mut rng, 8);
        let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let x = solve_spd(&m, &b).unwrap();
        let r = m.matvec(&x).unwrap();
        assert!(relative_error(&r, &b) <= 1e-10);
    }

    #[test]
    fn solve_spd_residual_many_sizes() {
        let mut rng = SplitMix64::new(12);
        for trial in 0..1000 {
            let n = 1 + trial % 64;
            let m = random_spd(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let x = solve_spd(&m, &b).unwrap();
            let r = m.matvec(&x).unwrap();
            let res: Vec<f64> = r.iter().zip(&b).map(|(a, c)| a - c).collect();
            assert!(norm(&res) <= 1e-10 * norm(&b), "trial {trial} n {n}");
        }
    }

    #[test]
    fn min_eigenvalue_trivial() {
        assert!((min_eigenvalue(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            min_eigenvalue(&DenseMatrix::from_diagonal(&[0.5, 3.0])).unwrap(),
            0.5
        );
        let m = DenseMatrix::from_rows(&[[f64::INFINITY, 0.0], [0.0, 1.0]]);
        assert!(matches!(min_eigenvalue(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn min_eigenvalue_matches_inertia_bisection() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..20 {
            let m = random_symmetric(&mut rng, 6);
            let expected = bisection_min_eigenvalue(&m);
            let got = min_eigenvalue(&m).unwrap();
            assert!(
                (got - expected).abs() <= 1e-8 * m.frobenius_norm(),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = DenseMatrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, -4.0, 0.0]]);
        assert!((spectral_norm(&m).unwrap() - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cholesky_reconstruction(seed in any::<u64>(), n in 1usize..24) {
            let mut rng = SplitMix64::new(seed);
            let m = random_spd(&mut rng, n);
            let l = cholesky_upper(&m).unwrap();
            let diff = l.reconstruct().sub(&m).unwrap();
            prop_assert!(diff.frobenius_norm() <= 1e-12 * m.frobenius_norm());
        }

        #[test]
        fn min_eigenvalue_shift(seed in any::<u64>(), n in 1usize..12, c in -5.0f64..5.0) {
            let mut rng = SplitMix64::new(seed);
            let m = random_symmetric(&mut rng, n);
            let mut shifted = m.clone();
            shifted.add_diagonal(&vec![c; n]).unwrap();
            let lhs = min_eigenvalue(&shifted).unwrap();
            let rhs = min_eigenvalue(&m).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + m.frobenius_norm()));
        }
    }
}
