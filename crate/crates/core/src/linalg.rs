//! Dense linear algebra shared by the samplers, estimators and metrics.
//!
//! Everything here works in double precision on small dense matrices
//! (a few hundred rows at most), stored row-major.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("column {0} has zero variance")]
    DegenerateColumn(usize),
    #[error("partial correlation denominator vanished ({0:e})")]
    DegenerateDenominator(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("malformed matrix text: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(i).iter().take(8).map(|v| format!("{v:9.4}")).collect();
            writeln!(f, "  [{}]", row.join(" "))?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Principal submatrix over `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), idx.len(), |a, b| self[(idx[a], idx[b])])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(LinalgError::NonFinite(k / self.cols, k % self.cols)),
            None => Ok(()),
        }
    }

    /// Reads the fixture text format: `rows cols` then row-major values.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Matrix> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| LinalgError::Parse(e.to_string()))?;
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        let mut it = tokens.into_iter();
        let mut dim = |what: &str| -> Result<usize> {
            it.next()
                .ok_or_else(|| LinalgError::Parse(format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| LinalgError::Parse(format!("{what}: {e}")))
        };
        let rows = dim("row count")?;
        let cols = dim("column count")?;
        let data = it
            .map(|t| t.parse::<f64>().map_err(|e| LinalgError::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| LinalgError::Parse(e.to_string()))?;
        m.check_finite()?;
        Ok(m)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Square matrix with exactly equal mirrored entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix(Matrix);

impl SymmetricMatrix {
    /// Validates exact symmetry.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(LinalgError::ShapeMismatch(format!("{}x{} is not square", m.rows, m.cols)));
        }
        for i in 0..m.rows {
            for j in i + 1..m.cols {
                if m[(i, j)] != m[(j, i)] {
                    return Err(LinalgError::NotSymmetric(i, j));
                }
            }
        }
        Ok(Self(m))
    }

    /// Copies the upper triangle onto the lower one.
    pub fn from_upper(mut m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(LinalgError::ShapeMismatch(format!("{}x{} is not square", m.rows, m.cols)));
        }
        let n = m.rows;
        for i in 0..n {
            for j in i + 1..n {
                m[(j, i)] = m[(i, j)];
            }
        }
        Ok(Self(m))
    }

    /// Averages `m` with its transpose.
    pub fn symmetrize(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(LinalgError::ShapeMismatch(format!("{}x{} is not square", m.rows, m.cols)));
        }
        let n = m.rows;
        let mut out = m.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(Self(out))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Writes both mirrored entries.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
        self.0[(j, i)] = v;
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Strict upper triangle in row-major edge order `(0,1), (0,2), ..., (p-2,p-1)`.
    pub fn upper_values(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(p * (p - 1) / 2);
        for i in 0..p {
            out.extend_from_slice(&self.0.row(i)[i + 1..]);
        }
        out
    }

    /// Upper triangle including the diagonal, row-major.
    pub fn packed_upper(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(p * (p + 1) / 2);
        for i in 0..p {
            out.extend_from_slice(&self.0.row(i)[i..]);
        }
        out
    }

    pub fn from_packed_upper(p: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != p * (p + 1) / 2 {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} packed values for dimension {p}",
                packed.len()
            )));
        }
        let mut m = Matrix::zeros(p, p);
        let mut k = 0;
        for i in 0..p {
            for j in i..p {
                m[(i, j)] = packed[k];
                m[(j, i)] = packed[k];
                k += 1;
            }
        }
        Ok(Self(m))
    }

    /// `P A Pᵀ` where row `a` of the result is row `perm[a]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(self.0.submatrix(perm))
    }
}

impl std::ops::Deref for SymmetricMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Symmetric positive definite matrix together with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    sym: SymmetricMatrix,
    chol: Matrix,
}

impl SpdMatrix {
    pub fn new(sym: SymmetricMatrix) -> Result<Self> {
        let chol = cholesky(&sym)?;
        Ok(Self { sym, chol })
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        Self::new(SymmetricMatrix::new(m)?)
    }

    pub fn dim(&self) -> usize {
        self.sym.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sym.get(i, j)
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.sym
    }

    pub fn into_symmetric(self) -> SymmetricMatrix {
        self.sym
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        log_det_from_factor(&self.chol)
    }

    pub fn inverse(&self) -> SpdMatrix {
        let inv = inverse_from_factor(&self.chol);
        // the inverse of an SPD matrix is SPD; refactor to keep the pair consistent
        SpdMatrix::new(inv).expect("inverse of an SPD matrix is SPD")
    }
}

impl std::ops::Deref for SpdMatrix {
    type Target = SymmetricMatrix;
    fn deref(&self) -> &SymmetricMatrix {
        &self.sym
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &SymmetricMatrix) -> Result<Matrix> {
    let n = a.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let pivot = a.get(j, j) - dot(&lj, &lj);
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let s = a.get(i, j) - dot(&l.row(i)[..j], &lj);
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &mut [f64]) {
    for i in 0..l.rows() {
        let s = dot(&l.row(i)[..i], &b[..i]);
        b[i] = (b[i] - s) / l[(i, i)];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn back_substitute_transposed(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

fn inverse_from_factor(l: &Matrix) -> SymmetricMatrix {
    let n = l.rows();
    // columns of L⁻¹, then A⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        forward_substitute(l, &mut e);
        for i in 0..n {
            linv[(i, j)] = e[i];
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let start = j.max(i);
            let s: f64 = (start..n).map(|k| linv[(k, i)] * linv[(k, j)]).sum();
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    SymmetricMatrix(inv)
}

fn log_det_from_factor(l: &Matrix) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inverse_spd(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(inverse_from_factor(&cholesky(a)?))
}

pub fn log_det_spd(a: &SymmetricMatrix) -> Result<f64> {
    Ok(log_det_from_factor(&cholesky(a)?))
}

/// Centers each column and scales it to unit variance (divisor `n`).
pub fn standardize(x: &Matrix) -> Result<Matrix> {
    let (n, p) = (x.rows(), x.cols());
    if n < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: n });
    }
    let mut out = x.clone();
    for j in 0..p {
        let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = mean.abs().max(1.0);
        if !(var > 1e-24 * scale * scale) {
            return Err(LinalgError::DegenerateColumn(j));
        }
        let sd = var.sqrt();
        for i in 0..n {
            out[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    Ok(out)
}

/// `(1/n) XᵀX`, symmetric by construction.
pub fn empirical_covariance(x: &Matrix) -> SymmetricMatrix {
    let (n, p) = (x.rows(), x.cols());
    let mut s = Matrix::zeros(p, p);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..p {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let srow = &mut s.data[i * p..(i + 1) * p];
            for j in i..p {
                srow[j] += xi * row[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..p {
        for j in i..p {
            let v = s[(i, j)] * inv_n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    SymmetricMatrix(s)
}

/// Normalized precision entries `-θᵢⱼ / √(θᵢᵢ θⱼⱼ)` with unit diagonal.
pub fn partial_corr_from_precision(theta: &SymmetricMatrix) -> SymmetricMatrix {
    let p = theta.dim();
    let d: Vec<f64> = theta.diag().iter().map(|v| v.sqrt()).collect();
    let mut out = Matrix::identity(p);
    for i in 0..p {
        for j in i + 1..p {
            let r = (-theta.get(i, j) / (d[i] * d[j])).clamp(-1.0, 1.0);
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    SymmetricMatrix(out)
}

/// Validating variant of [`partial_corr_from_precision`] for callers holding an
/// unchecked matrix.
pub fn partial_corr_checked(theta: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    cholesky(theta)?;
    Ok(partial_corr_from_precision(theta))
}

/// Memoized recursive partial correlation over a fixed correlation matrix.
///
/// The pivot removed from the conditioning set at each level is its smallest
/// index, so subproblems are keyed by `(min(i,j), max(i,j), Z)`.
pub struct RecursivePartialCorr<'a> {
    corr: &'a SymmetricMatrix,
    memo: HashMap<(usize, usize, Vec<usize>), f64>,
}

impl<'a> RecursivePartialCorr<'a> {
    pub fn new(corr: &'a SymmetricMatrix) -> Self {
        Self { corr, memo: HashMap::new() }
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    pub fn get(&mut self, i: usize, j: usize, z: &[usize]) -> Result<f64> {
        let p = self.corr.dim();
        if i == j || i >= p || j >= p || z.iter().any(|&k| k == i || k == j || k >= p) {
            return Err(LinalgError::ShapeMismatch(format!("invalid query ({i}, {j} | {z:?})")));
        }
        let mut z = z.to_vec();
        z.sort_unstable();
        z.dedup();
        self.eval(i.min(j), i.max(j), z)
    }

    fn eval(&mut self, i: usize, j: usize, z: Vec<usize>) -> Result<f64> {
        if z.is_empty() {
            return Ok(self.corr.get(i, j));
        }
        let key = (i, j, z);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let (i, j, z) = key;
        let z0 = z[0];
        let rest = z[1..].to_vec();
        let rij = self.eval(i, j, rest.clone())?;
        let riz = self.eval(i.min(z0), i.max(z0), rest.clone())?;
        let rjz = self.eval(j.min(z0), j.max(z0), rest)?;
        let denom = ((1.0 - riz * riz) * (1.0 - rjz * rjz)).max(0.0).sqrt();
        if denom <= 1e-12 {
            return Err(LinalgError::DegenerateDenominator(denom));
        }
        let v = (rij - riz * rjz) / denom;
        self.memo.insert((i, j, z), v);
        Ok(v)
    }
}

/// One-shot form of [`RecursivePartialCorr::get`].
pub fn partial_corr_recursive(
    corr: &SymmetricMatrix,
    i: usize,
    j: usize,
    z: &[usize],
) -> Result<f64> {
    RecursivePartialCorr::new(corr).get(i, j, z)
}

/// Scales a covariance to unit diagonal.
pub fn correlation_from_covariance(cov: &SymmetricMatrix) -> SymmetricMatrix {
    let d: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
    let p = cov.dim();
    let mut out = Matrix::identity(p);
    for i in 0..p {
        for j in i + 1..p {
            let v = cov.get(i, j) / (d[i] * d[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    SymmetricMatrix(out)
}
