//! Dense matrices, unit vectors and the singular-value routines the rest of
//! the crate is built on.
//!
//! Everything is row-major `f64`. [`top1_svd`] is the production path (power
//! iteration); [`full_svd_oracle`] is a one-sided Jacobi decomposition kept
//! for verification on small inputs.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Matrix::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec_unchecked(rows, cols, data)
    }

    /// `scale · u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64], scale: f64) -> Self {
        Matrix::from_fn(u.len(), v.len(), |i, j| scale * u[i] * v[j])
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(self.rows, rhs.cols, out))
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn tmatvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Dimension(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "sub")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| c * x).collect())
    }

    /// `self += c · other`
    pub fn axpy(&mut self, c: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    norm(&m.data)
}

/// `trace(aᵀ b)`, the entrywise dot product.
pub fn inner_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "inner product")?;
    Ok(dot(&a.data, &b.data))
}

/// `uᵀ m v` without materialising the outer product.
pub fn bilinear(u: &[f64], m: &Matrix, v: &[f64]) -> Result<f64> {
    if u.len() != m.rows || v.len() != m.cols {
        return Err(Error::Dimension(format!(
            "bilinear form with {}x{} matrix and vectors of length {}, {}",
            m.rows,
            m.cols,
            u.len(),
            v.len()
        )));
    }
    Ok((0..m.rows).map(|i| u[i] * dot(m.row(i), v)).sum())
}

/// Tolerance on `‖x‖ = 1` accepted by [`UnitVector::new`].
pub const UNIT_TOL: f64 = 1e-12;

/// A vector of Euclidean norm one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts `data` only if it already has unit norm.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        let n = norm(&data);
        if data.is_empty() || !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Parameter(format!("vector norm {n} is not 1")));
        }
        Ok(UnitVector(data))
    }

    /// Rescales `data` to unit norm.
    pub fn normalize(data: Vec<f64>) -> Result<Self> {
        let n = norm(&data);
        if data.is_empty() || n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalise vector of norm {n}")));
        }
        Ok(UnitVector(data.into_iter().map(|x| x / n).collect()))
    }

    /// Wraps `data` without checking its norm. Only for fixtures that need to
    /// violate the invariant on purpose.
    pub fn new_unchecked(data: Vec<f64>) -> Self {
        UnitVector(data)
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        UnitVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// Entries below this magnitude are skipped when fixing singular-vector signs.
pub const SIGN_TOL: f64 = 1e-10;

/// One singular triple `σ u vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    pub u: UnitVector,
    pub v: UnitVector,
    pub sigma: f64,
}

impl SvdTriple {
    /// Flips `(u, v)` jointly so the first non-negligible entry of `u` is positive.
    pub fn canonicalize(mut self) -> Self {
        if let Some(&first) = self.u.0.iter().find(|x| x.abs() > SIGN_TOL) {
            if first < 0.0 {
                self.u = self.u.negated();
                self.v = self.v.negated();
            }
        }
        self
    }

    pub fn outer(&self) -> Matrix {
        Matrix::outer(self.u.as_slice(), self.v.as_slice(), self.sigma)
    }
}

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 50_000;

/// Dominant singular triple by alternating power iteration.
///
/// Starts from the normalised all-ones right vector and alternates
/// `v ← mᵀu/‖mᵀu‖`, `u ← m v/‖m v‖`. Converged once `‖m v/σ − u‖ ≤ tol`.
pub fn top1_svd(m: &Matrix, tol: f64, max_iter: usize) -> Result<SvdTriple> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Parameter(format!(
            "tol must be positive and max_iter at least 1 (got {tol}, {max_iter})"
        )));
    }
    let fro = frobenius_norm(m);
    if fro == 0.0 {
        return Err(Error::Degenerate("top-1 SVD of a zero matrix".into()));
    }

    let mut v = vec![1.0 / (m.cols as f64).sqrt(); m.cols];
    let mut mv = m.matvec(&v)?;
    if norm(&mv) <= 1e-12 * fro {
        // all-ones start lies in the null space; use the heaviest row instead
        let heaviest = (0..m.rows)
            .max_by(|&a, &b| norm(m.row(a)).total_cmp(&norm(m.row(b))))
            .expect("nonempty");
        let row = m.row(heaviest);
        let n = norm(row);
        v = row.iter().map(|x| x / n).collect();
        mv = m.matvec(&v)?;
    }
    let n = norm(&mv);
    let mut u: Vec<f64> = mv.iter().map(|x| x / n).collect();

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = m.tmatvec(&u)?;
        let sigma = norm(&w);
        v = w.iter().map(|x| x / sigma).collect();
        let mv = m.matvec(&v)?;
        residual = mv
            .iter()
            .zip(&u)
            .map(|(a, b)| (a / sigma - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let mv_norm = norm(&mv);
        u = mv.iter().map(|x| x / mv_norm).collect();
        if residual <= tol {
            return Ok(SvdTriple {
                u: UnitVector(u),
                v: UnitVector(v),
                sigma: mv_norm,
            }
            .canonicalize());
        }
    }

    let sigma = norm(&m.matvec(&v)?);
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
        last: Box::new(
            SvdTriple {
                u: UnitVector(u),
                v: UnitVector(v),
                sigma,
            }
            .canonicalize(),
        ),
    })
}

/// Largest dimension accepted by [`full_svd_oracle`].
pub const ORACLE_MAX_DIM: usize = 64;

/// All `min(rows, cols)` singular triples, descending in σ, by one-sided
/// (Hestenes) Jacobi rotations.
pub fn full_svd_oracle(m: &Matrix) -> Result<Vec<SvdTriple>> {
    if m.rows.max(m.cols) > ORACLE_MAX_DIM {
        return Err(Error::TooLarge {
            rows: m.rows,
            cols: m.cols,
            limit: ORACLE_MAX_DIM,
        });
    }
    let transposed = m.rows < m.cols;
    let a = if transposed { m.transpose() } else { m.clone() };
    let (rows, cols) = a.shape();

    // column-major working copies
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[(i, j)]).collect()).collect();
    let mut right: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let sigmas: Vec<f64> = work.iter().map(|c| norm(c)).collect();
    order.sort_by(|&x, &y| sigmas[y].total_cmp(&sigmas[x]));
    let sigma_max = sigmas[order[0]];
    let negligible = f64::EPSILON * sigma_max.max(f64::MIN_POSITIVE) * rows as f64;

    let mut lefts: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut triples = Vec::with_capacity(cols);
    for &j in &order {
        let sigma = sigmas[j];
        let left = if sigma > negligible {
            work[j].iter().map(|x| x / sigma).collect()
        } else {
            complete_basis(&lefts, rows)
        };
        lefts.push(left.clone());
        let (u, v) = if transposed {
            (right[j].clone(), left)
        } else {
            (left, right[j].clone())
        };
        triples.push(
            SvdTriple {
                u: UnitVector(u),
                v: UnitVector(v),
                sigma,
            }
            .canonicalize(),
        );
    }
    Ok(triples)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every vector in `basis` (Gram–Schmidt over the
/// standard basis).
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let c = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&e);
        if n > best_norm {
            best_norm = n;
            best = Some(e.into_iter().map(|x| x / n).collect());
        }
        if best_norm > 0.5 {
            break;
        }
    }
    best.expect("basis is not complete")
}
