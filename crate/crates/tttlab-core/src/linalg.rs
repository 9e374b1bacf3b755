//! Small dense matrices and vectors, Gaussian sampling and orthonormal bases.
//!
//! Storage is row-major `Vec<f64>`. Everything here is deliberately naive:
//! dimensions in this crate stay in the hundreds, and bit-reproducibility
//! matters more than raw speed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Error;

/// Default relative tolerance for rank decisions in [`diag_pseudoinverse`].
pub const DEFAULT_REL_TOL: f64 = 1e-12;

/// Random state used everywhere in the crate.
///
/// ChaCha with 8 rounds. Streams are selected with `set_stream`, which is how
/// per-trial independence is obtained (see [`trial_rng`]).
pub type RngState = ChaCha8Rng;

/// Generator for a plain seed, stream 0.
pub fn seeded_rng(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator owned by trial `index` of a run seeded with `base_seed`.
///
/// Streams of the same key never overlap, so the result of a trial does not
/// depend on which worker runs it or in what order.
pub fn trial_rng(base_seed: u64, index: u64) -> RngState {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn normal(rng: &mut RngState) -> f64 {
    rng.sample(StandardNormal)
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self, Error> {
        if data.is_empty() {
            return Err(Error::Shape("vector must have dim >= 1".into()));
        }
        Ok(Self { data })
    }

    /// The zero-length vector. Only used for an empty query block.
    pub fn empty() -> Self {
        Self { data: Vec::new() }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self { data: vec![value; dim] }
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
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

    pub fn dot(&self, other: &DenseVector) -> Result<f64, Error> {
        check_len("dot", self.dim(), other.dim())?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn scaled(&self, s: f64) -> DenseVector {
        DenseVector { data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector, Error> {
        check_len("sub", self.dim(), other.dim())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseVector { data })
    }

    pub fn add(&self, other: &DenseVector) -> Result<DenseVector, Error> {
        check_len("add", self.dim(), other.dim())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseVector { data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Build from row-major data. Both dimensions must be at least 1.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, Error> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
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

    /// A matrix with no rows. Only used for an empty query block (k = 0).
    pub fn empty_rows(cols: usize) -> Self {
        Self { rows: 0, cols, data: Vec::new() }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// `a bᵀ`.
    pub fn outer(a: &DenseVector, b: &DenseVector) -> Self {
        Self::from_fn(a.dim(), b.dim(), |i, j| a[i] * b[j])
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        DenseVector { data: (0..self.rows).map(|i| self[(i, j)]).collect() }
    }

    pub fn diagonal(&self) -> DenseVector {
        DenseVector { data: (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect() }
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix, Error> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, Error> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64, Error> {
        Ok(self.sub(other)?.max_abs())
    }

    fn zip_with(&self, op: &str, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix, Error> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s · a bᵀ`.
    pub fn add_outer(&mut self, s: f64, a: &DenseVector, b: &DenseVector) -> Result<(), Error> {
        check_len("add_outer rows", self.rows, a.dim())?;
        check_len("add_outer cols", self.cols, b.dim())?;
        for i in 0..self.rows {
            let sa = s * a[i];
            for (w, bj) in self.row_mut(i).iter_mut().zip(b.as_slice()) {
                *w += sa * bj;
            }
        }
        Ok(())
    }

    /// `self · v`.
    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector, Error> {
        check_len("matvec", self.cols, v.dim())?;
        Ok(DenseVector { data: (0..self.rows).map(|i| dot(self.row(i), v.as_slice())).collect() })
    }

    /// `selfᵀ · v`.
    pub fn tmatvec(&self, v: &DenseVector) -> Result<DenseVector, Error> {
        check_len("tmatvec", self.rows, v.dim())?;
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += vi * x;
            }
        }
        Ok(DenseVector { data: out })
    }

    /// `vᵀ · self · w`.
    pub fn bilinear(&self, v: &DenseVector, w: &DenseVector) -> Result<f64, Error> {
        check_len("bilinear", self.rows, v.dim())?;
        Ok(v.dot(&self.matvec(w)?)?)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
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

fn check_len(op: &str, expected: usize, got: usize) -> Result<(), Error> {
    if expected != got {
        return Err(Error::Shape(format!("{op}: expected length {expected}, got {got}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, Error> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for l in 0..a.cols {
            let ail = a[(i, l)];
            if ail == 0.0 {
                continue;
            }
            for (o, blj) in out.row_mut(i).iter_mut().zip(b.row(l)) {
                *o += ail * blj;
            }
        }
    }
    Ok(out)
}

/// Square-root factor `Q·diag(√λ)` of a covariance `Q·diag(λ)·Qᵀ`.
///
/// `basis == None` stands for `Q = I`, which keeps sampling O(d) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactor {
    basis: Option<DenseMatrix>,
    sqrt_eigs: Vec<f64>,
}

impl CovarianceFactor {
    pub fn identity(d: usize) -> Self {
        Self { basis: None, sqrt_eigs: vec![1.0; d] }
    }

    pub fn diagonal(eigs: &[f64]) -> Result<Self, Error> {
        Ok(Self { basis: None, sqrt_eigs: sqrt_nonneg(eigs)? })
    }

    pub fn from_eigen(basis: DenseMatrix, eigs: &[f64]) -> Result<Self, Error> {
        if basis.shape() != (eigs.len(), eigs.len()) {
            return Err(Error::Shape(format!(
                "factor basis {}x{} vs {} eigenvalues",
                basis.rows,
                basis.cols,
                eigs.len()
            )));
        }
        Ok(Self { basis: Some(basis), sqrt_eigs: sqrt_nonneg(eigs)? })
    }

    pub fn dim(&self) -> usize {
        self.sqrt_eigs.len()
    }

    /// Writes `Q·diag(√λ)·z` into `out`.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        match &self.basis {
            None => {
                for ((o, zi), s) in out.iter_mut().zip(z).zip(&self.sqrt_eigs) {
                    *o = s * zi;
                }
            }
            Some(q) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = q.row(i).iter().zip(z).zip(&self.sqrt_eigs).map(|((qij, zj), s)| qij * s * zj).sum();
                }
            }
        }
    }

    /// The factor as an explicit matrix.
    pub fn to_matrix(&self) -> DenseMatrix {
        let d = self.dim();
        match &self.basis {
            None => DenseMatrix::from_diag(&self.sqrt_eigs),
            Some(q) => DenseMatrix::from_fn(d, d, |i, j| q[(i, j)] * self.sqrt_eigs[j]),
        }
    }
}

fn sqrt_nonneg(eigs: &[f64]) -> Result<Vec<f64>, Error> {
    if eigs.is_empty() {
        return Err(Error::Shape("covariance needs dim >= 1".into()));
    }
    eigs.iter()
        .map(|&l| {
            if l >= 0.0 && l.is_finite() {
                Ok(libm::sqrt(l))
            } else {
                Err(Error::Domain(format!("covariance eigenvalue {l} is not a finite nonnegative number")))
            }
        })
        .collect()
}

/// `rows × cols` matrix whose rows are i.i.d. `N(0, F Fᵀ)` for the factor `F`.
pub fn random_gaussian_matrix(
    rng: &mut RngState,
    rows: usize,
    cols: usize,
    row_covariance: &CovarianceFactor,
) -> Result<DenseMatrix, Error> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("gaussian matrix must be at least 1x1, got {rows}x{cols}")));
    }
    check_len("gaussian matrix factor", cols, row_covariance.dim())?;
    Ok(gaussian_rows(rng, rows, row_covariance))
}

/// Like [`random_gaussian_matrix`] but allows zero rows.
pub(crate) fn gaussian_rows(rng: &mut RngState, rows: usize, factor: &CovarianceFactor) -> DenseMatrix {
    let cols = factor.dim();
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut z = vec![0.0; cols];
    for i in 0..rows {
        for zj in z.iter_mut() {
            *zj = normal(rng);
        }
        factor.apply(&z, out.row_mut(i));
    }
    out
}

/// Haar-distributed `d × d` orthogonal matrix.
///
/// Gram-Schmidt (applied twice) on the columns of a Gaussian matrix. Taking
/// the positive sign of each R diagonal keeps the result Haar.
pub fn random_orthonormal(rng: &mut RngState, d: usize) -> Result<DenseMatrix, Error> {
    if d == 0 {
        return Err(Error::Shape("orthonormal basis needs d >= 1".into()));
    }
    loop {
        let g = DenseMatrix::from_fn(d, d, |_, _| normal(rng));
        if let Some(q) = orthonormalize_columns(&g) {
            return Ok(q);
        }
    }
}

fn orthonormalize_columns(g: &DenseMatrix) -> Option<DenseMatrix> {
    let d = g.cols;
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| g.column(j).into_vec()).collect();
    for j in 0..d {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        let original = libm::sqrt(dot(v, v));
        for _ in 0..2 {
            for qk in done.iter() {
                let p = dot(qk, v);
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= p * qi;
                }
            }
        }
        let norm = libm::sqrt(dot(v, v));
        if !(norm > 1e-8 * original) {
            return None;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
    }
    Some(DenseMatrix::from_fn(d, d, |i, j| cols[j][i]))
}

/// Entrywise pseudo-inverse of a nonnegative vector.
///
/// Entries above `rel_tol · max(v)` are inverted, the rest map to 0.
pub fn diag_pseudoinverse(v: &DenseVector, rel_tol: f64) -> Result<DenseVector, Error> {
    if let Some(bad) = v.as_slice().iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("pseudoinverse of negative or non-finite entry {bad}")));
    }
    let max = v.as_slice().iter().fold(0.0f64, |m, x| m.max(*x));
    let cut = rel_tol * max;
    let data = v.as_slice().iter().map(|&x| if x > cut && x > 0.0 { 1.0 / x } else { 0.0 }).collect();
    Ok(DenseVector { data })
}

/// Neumaier-compensated sum, evaluated left to right.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}
