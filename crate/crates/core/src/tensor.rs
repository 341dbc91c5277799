//! Dense row-major matrices and the small-matrix linear algebra used by the
//! rest of the crate (Cholesky, LU, symmetric eigen-decomposition).

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major 2-D array. Vectors are `1 x n` rows or `n x 1` columns.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}x{}[", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:?}")?;
            }
            if row.len() > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 8 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Tensor<T> {
    /// Validating constructor for data coming from outside the crate.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "shape {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {i} of {rows}x{cols} tensor")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internally produced data.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.data[i * n + i] = T::one();
        }
        out
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut out = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            out.data[i * n + i] = v;
        }
        out
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self::from_raw(1, values.len(), values.to_vec())
    }

    pub fn col_vector(values: &[T]) -> Self {
        Self::from_raw(values.len(), 1, values.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_raw(1, 1, vec![value])
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.squared_norm().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Dense product, optionally transposing either operand.
    pub fn matmul_t(&self, trans_self: bool, other: &Self, trans_other: bool) -> Self {
        let (m, k) = if trans_self {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if trans_other {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch ({m}x{k} * {k2}x{n})");
        let mut out = Self::zeros(m, n);
        let sa = strides(self.cols, trans_self);
        let sb = strides(other.cols, trans_other);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            sa,
            &other.data,
            sb,
            T::zero(),
            &mut out.data,
            (n as isize, 1),
        );
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(false, other, false)
    }

    pub fn symmetrize(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |r, c| (self.get(r, c) + self.get(c, r)) * half)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..r).all(|c| (self.get(r, c) - self.get(c, r)).abs() <= tol))
    }

    /// Lower-triangular Cholesky factor `L` with `L Lᵀ = self`.
    pub fn cholesky(&self) -> Result<Self> {
        let n = self.rows;
        if n != self.cols {
            return Err(Error::dim("cholesky of non-square matrix"));
        }
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > T::zero()) {
                return Err(Error::contract(format!(
                    "matrix is not positive definite (pivot {j} = {d})"
                )));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(l)
    }

    pub fn lu(&self) -> Result<Lu<T>> {
        Lu::factor(self)
    }

    pub fn det(&self) -> Result<T> {
        Ok(self.lu()?.det())
    }

    pub fn inverse(&self) -> Result<Self> {
        self.lu()?.inverse()
    }

    /// Symmetric eigen-decomposition by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues in ascending order and the matrix whose columns are
    /// the matching orthonormal eigenvectors.
    pub fn sym_eigen(&self) -> Result<(Vec<T>, Self)> {
        let n = self.rows;
        if n != self.cols {
            return Err(Error::dim("eigen-decomposition of non-square matrix"));
        }
        let mut a = self.symmetrize();
        let mut v = Self::identity(n);
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            for p in 0..n {
                for q in p + 1..n {
                    off += a.get(p, q) * a.get(p, q);
                }
            }
            let scale = a.squared_norm();
            if off <= eps * eps * scale || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq == T::zero() {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = (aqq - app) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).expect("finite eigenvalues"));
        let values = order.iter().map(|&i| a.get(i, i)).collect();
        let vectors = Self::from_fn(n, n, |r, c| v.get(r, order[c]));
        Ok((values, vectors))
    }

    /// Largest singular value, from the eigenvalues of the smaller Gram matrix.
    pub fn spectral_norm(&self) -> T {
        if self.is_empty() {
            return T::zero();
        }
        let gram = if self.rows <= self.cols {
            self.matmul_t(false, self, true)
        } else {
            self.matmul_t(true, self, false)
        };
        let (values, _) = gram.sym_eigen().expect("gram matrix is square");
        values.last().copied().unwrap_or(T::zero()).max(T::zero()).sqrt()
    }

    /// Principal square root of a symmetric positive semi-definite matrix.
    pub fn sqrt_psd(&self) -> Result<Self> {
        let (values, vectors) = self.sym_eigen()?;
        let roots: Vec<T> = values.iter().map(|&l| l.max(T::zero()).sqrt()).collect();
        let scaled = Self::from_fn(self.rows, self.rows, |r, c| vectors.get(r, c) * roots[c]);
        Ok(scaled.matmul_t(false, &vectors, true))
    }
}

#[inline]
fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    factors: Tensor<T>,
    perm: Vec<usize>,
    sign: T,
    singular: bool,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Tensor<T>) -> Result<Self> {
        let n = a.rows;
        if n != a.cols {
            return Err(Error::dim("LU of non-square matrix"));
        }
        let mut f = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        let mut singular = false;
        for k in 0..n {
            let mut piv = k;
            let mut best = f.get(k, k).abs();
            for r in k + 1..n {
                let v = f.get(r, k).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == T::zero() {
                singular = true;
                continue;
            }
            if piv != k {
                for c in 0..n {
                    let tmp = f.get(k, c);
                    f.set(k, c, f.get(piv, c));
                    f.set(piv, c, tmp);
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let pivot = f.get(k, k);
            for r in k + 1..n {
                let factor = f.get(r, k) / pivot;
                f.set(r, k, factor);
                if factor != T::zero() {
                    for c in k + 1..n {
                        let v = f.get(r, c) - factor * f.get(k, c);
                        f.set(r, c, v);
                    }
                }
            }
        }
        Ok(Self {
            factors: f,
            perm,
            sign,
            singular,
        })
    }

    pub fn det(&self) -> T {
        if self.singular {
            return T::zero();
        }
        let n = self.factors.rows;
        (0..n).fold(self.sign, |acc, i| acc * self.factors.get(i, i))
    }

    /// Returns `(sign, log|det|)`; sign is zero for an exactly singular matrix.
    pub fn log_abs_det(&self) -> (T, T) {
        if self.singular {
            return (T::zero(), T::neg_infinity());
        }
        let n = self.factors.rows;
        let mut sign = self.sign;
        let mut acc = T::zero();
        for i in 0..n {
            let d = self.factors.get(i, i);
            if d < T::zero() {
                sign = -sign;
            }
            acc += d.abs().ln();
        }
        (sign, acc)
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves `A x = b` for every column of `b`.
    pub fn solve(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.factors.rows;
        if b.rows != n {
            return Err(Error::dim("LU solve right-hand side has wrong row count"));
        }
        if self.singular {
            return Err(Error::Singular {
                step: None,
                detail: "LU solve with singular matrix".into(),
            });
        }
        let mut x = Tensor::from_fn(n, b.cols, |r, c| b.get(self.perm[r], c));
        for c in 0..b.cols {
            for r in 0..n {
                let mut s = x.get(r, c);
                for k in 0..r {
                    s -= self.factors.get(r, k) * x.get(k, c);
                }
                x.set(r, c, s);
            }
            for r in (0..n).rev() {
                let mut s = x.get(r, c);
                for k in r + 1..n {
                    s -= self.factors.get(r, k) * x.get(k, c);
                }
                x.set(r, c, s / self.factors.get(r, r));
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Tensor<T>> {
        self.solve(&Tensor::identity(self.factors.rows))
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    Tensor::from_fn(ar * br, ac * bc, |r, c| a.get(r / br, c / bc) * b.get(r % br, c % bc))
}
