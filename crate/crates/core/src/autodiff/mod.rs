//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every primitive in evaluation order. Values are computed
//! eagerly, so a node's inputs always precede it and a single reverse sweep
//! ([`Tape::backward`]) visits each node once.
//!
//! Jacobians of batched vector maps ([`Tape::jacobian_rows`]) are built by
//! replaying the reverse sweep *as new tape nodes*. The resulting Jacobian is
//! an ordinary node, so a log-determinant taken of it can itself be
//! differentiated with respect to the parameters.
//!
//! Batched maps follow one convention throughout: row `b` of a `B x n` node is
//! sample `b`, and samples never mix.

mod backward;
mod graph;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use backward::Gradient;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x Wᵀ + b` with `W` stored `out x in`.
    Affine { x: Var, w: Var, b: Option<Var> },
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    RowSum(Var),
    BroadcastCols(Var),
    Tanh(Var),
    OneMinusSq(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Rsqrt(Var),
    Sum(Var),
    SquaredNorm(Var),
    Cols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// Row-wise log-determinant of `n x n` matrices stored flat per row.
    /// Caches the inverse-transposes for the backward pass.
    LogDet { m: Var, inv_t: Tensor<T> },
    /// Row-wise log-sum-exp; caches the softmax weights.
    LogSumExpRows { x: Var, softmax: Tensor<T> },
    /// `W / max(1, uᵀ W v)` with the power-iteration vectors held constant.
    SpectralScale { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a differentiable computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) params: Vec<Var>,
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.params.push(v);
        v
    }

    /// Non-trainable leaf. Jacobians may still be taken with respect to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a, s), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(Error::dim(format!(
                "matmul: {ar}x{ac}{} * {br}x{bc}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, rg))
    }

    /// Dense layer `x Wᵀ + b` for `x: B x in`, `W: out x in`, `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [_, xin] = self.shape(x);
        let [wout, win] = self.shape(w);
        if xin != win {
            return Err(Error::dim(format!("affine: input width {xin} vs weight {wout}x{win}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, wout] {
                return Err(Error::dim(format!("affine: bias shape {:?}", self.shape(b))));
            }
        }
        let mut value = self.value(x).matmul_t(false, self.value(w), true);
        if let Some(b) = b {
            let bias = self.value(b).as_slice().to_vec();
            for r in 0..value.rows() {
                for (o, &bv) in value.row_mut(r).iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Op::Affine { x, w, b }, value, rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(row) != [1, c] {
            return Err(Error::dim(format!("add_row: {r}x{c} with {:?}", self.shape(row))));
        }
        let rv = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (o, &b) in value.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), value, rg))
    }

    /// Column sums, `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &v) in out.as_mut_slice().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumRows(a), out, rg)
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if r != 1 {
            return Err(Error::dim(format!("broadcast_rows of {r}x{c}")));
        }
        let row = self.value(a).as_slice().to_vec();
        let value = Tensor::from_fn(rows, c, |_, j| row[j]);
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastRows(a), value, rg))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
        let value = Tensor::from_raw(t.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::RowSum(a), value, rg)
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if c != 1 {
            return Err(Error::dim(format!("broadcast_cols of {r}x{c}")));
        }
        let t = self.value(a);
        let value = Tensor::from_fn(r, cols, |i, _| t.get(i, 0));
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastCols(a), value, rg))
    }

    /// Row-wise squared Euclidean norm, `r x c -> r x 1`.
    pub fn row_sum_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.row_sum(sq))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// `1 - a²`, the derivative of tanh expressed through its output.
    pub fn one_minus_sq(&mut self, a: Var) -> Var {
        self.unary(a, Op::OneMinusSq(a), |x| T::one() - x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.recip())
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| x.sqrt().recip())
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).expect("count fits");
        let s = self.sum(a);
        self.scale(s, n.recip())
    }

    /// Squared Frobenius norm, `1 x 1`.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).squared_norm());
        let rg = self.rg(a);
        self.push(Op::SquaredNorm(a), value, rg)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + len > c {
            return Err(Error::dim(format!("cols {start}..{} of {r}x{c}", start + len)));
        }
        let t = self.value(x);
        let value = Tensor::from_fn(r, len, |i, j| t.get(i, start + j));
        let rg = self.rg(x);
        Ok(self.push(Op::Cols { x, start }, value, rg))
    }

    /// Places `x` at column offset `start` of a zero tensor `total` wide.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + c > total {
            return Err(Error::dim(format!("pad_cols {r}x{c} at {start} into {total}")));
        }
        let t = self.value(x);
        let value = Tensor::from_fn(r, total, |i, j| {
            if j >= start && j < start + c {
                t.get(i, j - start)
            } else {
                T::zero()
            }
        });
        let rg = self.rg(x);
        Ok(self.push(Op::PadCols { x, start }, value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if rows * cols != t.len() {
            return Err(Error::dim(format!("reshape {:?} to {rows}x{cols}", t.shape())));
        }
        let value = Tensor::from_raw(rows, cols, t.as_slice().to_vec());
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Row-wise `log det` of `n x n` matrices flattened row-major into each row.
    ///
    /// The determinant must be strictly positive: a non-positive or vanishing
    /// (`|det| < 1e-300`) determinant is a singularity error.
    pub fn logdet(&mut self, m: Var, n: usize) -> Result<Var> {
        let [rows, cols] = self.shape(m);
        if cols != n * n {
            return Err(Error::dim(format!("logdet: row width {cols} is not {n}x{n}")));
        }
        let tiny = T::lit(1e-300).ln();
        let mut out = Vec::with_capacity(rows);
        let mut inv_t = Tensor::zeros(rows, n * n);
        for b in 0..rows {
            let mat = Tensor::from_raw(n, n, self.value(m).row(b).to_vec());
            let lu = mat.lu()?;
            let (sign, logabs) = lu.log_abs_det();
            if sign <= T::zero() || logabs < tiny || !logabs.is_finite() {
                return Err(Error::Singular {
                    step: None,
                    detail: format!("sample {b}: det sign {sign}, log|det| {logabs}"),
                });
            }
            let inv = lu.inverse()?;
            let dst = inv_t.row_mut(b);
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = inv.get(j, i);
                }
            }
            out.push(logabs);
        }
        let rg = self.rg(m);
        Ok(self.push(
            Op::LogDet { m, inv_t },
            Tensor::from_raw(rows, 1, out),
            rg,
        ))
    }

    /// Row-wise numerically stabilized `log Σ_j exp(x_j)`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows);
        let mut softmax = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = t.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &v in row {
                s += (v - mx).exp();
            }
            let lse = mx + s.ln();
            for (o, &v) in softmax.row_mut(r).iter_mut().zip(row) {
                *o = (v - lse).exp();
            }
            out.push(lse);
        }
        let rg = self.rg(x);
        self.push(
            Op::LogSumExpRows { x, softmax },
            Tensor::from_raw(rows, 1, out),
            rg,
        )
    }

    /// Spectrally normalized weight `W / max(1, uᵀ W v)`.
    pub fn spectral_scale(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let [r, c] = self.shape(w);
        if u.len() != r || v.len() != c {
            return Err(Error::dim("spectral_scale: power-iteration vectors mismatch"));
        }
        let sigma = bilinear(self.value(w), u, v);
        let value = if sigma > T::one() {
            self.value(w).scale(sigma.recip())
        } else {
            self.value(w).clone()
        };
        let rg = self.rg(w);
        Ok(self.push(
            Op::SpectralScale {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            value,
            rg,
        ))
    }
}

/// `uᵀ W v`.
pub(crate) fn bilinear<T: Scalar>(w: &Tensor<T>, u: &[T], v: &[T]) -> T {
    (0..w.rows())
        .map(|r| u[r] * w.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
