//! Differentiable derivatives: the reverse sweep re-expressed as tape nodes.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// Vector-Jacobian product `seedᵀ ∂y/∂x`, recorded on the tape.
    ///
    /// Only nodes on a path from `x` to `y` are traversed; everything else
    /// (parameters included) is treated as constant for this derivative but
    /// stays differentiable for a later [`Tape::backward`].
    pub fn vjp(&mut self, y: Var, seed: Var, x: Var) -> Result<Var> {
        if self.shape(seed) != self.shape(y) {
            return Err(Error::dim("vjp: seed shape differs from output"));
        }
        let [xr, xc] = self.shape(x);
        if y.0 < x.0 {
            return Ok(self.constant(Tensor::zeros(xr, xc)));
        }
        let span = y.0 - x.0 + 1;
        let mut dep = vec![false; span];
        dep[0] = true;
        for id in x.0 + 1..=y.0 {
            dep[id - x.0] = inputs(&self.nodes[id].op)
                .iter()
                .any(|v| v.0 >= x.0 && dep[v.0 - x.0]);
        }
        let mut adj: Vec<Option<Var>> = vec![None; span];
        adj[span - 1] = Some(seed);
        for id in (x.0 + 1..=y.0).rev() {
            if !dep[id - x.0] {
                continue;
            }
            let Some(g) = adj[id - x.0] else { continue };
            let op = self.nodes[id].op.clone();
            let base = x.0;
            let need = |v: Var| v.0 >= base && dep[v.0 - base];
            let contributions = self.symbolic_backward(Var(id), &op, g, &need)?;
            for (target, grad) in contributions {
                let slot = &mut adj[target.0 - x.0];
                *slot = Some(match *slot {
                    Some(acc) => self.add(acc, grad)?,
                    None => grad,
                });
            }
        }
        match adj[0] {
            Some(g) => Ok(g),
            None => Ok(self.constant(Tensor::zeros(xr, xc))),
        }
    }

    /// Per-sample Jacobians of a batched map `y = f(x)`, `x: B x n`, `y: B x p`.
    ///
    /// Returns a `B x (p·n)` node whose row `b` is `∂y_b/∂x_b` flattened
    /// row-major. Uses `p` recorded reverse passes, one per output coordinate.
    pub fn jacobian_rows(&mut self, y: Var, x: Var) -> Result<Var> {
        let [b, p] = self.shape(y);
        let [bx, _] = self.shape(x);
        if b != bx {
            return Err(Error::dim(format!("jacobian: batch {b} vs {bx}")));
        }
        let mut rows = Vec::with_capacity(p);
        for i in 0..p {
            let seed = self.constant(Tensor::from_fn(b, p, |_, c| {
                if c == i {
                    T::one()
                } else {
                    T::zero()
                }
            }));
            rows.push(self.vjp(y, seed, x)?);
        }
        self.concat_cols(&rows)
    }

    /// Jacobian of a single-sample map `y = f(x)` with `x`, `y` as `1 x n` rows.
    ///
    /// Square maps only; the result is an `n x n` node.
    pub fn jacobian(&mut self, y: Var, x: Var) -> Result<Var> {
        let [yr, n] = self.shape(y);
        let [xr, nx] = self.shape(x);
        if yr != 1 || xr != 1 || n != nx {
            return Err(Error::dim(format!(
                "jacobian expects 1 x n input and output, got {xr}x{nx} -> {yr}x{n}"
            )));
        }
        let flat = self.jacobian_rows(y, x)?;
        self.reshape(flat, n, n)
    }

    /// Emits `(input, contribution)` pairs for one node's reverse step.
    fn symbolic_backward(
        &mut self,
        out: Var,
        op: &Op<T>,
        g: Var,
        need: &dyn Fn(Var) -> bool,
    ) -> Result<Vec<(Var, Var)>> {
        let mut v = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    v.push((*a, g));
                }
                if need(*b) {
                    v.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    v.push((*a, g));
                }
                if need(*b) {
                    v.push((*b, self.scale(g, -T::one())));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    v.push((*a, self.mul(g, *b)?));
                }
                if need(*b) {
                    v.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, s) => v.push((*a, self.scale(g, *s))),
            Op::AddScalar(a, _) => v.push((*a, g)),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if need(a) {
                    let ga = if ta {
                        self.matmul_t(b, tb, g, true)?
                    } else {
                        self.matmul_t(g, false, b, !tb)?
                    };
                    v.push((a, ga));
                }
                if need(b) {
                    let gb = if tb {
                        self.matmul_t(g, true, a, ta)?
                    } else {
                        self.matmul_t(a, !ta, g, false)?
                    };
                    v.push((b, gb));
                }
            }
            Op::Affine { x, w, b } => {
                if need(*x) {
                    v.push((*x, self.matmul_t(g, false, *w, false)?));
                }
                if need(*w) {
                    v.push((*w, self.matmul_t(g, true, *x, false)?));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    v.push((b, self.sum_rows(g)));
                }
            }
            Op::AddRow(a, r) => {
                if need(*a) {
                    v.push((*a, g));
                }
                if need(*r) {
                    v.push((*r, self.sum_rows(g)));
                }
            }
            Op::SumRows(a) => {
                let rows = self.shape(*a)[0];
                v.push((*a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a) => v.push((*a, self.sum_rows(g))),
            Op::RowSum(a) => {
                let cols = self.shape(*a)[1];
                v.push((*a, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(a) => v.push((*a, self.row_sum(g))),
            Op::Tanh(a) => {
                let d = self.one_minus_sq(out);
                v.push((*a, self.mul(g, d)?));
            }
            Op::OneMinusSq(a) => {
                let d = self.scale(*a, T::lit(-2.0));
                v.push((*a, self.mul(g, d)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.scale(out, -T::one());
                let one_minus = self.add_scalar(one_minus, T::one());
                let d = self.mul(out, one_minus)?;
                v.push((*a, self.mul(g, d)?));
            }
            Op::Softplus(a) => {
                let d = self.sigmoid(*a);
                v.push((*a, self.mul(g, d)?));
            }
            Op::Exp(a) => v.push((*a, self.mul(g, out)?)),
            Op::Log(a) => {
                let d = self.recip(*a);
                v.push((*a, self.mul(g, d)?));
            }
            Op::Sqrt(a) => {
                let r = self.recip(out);
                let d = self.scale(r, T::lit(0.5));
                v.push((*a, self.mul(g, d)?));
            }
            Op::Recip(a) => {
                let sq = self.mul(out, out)?;
                let d = self.scale(sq, -T::one());
                v.push((*a, self.mul(g, d)?));
            }
            Op::Rsqrt(a) => {
                let sq = self.mul(out, out)?;
                let cube = self.mul(sq, out)?;
                let d = self.scale(cube, T::lit(-0.5));
                v.push((*a, self.mul(g, d)?));
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                let row = self.broadcast_cols(g, c)?;
                v.push((*a, self.broadcast_rows(row, r)?));
            }
            Op::SquaredNorm(a) => {
                let [r, c] = self.shape(*a);
                let row = self.broadcast_cols(g, c)?;
                let full = self.broadcast_rows(row, r)?;
                let two_a = self.scale(*a, T::lit(2.0));
                v.push((*a, self.mul(full, two_a)?));
            }
            Op::Cols { x, start } => {
                let total = self.shape(*x)[1];
                v.push((*x, self.pad_cols(g, *start, total)?));
            }
            Op::PadCols { x, start, .. } => {
                let w = self.shape(*x)[1];
                v.push((*x, self.cols(g, *start, w)?));
            }
            Op::Reshape(x) => {
                let [r, c] = self.shape(*x);
                v.push((*x, self.reshape(g, r, c)?));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if need(p) {
                        v.push((p, self.cols(g, offset, w)?));
                    }
                    offset += w;
                }
            }
            Op::LogDet { .. } | Op::LogSumExpRows { .. } | Op::SpectralScale { .. } => {
                return Err(Error::contract(
                    "log-det, log-sum-exp and spectral scaling are only once differentiable",
                ))
            }
        }
        Ok(v)
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Affine { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::SumRows(a)
        | Op::BroadcastRows(a)
        | Op::RowSum(a)
        | Op::BroadcastCols(a)
        | Op::Tanh(a)
        | Op::OneMinusSq(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Recip(a)
        | Op::Rsqrt(a)
        | Op::Sum(a)
        | Op::SquaredNorm(a) => vec![*a],
        Op::Cols { x, .. } | Op::PadCols { x, .. } | Op::Reshape(x) => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::LogDet { m, .. } => vec![*m],
        Op::LogSumExpRows { x, .. } => vec![*x],
        Op::SpectralScale { w, .. } => vec![*w],
    }
}
