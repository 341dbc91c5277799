use std::collections::BTreeMap;

use super::{sigmoid, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradient<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradient<T> {
    /// Gradient for a parameter leaf. Parameters the output does not depend on
    /// report zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse sweep from a `1 x 1` output. The tape is left intact.
    pub fn backward(&self, output: Var) -> Result<Gradient<T>> {
        if self.shape(output) != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for &p in &self.params {
            let g = grads
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let [r, c] = self.shape(p);
                    Tensor::zeros(r, c)
                });
            out.insert(p, g);
        }
        Ok(Gradient { grads: out })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut send = |v: Var, grad: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], grad);
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a, _) => send(*a, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = if *ta {
                        bv.matmul_t(*tb, g, true)
                    } else {
                        g.matmul_t(false, bv, !*tb)
                    };
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = if *tb {
                        g.matmul_t(true, av, *ta)
                    } else {
                        av.matmul_t(!*ta, g, false)
                    };
                    send(*b, gb);
                }
            }
            Op::Affine { x, w, b } => {
                if self.nodes[x.0].requires_grad {
                    send(*x, g.matmul_t(false, val(*w), false));
                }
                if self.nodes[w.0].requires_grad {
                    send(*w, g.matmul_t(true, val(*x), false));
                }
                if let Some(b) = b {
                    send(*b, column_sums(g));
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                send(*r, column_sums(g));
            }
            Op::SumRows(a) => {
                let rows = val(*a).rows();
                send(*a, Tensor::from_fn(rows, g.cols(), |_, c| g.get(0, c)));
            }
            Op::BroadcastRows(a) => send(*a, column_sums(g)),
            Op::RowSum(a) => {
                let cols = val(*a).cols();
                send(*a, Tensor::from_fn(g.rows(), cols, |r, _| g.get(r, 0)));
            }
            Op::BroadcastCols(a) => {
                let data = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
                send(*a, Tensor::from_raw(g.rows(), 1, data));
            }
            Op::Tanh(a) => send(*a, g.zip_map(y, |g, y| g * (T::one() - y * y))),
            Op::OneMinusSq(a) => {
                let two = T::lit(2.0);
                send(*a, g.zip_map(val(*a), |g, x| -two * g * x));
            }
            Op::Sigmoid(a) => send(*a, g.zip_map(y, |g, s| g * s * (T::one() - s))),
            Op::Softplus(a) => send(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x))),
            Op::Exp(a) => send(*a, g.zip_map(y, |g, y| g * y)),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                send(*a, g.zip_map(y, |g, y| g * half / y));
            }
            Op::Recip(a) => send(*a, g.zip_map(y, |g, y| -g * y * y)),
            Op::Rsqrt(a) => {
                let half = T::lit(0.5);
                send(*a, g.zip_map(y, |g, y| -half * g * y * y * y));
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.item()));
            }
            Op::SquaredNorm(a) => {
                let s = g.item() * T::lit(2.0);
                send(*a, val(*a).scale(s));
            }
            Op::Cols { x, start } => {
                let total = val(*x).cols();
                let (start, w) = (*start, g.cols());
                send(
                    *x,
                    Tensor::from_fn(g.rows(), total, |r, c| {
                        if c >= start && c < start + w {
                            g.get(r, c - start)
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::PadCols { x, start, .. } => {
                let w = val(*x).cols();
                send(*x, Tensor::from_fn(g.rows(), w, |r, c| g.get(r, start + c)));
            }
            Op::Reshape(x) => {
                let [r, c] = val(*x).shape();
                send(*x, Tensor::from_raw(r, c, g.as_slice().to_vec()));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c)));
                    offset += w;
                }
            }
            Op::LogDet { m, inv_t, .. } => {
                let mut out = inv_t.clone();
                for r in 0..out.rows() {
                    let s = g.get(r, 0);
                    for v in out.row_mut(r) {
                        *v *= s;
                    }
                }
                send(*m, out);
            }
            Op::LogSumExpRows { x, softmax } => {
                let mut out = softmax.clone();
                for r in 0..out.rows() {
                    let s = g.get(r, 0);
                    for v in out.row_mut(r) {
                        *v *= s;
                    }
                }
                send(*x, out);
            }
            Op::SpectralScale { w, u, v, sigma } => {
                if *sigma <= T::one() {
                    send(*w, g.clone());
                } else {
                    let wv = val(*w);
                    let inner = g
                        .as_slice()
                        .iter()
                        .zip(wv.as_slice())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    let coef = inner / (*sigma * *sigma);
                    let inv = sigma.recip();
                    send(
                        *w,
                        Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                            g.get(r, c) * inv - coef * u[r] * v[c]
                        }),
                    );
                }
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
