//! The closed loop as a discrete normalizing flow.
//!
//! Each step `Φ_k(x) = x + φ_k(x) + B_k π_k(x)` is recorded together with
//! `log det ∇Φ_k(x)`, so the maximum-likelihood term can be differentiated
//! through the volume change. A plain (tape-free) path serves evaluation and
//! inversion.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::distributions::TargetDistribution;
use crate::error::{Error, Result};
use crate::policy::{BoundStack, PolicyStack};
use crate::scalar::Scalar;
use crate::systems::{Drift, SystemSpec};
use crate::tensor::{kron, Lu, Tensor};

/// Defaults for fixed-point inversion.
pub const INVERT_TOL: f64 = 1e-10;
pub const INVERT_MAX_ITER: usize = 200;

/// Nodes produced by one recorded step; all `B x _`.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub next: Var,
    pub control: Var,
    pub logdet: Var,
}

/// A recorded rollout: `N + 1` states, `N` controls and `N` log-dets.
#[derive(Clone, Debug)]
pub struct TapeRollout {
    pub states: Vec<Var>,
    pub controls: Vec<Var>,
    pub logdets: Vec<Var>,
}

/// `x + φ_k(x) + B_k π_k(x)` and its log-Jacobian-determinant, on the tape.
pub fn step_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sys: &SystemSpec<T>,
    stack: &PolicyStack<T>,
    bound: &BoundStack,
    k: usize,
    x: Var,
) -> Result<StepVars> {
    let n = sys.state_dim();
    let b = sys.input_matrix(k)?;
    let phi = sys.residual_on_tape(tape, k, x)?;
    let u = stack.act_on_tape(tape, bound, k, x)?;
    let bu = sys.input_on_tape(tape, k, u)?;
    let drifted = tape.add(x, phi)?;
    let next = tape.add(drifted, bu)?;

    // Row-flattened ∇Φ = I + ∇φ + B ∇π.
    let j_pi = tape.jacobian_rows(u, x)?;
    let lift = tape.constant(kron(b, &Tensor::identity(n)));
    let mut jac = tape.matmul_t(j_pi, false, lift, true)?;
    let eye = Tensor::<T>::identity(n);
    match sys.drift() {
        Drift::Linear(m) => {
            let c = tape.constant(Tensor::new(1, n * n, eye.add(m).into_vec())?);
            jac = tape.add_row(jac, c)?;
        }
        Drift::Saturating { .. } => {
            let j_phi = tape.jacobian_rows(phi, x)?;
            jac = tape.add(jac, j_phi)?;
            let c = tape.constant(Tensor::new(1, n * n, eye.into_vec())?);
            jac = tape.add_row(jac, c)?;
        }
    }
    let logdet = tape.logdet(jac, n).map_err(|e| e.at_step(k))?;
    Ok(StepVars {
        next,
        control: u,
        logdet,
    })
}

/// Records `F = Φ_{N-1} ∘ … ∘ Φ_0` from `x0`.
pub fn rollout_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sys: &SystemSpec<T>,
    stack: &PolicyStack<T>,
    bound: &BoundStack,
    x0: Var,
) -> Result<TapeRollout> {
    check_horizon(sys, stack)?;
    let horizon = sys.horizon();
    let mut out = TapeRollout {
        states: Vec::with_capacity(horizon + 1),
        controls: Vec::with_capacity(horizon),
        logdets: Vec::with_capacity(horizon),
    };
    out.states.push(x0);
    let mut x = x0;
    for k in 0..horizon {
        let s = step_on_tape(tape, sys, stack, bound, k, x)?;
        out.states.push(s.next);
        out.controls.push(s.control);
        out.logdets.push(s.logdet);
        x = s.next;
    }
    Ok(out)
}

/// `-(1/B) Σ_b [log p_f(x_N) + Σ_k ℓ_k]`, the policy-dependent part of
/// `KL(ρ_N ‖ ρ_f)`.
pub fn nll_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    rollout: &TapeRollout,
    target: &dyn TargetDistribution<T>,
) -> Result<Var> {
    let last = *rollout.states.last().expect("rollout has an initial state");
    let mut acc = target.log_pdf_on_tape(tape, last)?;
    for &l in &rollout.logdets {
        acc = tape.add(acc, l)?;
    }
    let mean = tape.mean(acc);
    Ok(tape.scale(mean, -T::one()))
}

fn check_horizon<T: Scalar>(sys: &SystemSpec<T>, stack: &PolicyStack<T>) -> Result<()> {
    if stack.horizon() != sys.horizon() {
        return Err(Error::dim(format!(
            "{} policies for horizon {}",
            stack.horizon(),
            sys.horizon()
        )));
    }
    Ok(())
}

/// Full per-sample trajectories of a batch, evaluated without a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch<T> {
    /// `N + 1` tensors of shape `B x n`.
    pub states: Vec<Tensor<T>>,
    /// `N` tensors of shape `B x m`.
    pub controls: Vec<Tensor<T>>,
    /// `N` vectors of length `B`.
    pub logdets: Vec<Vec<T>>,
}

impl<T: Scalar> RolloutBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &Tensor<T> {
        self.states.last().expect("rollout has an initial state")
    }

    /// `L^(b) = Σ_k ℓ_k^(b)`.
    pub fn total_logdet(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch_size()];
        for step in &self.logdets {
            for (o, &l) in out.iter_mut().zip(step) {
                *o += l;
            }
        }
        out
    }

    /// Per-sample `Σ_k ‖u_k‖²`.
    pub fn effort(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch_size()];
        for u in &self.controls {
            for (b, o) in out.iter_mut().enumerate() {
                *o += u.row(b).iter().map(|&v| v * v).sum::<T>();
            }
        }
        out
    }

    /// `-(1/B) Σ_b [log p_f(x_N) + L]`.
    pub fn nll(&self, target: &dyn TargetDistribution<T>) -> T {
        let total = self.total_logdet();
        let last = self.terminal();
        let b = T::from_usize(self.batch_size()).expect("batch fits");
        -(0..self.batch_size())
            .map(|i| target.log_pdf(last.row(i)) + total[i])
            .sum::<T>()
            / b
    }

    /// Appends rows `sample_id,k,x_1..x_n,u_1..u_m,logdet_k`, numbering
    /// samples from `first_id`. The final state has empty control and
    /// log-det fields.
    pub fn write_csv_rows<W: Write>(&self, w: &mut W, first_id: usize) -> Result<()> {
        let m = self.controls.first().map_or(0, Tensor::cols);
        for b in 0..self.batch_size() {
            for k in 0..=self.horizon() {
                write!(w, "{}", first_id + b)?;
                write!(w, ",{k}")?;
                for v in self.states[k].row(b) {
                    write!(w, ",{v}")?;
                }
                if k < self.horizon() {
                    for v in self.controls[k].row(b) {
                        write!(w, ",{v}")?;
                    }
                    write!(w, ",{}", self.logdets[k][b])?;
                } else {
                    for _ in 0..=m {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Header for [`RolloutBatch::write_csv_rows`].
pub fn trajectory_header(n: usize, m: usize) -> String {
    let mut cols = vec!["sample_id".to_string(), "k".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=m).map(|i| format!("u_{i}")));
    cols.push("logdet_k".into());
    cols.join(",")
}

/// One plain step for a `B x n` batch: next states, controls, log-dets.
pub fn step<T: Scalar>(
    sys: &SystemSpec<T>,
    stack: &PolicyStack<T>,
    k: usize,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let n = sys.state_dim();
    let b = sys.input_matrix(k)?;
    let phi = sys.residual_batch(k, x)?;
    let (u, j_pi) = stack.act_with_jacobian(k, x)?;
    let next = x.add(&phi).add(&u.matmul_t(false, b, true));
    let lift = kron(b, &Tensor::identity(n));
    let j_flat = j_pi.matmul_t(false, &lift, true);
    let mut logdets = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let mut j = Tensor::new(n, n, j_flat.row(r).to_vec())?;
        j.add_assign(&Tensor::identity(n));
        j.add_assign(&sys.residual_jacobian(k, x.row(r))?);
        let (sign, logabs) = Lu::factor(&j)?.log_abs_det();
        if !(sign > T::zero()) || logabs < T::lit(1e-300f64.ln()) {
            return Err(Error::Singular {
                step: Some(k),
                detail: format!("sample {r}: det sign {sign}, log|det| {logabs}"),
            });
        }
        logdets.push(logabs);
    }
    Ok((next, u, logdets))
}

pub fn rollout<T: Scalar>(sys: &SystemSpec<T>, stack: &PolicyStack<T>, x0: &Tensor<T>) -> Result<RolloutBatch<T>> {
    check_horizon(sys, stack)?;
    if x0.cols() != sys.state_dim() {
        return Err(Error::dim("initial batch width differs from state dimension"));
    }
    let horizon = sys.horizon();
    let mut batch = RolloutBatch {
        states: Vec::with_capacity(horizon + 1),
        controls: Vec::with_capacity(horizon),
        logdets: Vec::with_capacity(horizon),
    };
    batch.states.push(x0.clone());
    for k in 0..horizon {
        let (next, u, l) = step(sys, stack, k, &batch.states[k])?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("state at step {}", k + 1)));
        }
        batch.states.push(next);
        batch.controls.push(u);
        batch.logdets.push(l);
    }
    Ok(batch)
}

/// `g_k(x) = φ_k(x) + B_k π_k(x)` for a batch.
fn residual_map<T: Scalar>(sys: &SystemSpec<T>, stack: &PolicyStack<T>, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    let phi = sys.residual_batch(k, x)?;
    let u = stack.act(k, x)?;
    Ok(phi.add(&u.matmul_t(false, sys.input_matrix(k)?, true)))
}

/// Outcome of a fixed-point inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion<T> {
    pub x: Tensor<T>,
    pub iterations: usize,
    /// Largest per-sample `‖Φ_k(x) - y‖`.
    pub residual: T,
}

/// Solves `Φ_k(x) = y` row-wise by `x ← y - g_k(x)`, starting from `x = y`.
pub fn invert_step<T: Scalar>(
    sys: &SystemSpec<T>,
    stack: &PolicyStack<T>,
    k: usize,
    y: &Tensor<T>,
    tol: T,
    max_iter: usize,
) -> Result<Inversion<T>> {
    if !(tol > T::zero()) {
        return Err(Error::contract("inversion tolerance must be positive"));
    }
    let mut x = y.clone();
    let mut worst = T::infinity();
    for it in 0..=max_iter {
        let g = residual_map(sys, stack, k, &x)?;
        // r = Φ(x) - y; the update x ← y - g(x) is x ← x - r.
        let r = x.add(&g).sub(y);
        worst = (0..r.rows())
            .map(|i| r.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .fold(T::zero(), T::max);
        if worst <= tol {
            return Ok(Inversion {
                x,
                iterations: it,
                residual: worst,
            });
        }
        if !worst.is_finite() {
            break;
        }
        if it < max_iter {
            x = y.sub(&g);
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual: worst.to_f64_lossy(),
    })
}

/// `F⁻¹(x_N)` by inverting the steps from `N - 1` down to 0.
pub fn invert_flow<T: Scalar>(
    sys: &SystemSpec<T>,
    stack: &PolicyStack<T>,
    xn: &Tensor<T>,
    tol: T,
    max_iter: usize,
) -> Result<Tensor<T>> {
    check_horizon(sys, stack)?;
    let mut x = xn.clone();
    for k in (0..sys.horizon()).rev() {
        x = invert_step(sys, stack, k, &x, tol, max_iter)?.x;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::GaussianSpec;
    use crate::policy::LipschitzBudget;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(sys: &SystemSpec<f64>, widths: &[usize], alpha: f64, seed: u64, spread: f64) -> PolicyStack<f64> {
        let budget = LipschitzBudget::derive(alpha, sys).unwrap();
        let mut stack = PolicyStack::init(widths, budget, sys, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in stack.params_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-spread..spread);
            }
        }
        stack.finalize();
        stack
    }

    fn zero_stack(sys: &SystemSpec<f64>, widths: &[usize]) -> PolicyStack<f64> {
        let budget = LipschitzBudget::derive(0.9, sys).unwrap();
        PolicyStack::init(widths, budget, sys, 1).unwrap()
    }

    #[test]
    fn zero_policy_step_examples() {
        let sys = SystemSpec::<f64>::double_integrator_2d(0.1, 4).unwrap();
        let stack = zero_stack(&sys, &[4, 8, 2]);
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 5.0, 8.0]]).unwrap();
        let (next, u, l) = step(&sys, &stack, 0, &x).unwrap();
        assert_eq!(u, Tensor::zeros(1, 2));
        assert!(next.sub(&Tensor::row_vector(&[0.5, 0.8, 5.0, 8.0])).max_abs() < 1e-15);
        assert_eq!(l, vec![0.0]);

        let sat = SystemSpec::<f64>::saturating_drift_2d(1.0, 2).unwrap();
        let stack = zero_stack(&sat, &[2, 8, 1]);
        let (next, _, l) = step(&sat, &stack, 0, &Tensor::row_vector(&[0.0, 0.0])).unwrap();
        assert!(next.sub(&Tensor::row_vector(&[0.1, 0.0])).max_abs() < 1e-15);
        assert!(l[0].abs() < 1e-15);

        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape).unwrap();
        let xv = tape.constant(Tensor::row_vector(&[0.0, 0.0]));
        let s = step_on_tape(&mut tape, &sat, &stack, &bound, 0, xv).unwrap();
        assert!(tape.value(s.logdet).item().abs() < 1e-15);
    }

    #[test]
    fn zero_policy_linear_rollout_has_zero_logdet() {
        let sys = SystemSpec::<f64>::double_integrator_2d(0.1, 30).unwrap();
        let stack = zero_stack(&sys, &[4, 8, 2]);
        let x0 = Tensor::from_rows(&[vec![0.0, 0.0, 5.0, 8.0], vec![0.0, 0.0, 5.0, 8.0]]).unwrap();
        let batch = rollout(&sys, &stack, &x0).unwrap();
        assert!(batch.terminal().sub(&Tensor::from_rows(&[vec![15.0, 24.0, 5.0, 8.0], vec![15.0, 24.0, 5.0, 8.0]]).unwrap()).max_abs() < 1e-12);
        assert_eq!(batch.total_logdet(), vec![0.0, 0.0]);
        assert_eq!(batch.terminal().row(0), batch.terminal().row(1));
    }

    #[test]
    fn tape_and_plain_rollouts_agree() {
        for (sys, widths) in [
            (SystemSpec::<f64>::double_integrator_2d(0.1, 3).unwrap(), vec![4, 8, 8, 2]),
            (SystemSpec::<f64>::saturating_drift_2d(1.0, 3).unwrap(), vec![2, 8, 8, 1]),
        ] {
            let stack = perturbed(&sys, &widths, 0.9, 3, 0.8);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let xs = Tensor::from_fn(5, sys.state_dim(), |_, _| rng.random_range(-2.0..2.0));
            let plain = rollout(&sys, &stack, &xs).unwrap();
            let mut tape = Tape::new();
            let bound = stack.bind(&mut tape).unwrap();
            let x0 = tape.constant(xs.clone());
            let tr = rollout_on_tape(&mut tape, &sys, &stack, &bound, x0).unwrap();
            for k in 0..3 {
                assert!(tape.value(tr.states[k + 1]).sub(&plain.states[k + 1]).max_abs() < 1e-12);
                let l = tape.value(tr.logdets[k]);
                for b in 0..5 {
                    assert!((l.get(b, 0) - plain.logdets[k][b]).abs() < 1e-12);
                    assert!(plain.logdets[k][b] != 0.0);
                }
            }
            let target = GaussianSpec::standard(sys.state_dim());
            let nll = nll_on_tape(&mut tape, &tr, &target).unwrap();
            assert!((tape.value(nll).item() - plain.nll(&target)).abs() < 1e-12);
        }
    }

    #[test]
    fn logdet_respects_contraction_floor() {
        let sys = SystemSpec::<f64>::saturating_drift_2d(1.0, 4).unwrap();
        let stack = perturbed(&sys, &[2, 16, 16, 1], 0.9, 5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs = Tensor::from_fn(500, 2, |_, _| rng.random_range(-4.0..4.0));
        let batch = rollout(&sys, &stack, &xs).unwrap();
        for k in 0..4 {
            let rate = stack.budget().contraction(k, &sys).unwrap();
            let floor = 2.0 * (1.0 - rate).ln();
            assert!(batch.logdets[k].iter().all(|&l| l > floor));
        }
    }

    #[test]
    fn invert_step_examples() {
        let sys = SystemSpec::<f64>::saturating_drift_2d(1.0, 2).unwrap();
        let stack = perturbed(&sys, &[2, 16, 1], 0.9, 6, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = Tensor::from_fn(50, 2, |_, _| rng.random_range(-3.0..3.0));
        let (y, _, _) = step(&sys, &stack, 1, &xs).unwrap();
        let inv = invert_step(&sys, &stack, 1, &y, 1e-12, 2000).unwrap();
        assert!(inv.x.sub(&xs).max_abs() < 1e-10);
        assert!(matches!(
            invert_step(&sys, &stack, 1, &y, 1e-12, 1),
            Err(Error::Convergence { iterations: 1, .. })
        ));

        let lin = SystemSpec::<f64>::double_integrator_2d(0.1, 1).unwrap();
        let zero = zero_stack(&lin, &[4, 4, 2]);
        let y = Tensor::from_fn(3, 4, |_, _| rng.random_range(-3.0..3.0));
        let inv = invert_step(&lin, &zero, 0, &y, 1e-12, 200).unwrap();
        let a_inv = lin.a_matrix().unwrap().inverse().unwrap();
        assert!(inv.x.sub(&y.matmul_t(false, &a_inv, true)).max_abs() < 1e-11);
        // The drift residual is nilpotent, so the iteration terminates quickly.
        let norm = y.frobenius_norm();
        let bound = ((1e-12 / norm).ln() / 0.1f64.ln()).ceil() as usize + 1;
        assert!(inv.iterations <= bound);
    }

    #[test]
    fn invert_flow_round_trips() {
        let sys = SystemSpec::<f64>::double_integrator_2d(0.1, 6).unwrap();
        let stack = perturbed(&sys, &[4, 16, 2], 0.9, 7, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = Tensor::from_fn(40, 4, |_, _| rng.random_range(-3.0..3.0));
        let batch = rollout(&sys, &stack, &xs).unwrap();
        let back = invert_flow(&sys, &stack, batch.terminal(), 1e-12, 500).unwrap();
        assert!(back.sub(&xs).max_abs() < 1e-8);

        let zero = zero_stack(&sys, &[4, 4, 2]);
        let xn = Tensor::from_fn(2, 4, |_, _| rng.random_range(-3.0..3.0));
        let mut expected = xn.clone();
        let a_inv = sys.a_matrix().unwrap().inverse().unwrap();
        for _ in 0..6 {
            expected = expected.matmul_t(false, &a_inv, true);
        }
        let got = invert_flow(&sys, &zero, &xn, 1e-12, 200).unwrap();
        assert!(got.sub(&expected).max_abs() < 1e-10);

        let empty = SystemSpec::<f64>::double_integrator_2d(0.1, 0).unwrap();
        let none = PolicyStack::init(&[4, 4, 2], LipschitzBudget::uniform(0.9, 9.0, 0), &empty, 0).unwrap();
        assert_eq!(invert_flow(&empty, &none, &xn, 1e-12, 10).unwrap(), xn);
    }

    #[test]
    fn trajectory_csv_layout() {
        let sys = SystemSpec::<f64>::saturating_drift_2d(1.0, 2).unwrap();
        let stack = zero_stack(&sys, &[2, 4, 1]);
        let batch = rollout(&sys, &stack, &Tensor::row_vector(&[0.0, 0.0])).unwrap();
        let mut buf = Vec::new();
        writeln!(buf, "{}", trajectory_header(2, 1)).unwrap();
        batch.write_csv_rows(&mut buf, 7).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,k,x_1,x_2,u_1,logdet_k");
        assert_eq!(lines[1], "7,0,0,0,0,0");
        assert_eq!(lines[3].split(',').count(), 6);
        assert!(lines[3].ends_with(",,"));
    }
}
