//! Linear-Gaussian covariance steering with a KL terminal penalty.
//!
//! Under an affine policy `u_k = K_k (x_k - μ_k) + v_k` on `x⁺ = A x + B u`
//! the state stays Gaussian and the expected cost has a closed form, so the
//! best affine policy is found by minimizing that closed form directly.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::distributions::{gaussian_kl, GaussianSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AffinePolicy {
    pub gains: Vec<Tensor<f64>>,
    pub feedforward: Vec<Vec<f64>>,
}

impl AffinePolicy {
    pub fn zero(n: usize, m: usize, horizon: usize) -> Self {
        Self {
            gains: vec![Tensor::zeros(m, n); horizon],
            feedforward: vec![vec![0.0; m]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// `K_k (x - μ_k) + v_k` for one state.
    pub fn act(&self, k: usize, x: &[f64], mean: &[f64]) -> Vec<f64> {
        let g = &self.gains[k];
        (0..g.rows())
            .map(|i| {
                let mut s = self.feedforward[k][i];
                for j in 0..g.cols() {
                    s += g.get(i, j) * (x[j] - mean[j]);
                }
                s
            })
            .collect()
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        if self.feedforward.len() != self.gains.len() {
            return Err(Error::dim("affine policy: gain and feedforward counts differ"));
        }
        for (k, (g, v)) in self.gains.iter().zip(&self.feedforward).enumerate() {
            if g.shape() != [m, n] || v.len() != m {
                return Err(Error::dim(format!(
                    "affine policy step {k}: gain {:?}, feedforward {} for n = {n}, m = {m}",
                    g.shape(),
                    v.len()
                )));
            }
        }
        Ok(())
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (g, v) in self.gains.iter().zip(&self.feedforward) {
            out.extend_from_slice(g.as_slice());
            out.extend_from_slice(v);
        }
        out
    }

    fn unflatten(x: &[f64], n: usize, m: usize, horizon: usize) -> Self {
        let stride = m * n + m;
        let mut gains = Vec::with_capacity(horizon);
        let mut feedforward = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let s = &x[k * stride..(k + 1) * stride];
            gains.push(Tensor::from_raw(m, n, s[..m * n].to_vec()));
            feedforward.push(s[m * n..].to_vec());
        }
        Self { gains, feedforward }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTrajectory {
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Tensor<f64>>,
}

impl MomentTrajectory {
    pub fn terminal(&self) -> Result<GaussianSpec<f64>> {
        let k = self.means.len() - 1;
        GaussianSpec::new(self.means[k].clone(), self.covs[k].clone())
    }
}

fn check_dims(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize)> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::dim(format!(
            "covariance steering: A is {:?}, B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((n, b.cols()))
}

/// Exact mean and covariance recursion under an affine policy.
pub fn propagate(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    policy: &AffinePolicy,
    mu0: &[f64],
    sigma0: &Tensor<f64>,
) -> Result<MomentTrajectory> {
    let (n, m) = check_dims(a, b)?;
    policy.check(n, m)?;
    if mu0.len() != n || sigma0.shape() != [n, n] {
        return Err(Error::dim("propagate: initial moments do not match A"));
    }
    let mut means = vec![mu0.to_vec()];
    let mut covs = vec![sigma0.clone()];
    for k in 0..policy.horizon() {
        let mu = &means[k];
        let v = &policy.feedforward[k];
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    s += a.get(i, j) * mu[j];
                }
                for j in 0..m {
                    s += b.get(i, j) * v[j];
                }
                s
            })
            .collect();
        let closed = a.add(&b.matmul(&policy.gains[k]));
        let cov = closed
            .matmul(&covs[k])
            .matmul_t(false, &closed, true)
            .symmetrize();
        means.push(next);
        covs.push(cov);
    }
    Ok(MomentTrajectory { means, covs })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCost {
    pub effort: f64,
    pub kl: f64,
    pub total: f64,
}

/// Expected cost `Σ tr(K Σ Kᵀ) + ‖v‖² + λ KL(ρ_N ‖ ρ_f)` of an affine policy.
pub fn analytic_cost(
    traj: &MomentTrajectory,
    policy: &AffinePolicy,
    lambda: f64,
    target: &GaussianSpec<f64>,
) -> Result<AffineCost> {
    if traj.covs.len() != policy.horizon() + 1 {
        return Err(Error::dim("analytic_cost: trajectory and policy horizons differ"));
    }
    let mut effort = 0.0;
    for k in 0..policy.horizon() {
        let g = &policy.gains[k];
        effort += g.matmul(&traj.covs[k]).matmul_t(false, g, true).trace();
        effort += policy.feedforward[k].iter().map(|x| x * x).sum::<f64>();
    }
    let kl = gaussian_kl(&traj.terminal()?, target)?;
    Ok(AffineCost {
        effort,
        kl,
        total: effort + lambda * kl,
    })
}

#[derive(Clone, Debug)]
pub struct SteeringProblem {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub source: GaussianSpec<f64>,
    pub target: GaussianSpec<f64>,
    pub lambda: f64,
    pub horizon: usize,
}

impl SteeringProblem {
    pub fn new(
        a: Tensor<f64>,
        b: Tensor<f64>,
        source: GaussianSpec<f64>,
        target: GaussianSpec<f64>,
        lambda: f64,
        horizon: usize,
    ) -> Result<Self> {
        let (n, _) = check_dims(&a, &b)?;
        if source.mean().len() != n || target.mean().len() != n {
            return Err(Error::dim("steering problem: boundary dimensions do not match A"));
        }
        if !(lambda > 0.0) {
            return Err(Error::config("lambda", "must be positive"));
        }
        if horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        Ok(Self {
            a,
            b,
            source,
            target,
            lambda,
            horizon,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn propagate(&self, policy: &AffinePolicy) -> Result<MomentTrajectory> {
        propagate(&self.a, &self.b, policy, self.source.mean(), self.source.cov())
    }

    pub fn cost(&self, policy: &AffinePolicy) -> Result<AffineCost> {
        analytic_cost(&self.propagate(policy)?, policy, self.lambda, &self.target)
    }

    /// Cost and gradient with respect to the flattened `(K_k, v_k)` sequence.
    fn cost_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let policy = AffinePolicy::unflatten(x, n, m, self.horizon);
        let mut tape = Tape::new();
        let a = tape.constant(self.a.clone());
        let b = tape.constant(self.b.clone());
        let mut mu = tape.constant(Tensor::row_vector(self.source.mean()));
        let mut sigma = tape.constant(self.source.cov().clone());
        let mut params: Vec<(Var, Var)> = Vec::with_capacity(self.horizon);
        let mut effort: Option<Var> = None;
        for k in 0..self.horizon {
            let g = tape.param(policy.gains[k].clone());
            let v = tape.param(Tensor::row_vector(&policy.feedforward[k]));
            params.push((g, v));
            let gs = tape.matmul(g, sigma)?;
            let quad = tape.mul(gs, g)?;
            let tr = tape.sum(quad);
            let vv = tape.squared_norm(v);
            let step = tape.add(tr, vv)?;
            effort = Some(match effort {
                Some(e) => tape.add(e, step)?,
                None => step,
            });
            let mu_a = tape.matmul_t(mu, false, a, true)?;
            let v_b = tape.matmul_t(v, false, b, true)?;
            mu = tape.add(mu_a, v_b)?;
            let bg = tape.matmul(b, g)?;
            let closed = tape.add(a, bg)?;
            let cs = tape.matmul(closed, sigma)?;
            sigma = tape.matmul_t(cs, false, closed, true)?;
        }
        let effort = effort.expect("horizon is at least 1");
        let kl = self.kl_on_tape(&mut tape, mu, sigma)?;
        let scaled = tape.scale(kl, self.lambda);
        let total = tape.add(effort, scaled)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("benchmark cost {value}")));
        }
        let grads = tape.backward(total)?;
        let mut flat = Vec::with_capacity(x.len());
        for (g, v) in params {
            flat.extend_from_slice(grads.get(g).expect("gain gradient").as_slice());
            flat.extend_from_slice(grads.get(v).expect("feedforward gradient").as_slice());
        }
        Ok((value, flat))
    }

    fn kl_on_tape(&self, tape: &mut Tape<f64>, mu: Var, sigma: Var) -> Result<Var> {
        let n = self.state_dim();
        let prec = self.target.cov().inverse()?.symmetrize();
        let prec_v = tape.constant(prec);
        let weighted = tape.mul(prec_v, sigma)?;
        let trace = tape.sum(weighted);
        let mu_f = tape.constant(Tensor::row_vector(self.target.mean()));
        let d = tape.sub(mu, mu_f)?;
        let dp = tape.matmul(d, prec_v)?;
        let dpd = tape.mul(dp, d)?;
        let quad = tape.sum(dpd);
        let flat = tape.reshape(sigma, 1, n * n)?;
        let logdet = tape.logdet(flat, n)?;
        let s = tape.add(trace, quad)?;
        let s = tape.sub(s, logdet)?;
        let s = tape.add_scalar(s, self.target.log_det_cov() - n as f64);
        Ok(tape.scale(s, 0.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub starts: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop once the gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop once the cost improves by less than this (relative) over a window of iterates.
    pub rel_tol: f64,
    /// Standard deviation of the random initial gains for starts after the first.
    pub init_scale: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            iterations: 2000,
            seed: 0,
            grad_tol: 1e-9,
            rel_tol: 1e-14,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StartResult {
    pub cost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Cost at every accepted iterate.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub policy: AffinePolicy,
    pub cost: AffineCost,
    pub starts: Vec<StartResult>,
}

impl Benchmark {
    /// Relative spread of the per-start final costs.
    pub fn spread(&self) -> f64 {
        let lo = self.starts.iter().map(|s| s.cost).fold(f64::INFINITY, f64::min);
        let hi = self.starts.iter().map(|s| s.cost).fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo.abs().max(f64::MIN_POSITIVE)
    }
}

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;
const STALL_WINDOW: usize = 20;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// L-BFGS with Armijo backtracking. Only decreasing iterates are accepted.
fn lbfgs(
    problem: &SteeringProblem,
    mut x: Vec<f64>,
    opts: &OptimizeOptions,
) -> Result<(Vec<f64>, StartResult)> {
    let (mut f, mut g) = problem.cost_and_grad(&x)?;
    let mut history = vec![f];
    let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;
    while iterations < opts.iterations && max_abs(&g) > opts.grad_tol {
        iterations += 1;
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = if mem.is_empty() { 1.0 / max_abs(&g).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            // A trial that leaves the SPD cone reports an error; treat it as a failed step.
            if let Ok((ft, gt)) = problem.cost_and_grad(&trial) {
                if ft <= f + ARMIJO * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if mem.len() == MEMORY {
                mem.remove(0);
            }
            mem.push((s, y, 1.0 / sy));
        }
        x = xn;
        f = fn_;
        g = gn;
        history.push(f);
        if history.len() > STALL_WINDOW {
            let old = history[history.len() - 1 - STALL_WINDOW];
            if old - f <= opts.rel_tol * f.abs().max(1.0) {
                break;
            }
        }
    }
    let grad_norm = max_abs(&g);
    Ok((
        x,
        StartResult {
            cost: f,
            iterations,
            grad_norm,
            history,
        },
    ))
}

/// Best affine policy over several starts; the first start is the zero policy.
pub fn optimize_affine(problem: &SteeringProblem, opts: &OptimizeOptions) -> Result<Benchmark> {
    if opts.starts == 0 {
        return Err(Error::config("starts", "need at least one start"));
    }
    let (n, m) = (problem.state_dim(), problem.input_dim());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut starts = Vec::with_capacity(opts.starts);
    for s in 0..opts.starts {
        let mut x0 = AffinePolicy::zero(n, m, problem.horizon).flatten();
        if s > 0 {
            let mut rng = substream(opts.seed, Stream::Benchmark, s as u64);
            let stride = m * n + m;
            for (i, v) in x0.iter_mut().enumerate() {
                if i % stride < m * n {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = opts.init_scale * z;
                }
            }
        }
        let (x, result) = lbfgs(problem, x0, opts)?;
        if best.as_ref().is_none_or(|(c, _)| result.cost < *c) {
            best = Some((result.cost, x));
        }
        starts.push(result);
    }
    let (_, x) = best.expect("at least one start");
    let policy = AffinePolicy::unflatten(&x, n, m, problem.horizon);
    let cost = problem.cost(&policy)?;
    Ok(Benchmark {
        policy,
        cost,
        starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(sigma_f: f64, lambda: f64) -> SteeringProblem {
        SteeringProblem::new(
            Tensor::identity(1),
            Tensor::identity(1),
            GaussianSpec::standard(1),
            GaussianSpec::new(vec![0.0], Tensor::scalar(sigma_f)).unwrap(),
            lambda,
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_policy_is_open_loop() {
        let a = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = AffinePolicy::zero(2, 1, 3);
        let s0 = Tensor::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let t = propagate(&a, &b, &p, &[1.0, 2.0], &s0).unwrap();
        let a3 = a.matmul(&a).matmul(&a);
        let want = a3.matmul(&s0).matmul_t(false, &a3, true);
        for (x, y) in t.covs[3].as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((t.means[3][0] - 4.0).abs() < 1e-12);
        assert!((t.means[3][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn feedforward_only_effort() {
        let problem = scalar_problem(1.0, 1.0);
        let mut p = AffinePolicy::zero(1, 1, 1);
        p.feedforward[0][0] = 0.7;
        let c = problem.cost(&p).unwrap();
        assert!((c.effort - 0.49).abs() < 1e-14);
        // terminal N(0.7, 1) against N(0, 1)
        assert!((c.kl - 0.245).abs() < 1e-14);
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let a = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![0.1]]).unwrap();
        let target = GaussianSpec::new(vec![1.0, 0.0], Tensor::diag(&[0.5, 0.3])).unwrap();
        let problem =
            SteeringProblem::new(a, b, GaussianSpec::standard(2), target, 3.0, 3).unwrap();
        let x: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64 - 4.0)).collect();
        let (_, g) = problem.cost_and_grad(&x).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (problem.cost_and_grad(&xp).unwrap().0 - problem.cost_and_grad(&xm).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn already_at_target_needs_no_control() {
        let problem = scalar_problem(1.0, 1e3);
        let bench = optimize_affine(&problem, &OptimizeOptions::default()).unwrap();
        assert!(bench.cost.total.abs() < 1e-10);
        assert!(bench.policy.gains[0].get(0, 0).abs() < 1e-6);
        assert!(bench.policy.feedforward[0][0].abs() < 1e-6);
    }

    // Scalar oracle: with σ² = (1 + K)² the cost is K² + λ/2 (σ²/s − 1 − ln(σ²/s)).
    fn scalar_oracle(s: f64, lambda: f64) -> f64 {
        let f = |k: f64| {
            let r = (1.0 + k) * (1.0 + k) / s;
            k * k + 0.5 * lambda * (r - 1.0 - r.ln())
        };
        let df = |k: f64| 2.0 * k + lambda * (1.0 + k) / s - lambda / (1.0 + k);
        // the optimum lies between K = 0 and the K solving (1+K)² = s
        let (mut lo, mut hi) = (0.0_f64.min(s.sqrt() - 1.0), 0.0_f64.max(s.sqrt() - 1.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if df(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let k = 0.5 * (lo + hi);
        assert!(f(k) <= f(0.0));
        k
    }

    #[test]
    fn scalar_gain_matches_bisection() {
        for &(s, lambda) in &[(0.25, 4.0), (2.0, 1.0), (0.6, 10.0)] {
            let problem = scalar_problem(s, lambda);
            let bench = optimize_affine(&problem, &OptimizeOptions::default()).unwrap();
            let k = bench.policy.gains[0].get(0, 0);
            let want = scalar_oracle(s, lambda);
            assert!((k - want).abs() < 1e-4, "s={s}: {k} vs {want}");
        }
    }

    #[test]
    fn accepted_costs_never_increase() {
        let a = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![0.1]]).unwrap();
        let target = GaussianSpec::new(vec![2.0, 0.0], Tensor::diag(&[0.2, 0.2])).unwrap();
        let problem =
            SteeringProblem::new(a, b, GaussianSpec::standard(2), target, 10.0, 10).unwrap();
        let bench = optimize_affine(&problem, &OptimizeOptions::default()).unwrap();
        for s in &bench.starts {
            assert!(s.history.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(bench.spread() < 1e-6, "spread {}", bench.spread());
    }
}
