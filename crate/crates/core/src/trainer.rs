//! The steering objective and its optimization.
//!
//! `total = E[Σ_k ‖u_k‖² + V(x_k)] + λ · nll`, where `nll` drops the
//! policy-independent constant `E[log p_i]` from `KL(ρ_N ‖ ρ_f)`.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::{Distribution, TargetDistribution};
use crate::error::{Error, Result};
use crate::flow::{nll_on_tape, rollout, rollout_on_tape, RolloutBatch};
use crate::policy::PolicyStack;
use crate::rng::{stream, Stream};
use crate::systems::{ObstacleField, SystemSpec};
use crate::tensor::Tensor;

/// A fully assembled steering problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub system: SystemSpec<f64>,
    pub source: Distribution<f64>,
    pub target: Distribution<f64>,
    pub obstacles: ObstacleField<f64>,
    pub lambda: f64,
}

impl Problem {
    pub fn new(
        system: SystemSpec<f64>,
        source: Distribution<f64>,
        target: Distribution<f64>,
        obstacles: ObstacleField<f64>,
        lambda: f64,
    ) -> Result<Self> {
        target.as_target()?;
        let n = system.state_dim();
        if source.dim() != n || target.dim() != n {
            return Err(Error::dim(format!(
                "source ({}) and target ({}) must match the state dimension {n}",
                source.dim(),
                target.dim()
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::config("lambda", "λ must be positive"));
        }
        if let Some(&bad) = obstacles.position().iter().find(|&&i| i >= n) {
            return Err(Error::config("obstacles.position", format!("index {bad} for n = {n}")));
        }
        Ok(Self {
            system,
            source,
            target,
            obstacles,
            lambda,
        })
    }

    pub fn target_pdf(&self) -> &dyn TargetDistribution<f64> {
        self.target.as_target().expect("checked at construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Power iterations after each update.
    pub power_iters: usize,
    /// Fixed number of gradient shards; results do not depend on `threads`.
    pub shards: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 5000,
            seed: 0,
            eval_every: 100,
            eval_samples: 1000,
            power_iters: 1,
            shards: 8,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples", "must be at least 1");
        }
        if self.power_iters == 0 {
            return bad("power_iters", "must be at least 1");
        }
        if self.shards == 0 {
            return bad("shards", "must be at least 1");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `θ ← θ - lr (m̂/(√v̂ + ε) + wd θ)`.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor<f64>>, grads: &[Tensor<f64>]) -> Result<()> {
        let params: Vec<&mut Tensor<f64>> = params.collect();
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::dim("optimizer state does not match parameter count"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::dim(format!("parameter {i}: shape mismatch")));
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((th, &gr), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *th -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *th);
            }
        }
        Ok(())
    }
}

/// Mean objective terms over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub effort: f64,
    pub potential: f64,
    pub nll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(effort: f64, potential: f64, nll: f64, lambda: f64) -> Self {
        Self {
            effort,
            potential,
            nll,
            total: effort + potential + lambda * nll,
        }
    }

    fn check(&self, step: usize) -> Result<()> {
        for (term, v) in [
            ("effort", self.effort),
            ("potential", self.potential),
            ("nll", self.nll),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: term.into(),
                });
            }
        }
        Ok(())
    }
}

/// Loss and gradients of one mini-batch, in `params_mut` order.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor<f64>>,
}

/// Loss of a shard, each term already divided by the full batch size
/// `denom` so shard results simply add up.
fn shard_gradient(problem: &Problem, stack: &PolicyStack<f64>, x0: Tensor<f64>, denom: usize) -> Result<BatchGradient> {
    let rows = x0.rows();
    let w = rows as f64 / denom as f64;
    let mut tape = Tape::new();
    let bound = stack.bind(&mut tape)?;
    let x = tape.constant(x0);
    let tr = rollout_on_tape(&mut tape, &problem.system, stack, &bound, x)?;

    let mut effort_sum = None;
    for &u in &tr.controls {
        let s = tape.squared_norm(u);
        effort_sum = Some(match effort_sum {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let mut pot_sum = None;
    for &xk in &tr.states[..tr.states.len() - 1] {
        if let Some(v) = problem.obstacles.potential_on_tape(&mut tape, xk)? {
            let s = tape.sum(v);
            pot_sum = Some(match pot_sum {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    let inv = (denom as f64).recip();
    let nll = nll_on_tape(&mut tape, &tr, problem.target_pdf())?;
    let nll = tape.scale(nll, w);
    let mut total = tape.scale(nll, problem.lambda);
    let mut effort = 0.0;
    let mut potential = 0.0;
    if let Some(e) = effort_sum {
        let e = tape.scale(e, inv);
        effort = tape.value(e).item();
        total = tape.add(total, e)?;
    }
    if let Some(p) = pot_sum {
        let p = tape.scale(p, inv);
        potential = tape.value(p).item();
        total = tape.add(total, p)?;
    }
    let loss = LossBreakdown {
        effort,
        potential,
        nll: tape.value(nll).item(),
        total: tape.value(total).item(),
    };
    let g = tape.backward(total)?;
    let grads = bound
        .params()
        .iter()
        .map(|&p| g.get(p).expect("bound parameter").clone())
        .collect();
    Ok(BatchGradient { loss, grads })
}

/// Splits `0..len` into `parts` contiguous, nearly equal ranges (empty ones dropped).
fn partition(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, len.max(1));
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        if size > 0 {
            out.push(start..start + size);
        }
        start += size;
    }
    out
}

fn rows_of(x: &Tensor<f64>, r: std::ops::Range<usize>) -> Tensor<f64> {
    let cols = x.cols();
    Tensor::new(r.len(), cols, x.as_slice()[r.start * cols..r.end * cols].to_vec()).expect("finite rows")
}

/// Runs `job` on every shard, spreading shards over up to `threads` workers;
/// results come back in shard order.
fn map_shards<R: Send>(shards: usize, threads: usize, job: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if threads <= 1 || shards <= 1 {
        return (0..shards).map(&job).collect();
    }
    let groups = partition(shards, threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .into_iter()
            .map(|g| {
                let job = &job;
                s.spawn(move || g.map(job).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Loss and exact gradient of the objective on the batch `x0`.
pub fn batch_gradient(
    problem: &Problem,
    stack: &PolicyStack<f64>,
    x0: &Tensor<f64>,
    shards: usize,
    threads: usize,
) -> Result<BatchGradient> {
    let ranges = partition(x0.rows(), shards);
    let results = map_shards(ranges.len(), threads, |i| {
        shard_gradient(problem, stack, rows_of(x0, ranges[i].clone()), x0.rows())
    });
    let mut acc: Option<BatchGradient> = None;
    for r in results {
        let r = r?;
        acc = Some(match acc {
            None => r,
            Some(mut a) => {
                a.loss.effort += r.loss.effort;
                a.loss.potential += r.loss.potential;
                a.loss.nll += r.loss.nll;
                a.loss.total += r.loss.total;
                for (g, h) in a.grads.iter_mut().zip(&r.grads) {
                    g.add_assign(h);
                }
                a
            }
        });
    }
    acc.ok_or_else(|| Error::contract("empty batch"))
}

/// Objective terms of a plain rollout.
pub fn evaluate_batch(problem: &Problem, batch: &RolloutBatch<f64>) -> LossBreakdown {
    let b = batch.batch_size() as f64;
    let effort = batch.effort().iter().sum::<f64>() / b;
    let mut potential = 0.0;
    if !problem.obstacles.is_empty() {
        for xk in &batch.states[..batch.states.len() - 1] {
            for r in 0..xk.rows() {
                potential += problem.obstacles.potential(xk.row(r));
            }
        }
        potential /= b;
    }
    LossBreakdown::new(effort, potential, batch.nll(problem.target_pdf()), problem.lambda)
}

/// Plain rollout of a large set, in fixed-size chunks spread over threads.
pub fn rollout_chunked(
    problem: &Problem,
    stack: &PolicyStack<f64>,
    x0: &Tensor<f64>,
    chunks: usize,
    threads: usize,
) -> Result<RolloutBatch<f64>> {
    let ranges = partition(x0.rows(), chunks);
    let parts = map_shards(ranges.len(), threads, |i| {
        rollout(&problem.system, stack, &rows_of(x0, ranges[i].clone()))
    });
    let mut out: Option<RolloutBatch<f64>> = None;
    for p in parts {
        let p = p?;
        out = Some(match out {
            None => p,
            Some(mut a) => {
                for (s, t) in a.states.iter_mut().zip(&p.states) {
                    *s = stack_rows(s, t);
                }
                for (s, t) in a.controls.iter_mut().zip(&p.controls) {
                    *s = stack_rows(s, t);
                }
                for (s, t) in a.logdets.iter_mut().zip(&p.logdets) {
                    s.extend_from_slice(t);
                }
                a
            }
        });
    }
    out.ok_or_else(|| Error::contract("empty evaluation set"))
}

fn stack_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Tensor::new(a.rows() + b.rows(), a.cols(), data).expect("finite rows")
}

/// `E[log p_i(x_0)]` over `x0`: exact for a Gaussian source, a sample mean
/// for a mixture, unavailable for a sample-only source.
pub fn source_log_density(source: &Distribution<f64>, x0: &Tensor<f64>) -> Option<f64> {
    match source {
        Distribution::Gaussian(g) => Some(-g.entropy()),
        Distribution::Gmm(g) => {
            Some((0..x0.rows()).map(|r| g.log_pdf(x0.row(r))).sum::<f64>() / x0.rows() as f64)
        }
        Distribution::Empirical(_) => None,
    }
}


#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// `nll + E[log p_i]`; `None` when the source has no explicit density.
    pub kl_estimate: Option<f64>,
    pub seconds: f64,
    /// Largest normalized-weight spectral norm at this record.
    pub max_layer_norm: f64,
}

impl EvalRecord {
    /// `effort + potential + λ KL`, comparable to the benchmark cost.
    pub fn cost(&self, lambda: f64) -> Option<f64> {
        self.kl_estimate
            .map(|kl| self.loss.effort + self.loss.potential + lambda * kl)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceLog {
    pub records: Vec<EvalRecord>,
}

impl ConvergenceLog {
    pub const HEADER: &'static str = "step,effort,potential,nll,total,kl_estimate,seconds";

    /// With `reproducible`, the timing column is written as 0 so identical
    /// seeds give identical bytes.
    pub fn write_csv<W: Write>(&self, w: &mut W, reproducible: bool) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.records {
            let kl = r.kl_estimate.map(|v| v.to_string()).unwrap_or_default();
            let secs = if reproducible { 0.0 } else { r.seconds };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.loss.effort, r.loss.potential, r.loss.nll, r.loss.total, kl, secs
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Held-out evaluation states drawn from the source on the eval stream.
pub fn eval_set(problem: &Problem, cfg: &TrainConfig) -> Result<Tensor<f64>> {
    Ok(problem
        .source
        .sample(cfg.eval_samples, &mut stream(cfg.seed, Stream::Eval))?
        .into_samples())
}

pub fn evaluate(
    problem: &Problem,
    stack: &PolicyStack<f64>,
    x0: &Tensor<f64>,
    cfg: &TrainConfig,
    step: usize,
    seconds: f64,
) -> Result<EvalRecord> {
    let batch = rollout_chunked(problem, stack, x0, cfg.shards, cfg.threads).map_err(|e| match e {
        Error::NonFinite(term) => Error::Divergence { step, term },
        other => other,
    })?;
    let loss = evaluate_batch(problem, &batch);
    loss.check(step)?;
    Ok(EvalRecord {
        step,
        loss,
        kl_estimate: source_log_density(&problem.source, x0).map(|lp| loss.nll + lp),
        seconds,
        max_layer_norm: stack.max_normalized_norm(),
    })
}

/// Progress callback, invoked after each evaluation.
pub type Observer<'a> = dyn FnMut(&EvalRecord) + 'a;

/// `cfg.steps` AdamW iterations from `stack`; evaluations at step 0, every
/// `eval_every` steps and at the end.
pub fn train(
    problem: &Problem,
    mut stack: PolicyStack<f64>,
    cfg: &TrainConfig,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<(PolicyStack<f64>, ConvergenceLog)> {
    cfg.validate()?;
    stack.budget().check(&problem.system)?;
    let started = Instant::now();
    let eval_x = eval_set(problem, cfg)?;
    let mut batches = stream(cfg.seed, Stream::Batches);
    let mut opt = AdamW::from_config(cfg);
    let mut log = ConvergenceLog::default();
    let mut record = |log: &mut ConvergenceLog, stack: &PolicyStack<f64>, step: usize| -> Result<()> {
        let r = evaluate(problem, stack, &eval_x, cfg, step, started.elapsed().as_secs_f64())?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&r);
        }
        log.records.push(r);
        Ok(())
    };
    record(&mut log, &stack, 0)?;
    for step in 1..=cfg.steps {
        let x0 = problem.source.sample(cfg.batch_size, &mut batches)?.into_samples();
        let bg = batch_gradient(problem, &stack, &x0, cfg.shards, cfg.threads).map_err(|e| match e {
            Error::Singular { step: k, detail } => Error::Singular {
                step: k,
                detail: format!("training step {step}: {detail}"),
            },
            other => other,
        })?;
        bg.loss.check(step)?;
        if let Some(i) = bg.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                term: format!("gradient of parameter {i}"),
            });
        }
        opt.step(stack.params_mut(), &bg.grads)?;
        stack.power_iterate(cfg.power_iters);
        if step % cfg.eval_every == 0 && step != cfg.steps {
            record(&mut log, &stack, step)?;
        }
    }
    stack.finalize();
    if cfg.steps > 0 {
        record(&mut log, &stack, cfg.steps)?;
    }
    Ok((stack, log))
}

/// Draws from a batch stream without training; exposed for reproducibility checks.
pub fn draw_batch<R: Rng + ?Sized>(problem: &Problem, count: usize, rng: &mut R) -> Result<Tensor<f64>> {
    Ok(problem.source.sample(count, rng)?.into_samples())
}
