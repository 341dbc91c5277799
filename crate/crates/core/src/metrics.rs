//! Evaluation metrics: exact discrete 2-Wasserstein distance and flow
//! log-determinant statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distributions::GaussianSpec;
use crate::error::{Error, Result};
use crate::flow::RolloutBatch;
use crate::policy::PolicyStack;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::trainer::{rollout_chunked, Problem};

/// Largest sample count accepted by [`w2_exact`].
pub const MAX_W2_SAMPLES: usize = 2000;

/// Optimal permutation coupling: sample `i` of `X` goes to `assignment[i]` of `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    pub assignment: Vec<usize>,
    /// Mean squared distance under the assignment.
    pub cost: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
pub fn assignment(cost: &Tensor<f64>) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::dim("assignment needs a square cost matrix"));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|m| *m = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = cost.row(i0 - 1);
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    Ok(out)
}

/// Exact 2-Wasserstein distance between two equal-size empirical measures.
pub fn w2_exact(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(f64, CouplingPlan)> {
    let m = x.rows();
    if y.rows() != m {
        return Err(Error::contract(format!(
            "w2_exact needs equal sample counts, got {m} and {}; resample first",
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::dim("w2_exact: sample dimensions differ"));
    }
    if m == 0 || m > MAX_W2_SAMPLES {
        return Err(Error::contract(format!(
            "w2_exact supports 1..={MAX_W2_SAMPLES} samples, got {m}"
        )));
    }
    let cost = Tensor::from_fn(m, m, |i, j| sq_dist(x.row(i), y.row(j)));
    let assignment = assignment(&cost)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    let mean = total / m as f64;
    Ok((
        mean.max(0.0).sqrt(),
        CouplingPlan {
            assignment,
            cost: mean,
        },
    ))
}

/// Closed-form `W2` between two Gaussians.
pub fn gaussian_w2(a: &GaussianSpec<f64>, b: &GaussianSpec<f64>) -> Result<f64> {
    let mean: f64 = sq_dist(a.mean(), b.mean());
    let rb = b.cov().sqrt_psd()?;
    let cross = rb.matmul(a.cov()).matmul(&rb).symmetrize().sqrt_psd()?;
    let tr = a.cov().trace() + b.cov().trace() - 2.0 * cross.trace();
    Ok((mean + tr).max(0.0).sqrt())
}

/// Which log-determinant statistic a report carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogdetReading {
    /// `min_b |Σ_k ℓ_k^(b)|`
    #[default]
    Total,
    /// `min_{b,k} |ℓ_k^(b)|`
    PerStep,
}

pub fn min_abs_logdet(batch: &RolloutBatch<f64>, reading: LogdetReading) -> f64 {
    match reading {
        LogdetReading::Total => batch
            .total_logdet()
            .into_iter()
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min),
        LogdetReading::PerStep => batch
            .logdets
            .iter()
            .flatten()
            .map(|l| l.abs())
            .fold(f64::INFINITY, f64::min),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub experiment: String,
    pub w2: f64,
    pub min_abs_logdet: f64,
    pub train_minutes: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub const HEADER: &'static str = "experiment,w2,min_abs_logdet,train_minutes,eval_samples,seed";

    /// With `reproducible`, the wall-time column is written as 0.
    pub fn write_csv<W: Write>(&self, w: &mut W, reproducible: bool) -> Result<()> {
        let minutes = if reproducible { 0.0 } else { self.train_minutes };
        writeln!(w, "{}", Self::HEADER)?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.experiment, self.w2, self.min_abs_logdet, minutes, self.eval_samples, self.seed
        )?;
        Ok(())
    }
}

/// Report inputs besides the trained policy.
#[derive(Clone, Debug)]
pub struct ReportSettings {
    pub experiment: String,
    pub samples: usize,
    pub seed: u64,
    pub train_seconds: f64,
    pub reading: LogdetReading,
    pub threads: usize,
}

/// Fresh held-out rollout of `stack`, compared against fresh target samples.
pub fn report(
    problem: &Problem,
    stack: &PolicyStack<f64>,
    settings: &ReportSettings,
) -> Result<(MetricsReport, RolloutBatch<f64>)> {
    let x0 = problem
        .source
        .sample(settings.samples, &mut stream(settings.seed, Stream::Report))?
        .into_samples();
    let y = problem
        .target
        .sample(settings.samples, &mut stream(settings.seed, Stream::Target))?
        .into_samples();
    let batch = rollout_chunked(problem, stack, &x0, 8, settings.threads)?;
    let (w2, _) = w2_exact(batch.terminal(), &y)?;
    Ok((
        MetricsReport {
            experiment: settings.experiment.clone(),
            w2,
            min_abs_logdet: min_abs_logdet(&batch, settings.reading),
            train_minutes: settings.train_seconds / 60.0,
            eval_samples: settings.samples,
            seed: settings.seed,
        },
        batch,
    ))
}
