//! Boundary distributions: samplers for the initial law, explicit densities
//! for the target law, and the closed-form Gaussian KL divergence.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that can produce i.i.d. draws of the initial state.
pub trait SourceDistribution<T: Scalar> {
    fn dim(&self) -> usize;

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<EmpiricalSet<T>>;
}

/// A law with an explicit, differentiable log-density.
pub trait TargetDistribution<T: Scalar> {
    fn dim(&self) -> usize;

    fn log_pdf(&self, x: &[T]) -> T;

    /// Row-wise log-density of a `B x n` node, returned as `B x 1`.
    fn log_pdf_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

#[derive(Clone, Debug)]
pub struct GaussianSpec<T> {
    mean: Vec<T>,
    cov: Tensor<T>,
    chol: Tensor<T>,
    /// `(L⁻¹)ᵀ`, so that whitened rows are `(x - μ) (L⁻¹)ᵀ`.
    whiten_t: Tensor<T>,
    log_det_cov: T,
}

impl<T: Scalar> GaussianSpec<T> {
    pub fn new(mean: Vec<T>, cov: Tensor<T>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.shape() != [n, n] {
            return Err(Error::dim(format!(
                "Gaussian mean of length {n} with covariance {:?}",
                cov.shape()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || !cov.is_finite() {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        if !cov.is_symmetric(T::lit(1e-12)) {
            return Err(Error::contract("covariance is not symmetric"));
        }
        let chol = cov.cholesky()?;
        let log_det_cov = (0..n).map(|i| chol.get(i, i).ln()).sum::<T>() * T::lit(2.0);
        let whiten_t = chol.inverse()?.transpose();
        Ok(Self {
            mean,
            cov,
            chol,
            whiten_t,
            log_det_cov,
        })
    }

    /// `N(0, I_n)`.
    pub fn standard(n: usize) -> Self {
        Self::new(vec![T::zero(); n], Tensor::identity(n)).expect("identity covariance")
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor<T> {
        &self.cov
    }

    pub fn cholesky(&self) -> &Tensor<T> {
        &self.chol
    }

    pub fn log_det_cov(&self) -> T {
        self.log_det_cov
    }

    /// Differential entropy `½ (n (1 + log 2π) + log det Σ)`.
    pub fn entropy(&self) -> T {
        let n = T::from_usize(self.mean.len()).expect("dimension fits");
        T::lit(0.5) * (n * (T::one() + (T::lit(2.0) * T::PI()).ln()) + self.log_det_cov)
    }

    fn log_norm(&self) -> T {
        let n = T::from_usize(self.mean.len()).expect("dimension fits");
        -T::lit(0.5) * (n * (T::lit(2.0) * T::PI()).ln() + self.log_det_cov)
    }

    /// The law of `A x + b` for `x` following this Gaussian.
    pub fn push_affine(&self, a: &Tensor<T>, b: &[T]) -> Result<Self> {
        let n = self.mean.len();
        if a.cols() != n || a.rows() != b.len() {
            return Err(Error::dim("affine pushforward shape"));
        }
        let mean = (0..a.rows())
            .map(|r| a.row(r).iter().zip(&self.mean).map(|(&x, &m)| x * m).sum::<T>() + b[r])
            .collect();
        let cov = a.matmul(&self.cov).matmul_t(false, a, true).symmetrize();
        Self::new(mean, cov)
    }
}

impl<T: Scalar> SourceDistribution<T> for GaussianSpec<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<EmpiricalSet<T>> {
        if count == 0 {
            return Err(Error::contract("sample count must be positive"));
        }
        let n = self.mean.len();
        let z = Tensor::from_fn(count, n, |_, _| standard_normal(rng));
        let mut x = z.matmul_t(false, &self.chol, true);
        for r in 0..count {
            for (v, &m) in x.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        EmpiricalSet::new(x, "gaussian")
    }
}

impl<T: Scalar> TargetDistribution<T> for GaussianSpec<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_pdf(&self, x: &[T]) -> T {
        let n = self.mean.len();
        let mut q = T::zero();
        for i in 0..n {
            let mut z = T::zero();
            for j in 0..n {
                z += (x[j] - self.mean[j]) * self.whiten_t.get(j, i);
            }
            q += z * z;
        }
        self.log_norm() - T::lit(0.5) * q
    }

    fn log_pdf_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [_, n] = tape.shape(x);
        if n != self.mean.len() {
            return Err(Error::dim(format!("log_pdf: {n} columns for a {}-D law", self.mean.len())));
        }
        let neg_mean = tape.constant(Tensor::row_vector(&self.mean).scale(-T::one()));
        let centered = tape.add_row(x, neg_mean)?;
        let w = tape.constant(self.whiten_t.clone());
        let z = tape.matmul(centered, w)?;
        let q = tape.row_sum_sq(z)?;
        let half = tape.scale(q, -T::lit(0.5));
        Ok(tape.add_scalar(half, self.log_norm()))
    }
}

#[derive(Clone, Debug)]
pub struct GmmSpec<T> {
    weights: Vec<T>,
    components: Vec<GaussianSpec<T>>,
}

impl<T: Scalar> GmmSpec<T> {
    pub fn new(weights: Vec<T>, components: Vec<GaussianSpec<T>>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::contract(format!(
                "mixture needs matching, non-empty weights ({}) and components ({})",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= T::zero())) {
            return Err(Error::contract("mixture weights must be nonnegative"));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(Error::contract(format!("mixture weights sum to {total}, not 1")));
        }
        let n = components[0].mean.len();
        if components.iter().any(|c| c.mean.len() != n) {
            return Err(Error::dim("mixture components differ in dimension"));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianSpec<T>] {
        &self.components
    }
}

impl<T: Scalar> SourceDistribution<T> for GmmSpec<T> {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<EmpiricalSet<T>> {
        if count == 0 {
            return Err(Error::contract("sample count must be positive"));
        }
        let n = SourceDistribution::dim(self);
        let mut out = Tensor::zeros(count, n);
        for r in 0..count {
            let u = T::lit(rng.random::<f64>());
            let mut acc = T::zero();
            let mut pick = self.components.len() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let comp = &self.components[pick];
            let z: Vec<T> = (0..n).map(|_| standard_normal(rng)).collect();
            for i in 0..n {
                let mut v = comp.mean[i];
                for (j, &zj) in z.iter().enumerate().take(i + 1) {
                    v += comp.chol.get(i, j) * zj;
                }
                out.set(r, i, v);
            }
        }
        EmpiricalSet::new(out, "gmm")
    }
}

impl<T: Scalar> TargetDistribution<T> for GmmSpec<T> {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn log_pdf(&self, x: &[T]) -> T {
        let terms: Vec<T> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(&w, c)| w.ln() + c.log_pdf(x))
            .collect();
        let mx = terms.iter().copied().fold(T::neg_infinity(), T::max);
        if mx == T::neg_infinity() {
            return mx;
        }
        mx + terms.iter().map(|&t| (t - mx).exp()).sum::<T>().ln()
    }

    fn log_pdf_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.components.len());
        for (&w, c) in self.weights.iter().zip(&self.components) {
            let lp = c.log_pdf_on_tape(tape, x)?;
            cols.push(tape.add_scalar(lp, w.ln()));
        }
        let stacked = tape.concat_cols(&cols)?;
        Ok(tape.log_sum_exp_rows(stacked))
    }
}

/// A finite batch of states; `M x n`.
#[derive(Clone, Debug)]
pub struct EmpiricalSet<T> {
    samples: Tensor<T>,
    source: String,
}

impl<T: Scalar> EmpiricalSet<T> {
    pub fn new(samples: Tensor<T>, source: impl Into<String>) -> Result<Self> {
        if samples.rows() == 0 || samples.cols() == 0 {
            return Err(Error::contract("empirical set needs at least one sample"));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite("empirical sample".into()));
        }
        Ok(Self {
            samples,
            source: source.into(),
        })
    }

    /// Reads `M` rows of `n` comma-separated numbers. `#` starts a comment line.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<T>().map_err(|_| {
                        Error::Parse(format!("{} row {}: bad number `{f}`", path.display(), i + 1))
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        let samples = Tensor::from_rows(&rows)?;
        Self::new(samples, path.display().to_string())
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }

    pub fn into_samples(self) -> Tensor<T> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn mean(&self) -> Vec<T> {
        let m = T::from_usize(self.len()).expect("count fits");
        (0..self.samples.cols())
            .map(|c| (0..self.len()).map(|r| self.samples.get(r, c)).sum::<T>() / m)
            .collect()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> Tensor<T> {
        let n = self.samples.cols();
        let mean = self.mean();
        let denom = T::from_usize(self.len().saturating_sub(1).max(1)).expect("count fits");
        let mut cov = Tensor::zeros(n, n);
        for r in 0..self.len() {
            let row = self.samples.row(r);
            for i in 0..n {
                for j in 0..n {
                    let v = cov.get(i, j) + (row[i] - mean[i]) * (row[j] - mean[j]);
                    cov.set(i, j, v);
                }
            }
        }
        cov.scale(denom.recip())
    }
}

impl<T: Scalar> SourceDistribution<T> for EmpiricalSet<T> {
    fn dim(&self) -> usize {
        self.samples.cols()
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<EmpiricalSet<T>> {
        if count == 0 {
            return Err(Error::contract("sample count must be positive"));
        }
        let m = self.len();
        let mut out = Tensor::zeros(count, self.dim());
        for r in 0..count {
            let pick = rng.random_range(0..m);
            out.row_mut(r).copy_from_slice(self.samples.row(pick));
        }
        EmpiricalSet::new(out, format!("resampled {}", self.source))
    }
}

/// Any boundary law named in an experiment.
#[derive(Clone, Debug)]
pub enum Distribution<T> {
    Gaussian(GaussianSpec<T>),
    Gmm(GmmSpec<T>),
    Empirical(EmpiricalSet<T>),
}

impl<T: Scalar> Distribution<T> {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(g) => SourceDistribution::dim(g),
            Distribution::Gmm(g) => SourceDistribution::dim(g),
            Distribution::Empirical(e) => e.dim(),
        }
    }

    /// The target role: only laws with an explicit PDF qualify.
    pub fn as_target(&self) -> Result<&dyn TargetDistribution<T>> {
        match self {
            Distribution::Gaussian(g) => Ok(g),
            Distribution::Gmm(g) => Ok(g),
            Distribution::Empirical(e) => Err(Error::contract(format!(
                "target distribution must expose an explicit PDF; the sample set `{}` only supports sampling",
                e.source()
            ))),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianSpec<T>> {
        match self {
            Distribution::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<EmpiricalSet<T>> {
        match self {
            Distribution::Gaussian(g) => g.sample(count, rng),
            Distribution::Gmm(g) => g.sample(count, rng),
            Distribution::Empirical(e) => e.sample(count, rng),
        }
    }

    /// `E[log p(x)]` when the law has an explicit density and it is known in
    /// closed form (Gaussian only).
    pub fn neg_entropy(&self) -> Option<T> {
        self.as_gaussian().map(|g| -g.entropy())
    }
}

/// Closed-form `KL(a ‖ b)` between Gaussians.
pub fn gaussian_kl<T: Scalar>(a: &GaussianSpec<T>, b: &GaussianSpec<T>) -> Result<T> {
    let n = a.mean.len();
    if b.mean.len() != n {
        return Err(Error::dim("gaussian_kl: dimensions differ"));
    }
    let b_inv = b.whiten_t.matmul_t(false, &b.whiten_t, true);
    let trace: T = b_inv
        .as_slice()
        .iter()
        .zip(a.cov.as_slice())
        .map(|(&x, &y)| x * y)
        .sum();
    let diff: Vec<T> = (0..n).map(|i| b.mean[i] - a.mean[i]).collect();
    let mut quad = T::zero();
    for i in 0..n {
        for j in 0..n {
            quad += diff[i] * b_inv.get(i, j) * diff[j];
        }
    }
    let nn = T::from_usize(n).expect("dimension fits");
    Ok(T::lit(0.5) * (trace + quad + b.log_det_cov - a.log_det_cov - nn))
}
