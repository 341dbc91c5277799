//! Per-step feedback policies `π_k = α L_π π̂_k`, where `π̂_k` is a tanh MLP
//! whose weights are spectrally normalized.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::systems::SystemSpec;
use crate::tensor::Tensor;

/// Power iterations run at initialization and before export.
pub const FINAL_POWER_ITERS: usize = 50;

/// Cap on the convergence loop run after [`FINAL_POWER_ITERS`].
const MAX_POWER_ITERS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
        }
    }

    fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
        }
    }
}

fn normalize<T: Scalar>(x: &mut [T]) -> bool {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() && norm.is_finite() {
        for v in x.iter_mut() {
            *v /= norm;
        }
        true
    } else {
        false
    }
}

/// One weight matrix with its persistent power-iteration state.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralWeight<T> {
    pub weight: Tensor<T>,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> SpectralWeight<T> {
    /// Runs `iters` power iterations and returns the estimate `σ̂ = uᵀ W v`.
    /// A zero matrix leaves the vectors untouched and reports 0.
    pub fn power_iterate(&mut self, iters: usize) -> T {
        let w = &self.weight;
        for _ in 0..iters {
            let mut v = vec![T::zero(); w.cols()];
            for (r, &ur) in self.u.iter().enumerate() {
                for (vc, &wc) in v.iter_mut().zip(w.row(r)) {
                    *vc += ur * wc;
                }
            }
            if !normalize(&mut v) {
                break;
            }
            let mut u: Vec<T> = (0..w.rows())
                .map(|r| w.row(r).iter().zip(&v).map(|(&a, &b)| a * b).sum())
                .collect();
            if !normalize(&mut u) {
                break;
            }
            self.u = u;
            self.v = v;
        }
        self.sigma()
    }

    /// At least `min_iters` iterations, continued until the estimate settles.
    pub fn power_iterate_converged(&mut self, min_iters: usize) -> T {
        let mut sigma = self.power_iterate(min_iters);
        for _ in 0..MAX_POWER_ITERS {
            let next = self.power_iterate(1);
            if (next - sigma).abs() <= T::lit(1e-14) * next.abs() {
                return next;
            }
            sigma = next;
        }
        sigma
    }

    pub fn sigma(&self) -> T {
        bilinear(&self.weight, &self.u, &self.v)
    }

    /// `W / max(1, σ̂)`.
    pub fn normalized(&self) -> Tensor<T> {
        let s = self.sigma();
        if s > T::one() {
            self.weight.scale(s.recip())
        } else {
            self.weight.clone()
        }
    }
}

/// `W / max(1, σ̂)` after `iters` power iterations, with the estimate.
pub fn spectral_normalize<T: Scalar>(w: &mut SpectralWeight<T>, iters: usize) -> Result<(Tensor<T>, T)> {
    if iters == 0 {
        return Err(Error::contract("spectral normalization needs at least one iteration"));
    }
    let sigma = w.power_iterate(iters);
    Ok((w.normalized(), sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy<T> {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<SpectralWeight<T>>,
    /// `1 x out` per layer.
    biases: Vec<Tensor<T>>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::config(
            "widths",
            format!("need at least two positive layer sizes, got {widths:?}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> MlpPolicy<T> {
    /// Uniform `±1/√fan_in` weights and biases, zero final layer, random unit
    /// power-iteration vectors refined by [`FINAL_POWER_ITERS`] iterations.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let depth = widths.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 0..depth {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = l + 1 == depth;
            let mut draw = |_: usize, _: usize| {
                if last {
                    T::zero()
                } else {
                    T::lit(rng.random_range(-bound..bound))
                }
            };
            let weight = Tensor::from_fn(fan_out, fan_in, &mut draw);
            let bias = Tensor::from_fn(1, fan_out, &mut draw);
            let mut u: Vec<T> = (0..fan_out).map(|_| T::lit(rng.sample(StandardNormal))).collect();
            let mut v: Vec<T> = (0..fan_in).map(|_| T::lit(rng.sample(StandardNormal))).collect();
            normalize(&mut u);
            normalize(&mut v);
            let mut sw = SpectralWeight { weight, u, v };
            sw.power_iterate_converged(FINAL_POWER_ITERS);
            layers.push(sw);
            biases.push(bias);
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation: Activation::Tanh,
            layers,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[SpectralWeight<T>] {
        &self.layers
    }

    pub fn biases(&self) -> &[Tensor<T>] {
        &self.biases
    }

    pub fn power_iterate(&mut self, iters: usize) {
        for l in &mut self.layers {
            l.power_iterate(iters);
        }
    }

    /// Power iteration run to convergence on every layer, for export.
    pub fn finalize(&mut self) {
        for l in &mut self.layers {
            l.power_iterate_converged(FINAL_POWER_ITERS);
        }
    }

    /// Trainable tensors in binding order: per layer, weight then bias.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(l, b)| [&mut l.weight, b])
    }

    /// Unscaled `π̂(x)` for a `B x n` batch, with the per-layer activations
    /// kept for Jacobian evaluation.
    fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>) {
        let mut h = x.clone();
        let mut cache = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, (layer, bias)) in self.layers.iter().zip(&self.biases).enumerate() {
            let w = layer.normalized();
            let mut z = h.matmul_t(false, &w, true);
            for r in 0..z.rows() {
                for (o, &b) in z.row_mut(r).iter_mut().zip(bias.as_slice()) {
                    *o += b;
                }
            }
            if l < last {
                let act = self.activation;
                h = z.map(|v| act.apply(v));
            } else {
                h = z;
            }
            cache.push((w, h.clone()));
        }
        (h, cache)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_cached(x).0
    }

    /// Output and per-sample Jacobians of `π̂`, the latter as `B x (m·n)`
    /// flattened row-major.
    pub fn forward_with_jacobian(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (out, cache) = self.forward_cached(x);
        let (rows, n, m) = (x.rows(), x.cols(), out.cols());
        let last = cache.len() - 1;
        let slopes: Vec<Tensor<T>> = cache[..last]
            .iter()
            .map(|(_, h)| h.map(|y| self.activation.slope_from_output(y)))
            .collect();
        let mut jac = Tensor::zeros(rows, m * n);
        // One batched reverse pass per output coordinate.
        for i in 0..m {
            let w_out = cache[last].0.row(i);
            let mut g = Tensor::from_fn(rows, w_out.len(), |_, c| w_out[c]);
            for l in (0..last).rev() {
                g = g.zip_map(&slopes[l], |a, s| a * s);
                g = g.matmul(&cache[l].0);
            }
            for b in 0..rows {
                jac.row_mut(b)[i * n..(i + 1) * n].copy_from_slice(g.row(b));
            }
        }
        (out, jac)
    }
}

/// Per-step `α` and `L_π` of the invertibility budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBudget<T> {
    pub alpha: T,
    pub lipschitz: Vec<T>,
}

impl<T: Scalar> LipschitzBudget<T> {
    /// `L_π = (1 - L_φ)/σ_B` at every step.
    pub fn derive(alpha: T, sys: &SystemSpec<T>) -> Result<Self> {
        let lipschitz = (0..sys.horizon())
            .map(|k| Ok((T::one() - sys.l_phi(k)?) / sys.sigma_b(k)?))
            .collect::<Result<Vec<_>>>()?;
        let b = Self { alpha, lipschitz };
        b.check(sys)?;
        Ok(b)
    }

    pub fn uniform(alpha: T, l_pi: T, horizon: usize) -> Self {
        Self {
            alpha,
            lipschitz: vec![l_pi; horizon],
        }
    }

    /// Output scale `α L_π` at step `k`.
    pub fn scale(&self, k: usize) -> T {
        self.alpha * self.lipschitz[k]
    }

    /// `α ∈ (0, 1)`, `L_π ≤ (1 - L_φ)/σ_B`, and `α L_π σ_B + L_φ < 1` at every step.
    pub fn check(&self, sys: &SystemSpec<T>) -> Result<()> {
        if !(self.alpha > T::zero() && self.alpha < T::one()) {
            return Err(Error::config("alpha", format!("α = {} must lie in (0, 1)", self.alpha)));
        }
        if self.lipschitz.len() != sys.horizon() {
            return Err(Error::config(
                "lipschitz",
                format!("{} budgets for horizon {}", self.lipschitz.len(), sys.horizon()),
            ));
        }
        for (k, &l) in self.lipschitz.iter().enumerate() {
            let (l_phi, sigma_b) = (sys.l_phi(k)?, sys.sigma_b(k)?);
            let cap = (T::one() - l_phi) / sigma_b;
            if !(l > T::zero()) || l > cap * (T::one() + T::lit(1e-12)) {
                return Err(Error::config(
                    "lipschitz",
                    format!("step {k}: L_π = {l} outside (0, (1 - L_φ)/σ_B = {cap}]"),
                ));
            }
            let rate = self.contraction(k, sys)?;
            if !(rate < T::one()) {
                return Err(Error::config(
                    "lipschitz",
                    format!("step {k}: α L_π σ_B + L_φ = {rate} is not below 1"),
                ));
            }
        }
        Ok(())
    }

    /// `L_g = L_φ + σ_B α L_π`, the contraction rate of the residual at step `k`.
    pub fn contraction(&self, k: usize, sys: &SystemSpec<T>) -> Result<T> {
        Ok(sys.l_phi(k)? + sys.sigma_b(k)? * self.scale(k))
    }
}

/// Policy parameters bound to a tape: normalized weights and biases per layer.
#[derive(Clone, Debug)]
pub struct BoundStack {
    layers: Vec<Vec<(Var, Var)>>,
    params: Vec<Var>,
}

impl BoundStack {
    /// Raw parameter leaves in [`PolicyStack::params_mut`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStack<T> {
    policies: Vec<MlpPolicy<T>>,
    budget: LipschitzBudget<T>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader<T> {
    widths: Vec<usize>,
    alpha: T,
    lipschitz: Vec<T>,
    seed: u64,
    horizon: usize,
    activation: Activation,
}

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> PolicyStack<T> {
    /// Checkpoint: one JSON header line, then `policy,layer,kind,values...`
    /// rows with `kind` in `weight`, `bias`, `u`, `v`. Weights are row-major.
    pub fn to_checkpoint(&self) -> Result<String> {
        let header = CheckpointHeader {
            widths: self.policies[0].widths.clone(),
            alpha: self.budget.alpha,
            lipschitz: self.budget.lipschitz.clone(),
            seed: self.seed,
            horizon: self.policies.len(),
            activation: self.policies[0].activation,
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
        out.push('\n');
        for (k, p) in self.policies.iter().enumerate() {
            for (l, (layer, bias)) in p.layers.iter().zip(&p.biases).enumerate() {
                let rows: [(&str, &[T]); 4] = [
                    ("weight", layer.weight.as_slice()),
                    ("bias", bias.as_slice()),
                    ("u", &layer.u),
                    ("v", &layer.v),
                ];
                for (kind, values) in rows {
                    write!(out, "{k},{l},{kind}").expect("string write");
                    for v in values {
                        write!(out, ",{v}").expect("string write");
                    }
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let header: CheckpointHeader<T> =
            serde_json::from_str(head).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        check_widths(&header.widths)?;
        let depth = header.widths.len() - 1;
        let mut policies: Vec<MlpPolicy<T>> = (0..header.horizon)
            .map(|_| MlpPolicy {
                widths: header.widths.clone(),
                activation: header.activation,
                layers: Vec::with_capacity(depth),
                biases: Vec::with_capacity(depth),
            })
            .collect();
        let mut pending: Vec<Vec<[Option<Vec<T>>; 4]>> =
            vec![vec![[None, None, None, None]; depth]; header.horizon];
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("checkpoint row {}: {what}", i + 2));
            let mut fields = line.split(',');
            let k: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("policy index"))?;
            let l: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("layer index"))?;
            let slot = match fields.next() {
                Some("weight") => 0,
                Some("bias") => 1,
                Some("u") => 2,
                Some("v") => 3,
                _ => return Err(bad("kind")),
            };
            let values = fields
                .map(|f| f.parse::<T>().map_err(|_| bad("number")))
                .collect::<Result<Vec<T>>>()?;
            let entry = pending
                .get_mut(k)
                .and_then(|p| p.get_mut(l))
                .ok_or_else(|| bad("index out of range"))?;
            entry[slot] = Some(values);
        }
        for (k, per) in pending.into_iter().enumerate() {
            for (l, [w, b, u, v]) in per.into_iter().enumerate() {
                let (fan_in, fan_out) = (header.widths[l], header.widths[l + 1]);
                let missing = || Error::Parse(format!("checkpoint: policy {k} layer {l} incomplete"));
                let (w, b, u, v) = (
                    w.ok_or_else(missing)?,
                    b.ok_or_else(missing)?,
                    u.ok_or_else(missing)?,
                    v.ok_or_else(missing)?,
                );
                if u.len() != fan_out || v.len() != fan_in {
                    return Err(Error::Parse(format!("checkpoint: policy {k} layer {l} vector sizes")));
                }
                policies[k].layers.push(SpectralWeight {
                    weight: Tensor::new(fan_out, fan_in, w)?,
                    u,
                    v,
                });
                policies[k].biases.push(Tensor::new(1, fan_out, b)?);
            }
        }
        Ok(Self {
            policies,
            budget: LipschitzBudget {
                alpha: header.alpha,
                lipschitz: header.lipschitz,
            },
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

impl<T: Scalar> PolicyStack<T> {
    /// One independently initialized policy per step, each from its own
    /// sub-stream of `seed`.
    pub fn init(widths: &[usize], budget: LipschitzBudget<T>, sys: &SystemSpec<T>, seed: u64) -> Result<Self> {
        check_widths(widths)?;
        if widths[0] != sys.state_dim() || widths[widths.len() - 1] != sys.input_dim() {
            return Err(Error::config(
                "widths",
                format!(
                    "{widths:?} must start at n = {} and end at m = {}",
                    sys.state_dim(),
                    sys.input_dim()
                ),
            ));
        }
        budget.check(sys)?;
        let policies = (0..sys.horizon())
            .map(|k| {
                let mut rng = crate::rng::substream(seed, crate::rng::Stream::Init, k as u64);
                MlpPolicy::init(widths, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            policies,
            budget,
            seed,
        })
    }

    pub fn horizon(&self) -> usize {
        self.policies.len()
    }

    pub fn budget(&self) -> &LipschitzBudget<T> {
        &self.budget
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policies(&self) -> &[MlpPolicy<T>] {
        &self.policies
    }

    pub fn policy(&self, k: usize) -> Result<&MlpPolicy<T>> {
        self.policies.get(k).ok_or(Error::Index {
            index: k,
            horizon: self.policies.len(),
        })
    }

    pub fn power_iterate(&mut self, iters: usize) {
        for p in &mut self.policies {
            p.power_iterate(iters);
        }
    }

    pub fn finalize(&mut self) {
        for p in &mut self.policies {
            p.finalize();
        }
    }

    /// Every trainable tensor, in the order [`PolicyStack::bind`] registers them.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.policies.iter_mut().flat_map(|p| p.params_mut())
    }

    /// `u = α L_π π̂_k(x)` for a `B x n` batch.
    pub fn act(&self, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.policy(k)?;
        if x.cols() != p.widths[0] {
            return Err(Error::dim("state width differs from policy input"));
        }
        Ok(p.forward(x).scale(self.budget.scale(k)))
    }

    /// Control and its per-sample Jacobian (`B x (m·n)`), both scaled.
    pub fn act_with_jacobian(&self, k: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.policy(k)?;
        if x.cols() != p.widths[0] {
            return Err(Error::dim("state width differs from policy input"));
        }
        let s = self.budget.scale(k);
        let (u, j) = p.forward_with_jacobian(x);
        Ok((u.scale(s), j.scale(s)))
    }

    /// Registers every weight and bias as a tape parameter and records the
    /// spectral normalization once, so all rollouts on this tape share it.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundStack> {
        let mut layers = Vec::with_capacity(self.policies.len());
        let mut params = Vec::new();
        for p in &self.policies {
            let mut per = Vec::with_capacity(p.layers.len());
            for (layer, bias) in p.layers.iter().zip(&p.biases) {
                let w = tape.param(layer.weight.clone());
                let b = tape.param(bias.clone());
                params.push(w);
                params.push(b);
                let wn = tape.spectral_scale(w, &layer.u, &layer.v)?;
                per.push((wn, b));
            }
            layers.push(per);
        }
        Ok(BoundStack { layers, params })
    }

    /// `α L_π π̂_k(x)` recorded on the tape.
    pub fn act_on_tape(&self, tape: &mut Tape<T>, bound: &BoundStack, k: usize, x: Var) -> Result<Var> {
        let p = self.policy(k)?;
        let layers = &bound.layers[k];
        let mut h = x;
        for (l, &(w, b)) in layers.iter().enumerate() {
            h = tape.affine(h, w, Some(b))?;
            if l + 1 < layers.len() {
                h = p.activation.on_tape(tape, h);
            }
        }
        Ok(tape.scale(h, self.budget.scale(k)))
    }

    /// Largest spectral norm over all normalized weights, by eigen-decomposition.
    pub fn max_normalized_norm(&self) -> T {
        self.policies
            .iter()
            .flat_map(|p| p.layers.iter())
            .map(|l| l.normalized().spectral_norm())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sw(weight: Tensor<f64>, seed: u64) -> SpectralWeight<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..weight.rows()).map(|_| rng.sample(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..weight.cols()).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralWeight { weight, u, v }
    }

    fn ex1_stack(seed: u64) -> (SystemSpec<f64>, PolicyStack<f64>) {
        let sys = SystemSpec::double_integrator_2d(0.1, 3).unwrap();
        let budget = LipschitzBudget::uniform(0.9, 9.0, 3);
        let stack = PolicyStack::init(&[4, 16, 16, 2], budget, &sys, seed).unwrap();
        (sys, stack)
    }

    #[test]
    fn spectral_normalize_examples() {
        let mut w = sw(Tensor::diag(&[2.0, 1.0]), 1);
        let (wn, s) = spectral_normalize(&mut w, 50).unwrap();
        assert!((s - 2.0).abs() < 1e-9);
        assert!(wn.sub(&Tensor::diag(&[1.0, 0.5])).max_abs() < 1e-9);

        let half = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.0, 0.0]]).unwrap();
        let mut w = sw(half.clone(), 2);
        let (wn, s) = spectral_normalize(&mut w, 50).unwrap();
        assert!((s - 0.5).abs() < 1e-9);
        assert_eq!(wn, half);

        let mut w = sw(Tensor::identity(3), 3);
        let (wn, s) = spectral_normalize(&mut w, 5).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(wn, Tensor::identity(3));

        let mut w = sw(Tensor::zeros(2, 3), 4);
        let (wn, s) = spectral_normalize(&mut w, 5).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(wn, Tensor::zeros(2, 3));
        assert!(spectral_normalize(&mut w, 0).is_err());
    }

    #[test]
    fn init_examples() {
        let sys = SystemSpec::double_integrator_2d(0.1, 30).unwrap();
        let budget = LipschitzBudget::uniform(0.9, 9.0, 30);
        let stack = PolicyStack::init(&[4, 64, 64, 64, 64, 2], budget, &sys, 7).unwrap();
        assert_eq!(stack.horizon(), 30);
        let x = Tensor::from_fn(5, 4, |r, c| (r * 4 + c) as f64 - 7.0);
        assert_eq!(stack.act(0, &x).unwrap(), Tensor::zeros(5, 2));
        assert!(stack.act(30, &x).is_err());

        let sys4 = SystemSpec::saturating_drift_2d(1.0, 40).unwrap();
        let b4 = LipschitzBudget::derive(0.9, &sys4).unwrap();
        assert!(PolicyStack::init(&[2, 128, 128, 1], b4.clone(), &sys4, 1).is_ok());
        assert!(matches!(
            PolicyStack::init(&[3, 8, 1], b4, &sys4, 1),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn budget_checks() {
        let sys = SystemSpec::double_integrator_2d(0.1, 30).unwrap();
        let b = LipschitzBudget::uniform(0.9, 9.0, 30);
        b.check(&sys).unwrap();
        assert_eq!(b.scale(0), 0.9 * 9.0);
        assert!(b.contraction(0, &sys).unwrap() < 1.0);
        assert!(LipschitzBudget::uniform(1.2, 9.0, 30).check(&sys).is_err());
        assert!(LipschitzBudget::uniform(0.9, 9.5, 30).check(&sys).is_err());
        let sys4 = SystemSpec::<f64>::saturating_drift_2d(1.0, 40).unwrap();
        let d = LipschitzBudget::derive(0.9, &sys4).unwrap();
        assert!((d.lipschitz[0] - 0.9).abs() < 1e-15);
    }

    fn randomize(stack: &mut PolicyStack<f64>, seed: u64, spread: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in stack.params_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-spread..spread);
            }
        }
        stack.finalize();
    }

    #[test]
    fn lipschitz_difference_quotients() {
        let (_, mut stack) = ex1_stack(3);
        randomize(&mut stack, 11, 1.5);
        let cap = stack.budget().scale(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(2000, 4, |_, _| rng.random_range(-3.0..3.0));
        let noise = Tensor::from_fn(2000, 4, |_, _| rng.random_range(-0.5..0.5));
        let y = x.add(&noise);
        let (px, py) = (stack.act(1, &x).unwrap(), stack.act(1, &y).unwrap());
        for r in 0..2000 {
            let num: f64 = px.row(r).iter().zip(py.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = x.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(num.sqrt() / den.sqrt() <= cap * (1.0 + 1e-9));
        }
        assert!(stack.max_normalized_norm() <= 1.0 + 1e-3, "{}", stack.max_normalized_norm());
    }

    #[test]
    fn tape_forward_and_jacobian_agree_with_plain() {
        let (_, mut stack) = ex1_stack(5);
        randomize(&mut stack, 13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let xs = Tensor::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape).unwrap();
        let x = tape.constant(xs.clone());
        let u = stack.act_on_tape(&mut tape, &bound, 2, x).unwrap();
        let j = tape.jacobian_rows(u, x).unwrap();
        let (pu, pj) = stack.act_with_jacobian(2, &xs).unwrap();
        assert!(tape.value(u).sub(&pu).max_abs() < 1e-13);
        assert!(tape.value(j).sub(&pj).max_abs() < 1e-12);
        assert_eq!(bound.params().len(), stack.params_mut().count());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (_, mut stack) = ex1_stack(8);
        randomize(&mut stack, 15, 0.3);
        let text = stack.to_checkpoint().unwrap();
        let back = PolicyStack::<f64>::from_checkpoint(&text).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.to_checkpoint().unwrap(), text);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("policy.ckpt");
        stack.save(&p).unwrap();
        assert_eq!(PolicyStack::<f64>::load(&p).unwrap(), stack);
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(PolicyStack::<f64>::from_checkpoint(&truncated).is_err());
    }
}
