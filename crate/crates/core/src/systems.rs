//! Control-affine prior dynamics in residual form,
//! `x_{k+1} = x + φ_k(x) + B_k u`, and obstacle potentials.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Drift<T> {
    /// `φ(x) = M x` with `M = A - I`.
    Linear(Tensor<T>),
    /// `φ(x, y) = [g √(1 + y²), g x]`.
    Saturating { gain: T },
}

#[derive(Clone, Debug)]
pub struct SystemSpec<T> {
    name: String,
    horizon: usize,
    dt: T,
    drift: Drift<T>,
    input: Tensor<T>,
    l_phi: T,
    sigma_b: T,
}

impl<T: Scalar> SystemSpec<T> {
    /// Generic constructor. `l_phi` is the declared Lipschitz bound of the drift.
    pub fn new(
        name: impl Into<String>,
        horizon: usize,
        dt: T,
        drift: Drift<T>,
        input: Tensor<T>,
        l_phi: T,
    ) -> Result<Self> {
        let n = input.rows();
        if n == 0 || input.cols() == 0 {
            return Err(Error::dim("input matrix must be non-empty"));
        }
        match &drift {
            Drift::Linear(m) if m.shape() != [n, n] => {
                return Err(Error::dim(format!("drift matrix {:?} for n = {n}", m.shape())))
            }
            Drift::Saturating { .. } if n != 2 => {
                return Err(Error::dim("saturating drift is two-dimensional"))
            }
            _ => {}
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("input matrix".into()));
        }
        if !(l_phi >= T::zero() && l_phi < T::one()) {
            return Err(Error::contract(format!(
                "drift Lipschitz bound {l_phi} must lie in [0, 1)"
            )));
        }
        let sigma_b = input.spectral_norm();
        if !(sigma_b > T::zero()) {
            return Err(Error::contract("input matrix has zero spectral norm"));
        }
        Ok(Self {
            name: name.into(),
            horizon,
            dt,
            drift,
            input,
            l_phi,
            sigma_b,
        })
    }

    /// `A = [[I, ΔT I], [0, I]]`, `B = [[0], [ΔT I]]`.
    pub fn double_integrator_2d(dt: T, horizon: usize) -> Result<Self> {
        if !(dt > T::zero() && dt < T::one()) {
            return Err(Error::contract(format!("ΔT = {dt} must lie in (0, 1)")));
        }
        let m = Tensor::from_fn(4, 4, |r, c| if c == r + 2 { dt } else { T::zero() });
        let b = Tensor::from_fn(4, 2, |r, c| if r == c + 2 { dt } else { T::zero() });
        Self::new("double_integrator_2d", horizon, dt, Drift::Linear(m), b, dt)
    }

    /// `x+ = x + 0.1 √(1 + y²) + g u`, `y+ = y + 0.1 x`. The printed
    /// equation has `g = 1`.
    pub fn saturating_drift_2d(input_gain: T, horizon: usize) -> Result<Self> {
        let gain = T::lit(0.1);
        let b = Tensor::from_rows(&[vec![input_gain], vec![T::zero()]])?;
        Self::new(
            "saturating_drift_2d",
            horizon,
            gain,
            Drift::Saturating { gain },
            b,
            gain,
        )
    }

    /// `φ = 0`, `B = ΔT I_n`.
    pub fn single_integrator(n: usize, dt: T, horizon: usize) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::contract("ΔT must be positive"));
        }
        let b = Tensor::identity(n).scale(dt);
        Self::new("single_integrator", horizon, dt, Drift::Linear(Tensor::zeros(n, n)), b, T::zero())
    }

    /// `x+ = A x + B u`; `L_φ = ‖A - I‖₂`.
    pub fn linear(a: &Tensor<T>, b: Tensor<T>, dt: T, horizon: usize) -> Result<Self> {
        let n = a.rows();
        if a.shape() != [n, n] || b.rows() != n {
            return Err(Error::dim("linear system: A must be n x n and B n x m"));
        }
        let m = a.sub(&Tensor::identity(n));
        let l_phi = m.spectral_norm();
        Self::new("linear", horizon, dt, Drift::Linear(m), b, l_phi)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.input.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.cols()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn drift(&self) -> &Drift<T> {
        &self.drift
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.drift, Drift::Linear(_))
    }

    /// The full transition matrix `A = I + M` of a linear system.
    pub fn a_matrix(&self) -> Option<Tensor<T>> {
        match &self.drift {
            Drift::Linear(m) => Some(m.add(&Tensor::identity(m.rows()))),
            Drift::Saturating { .. } => None,
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.horizon {
            Err(Error::Index {
                index: k,
                horizon: self.horizon,
            })
        } else {
            Ok(())
        }
    }

    pub fn input_matrix(&self, k: usize) -> Result<&Tensor<T>> {
        self.check_step(k)?;
        Ok(&self.input)
    }

    pub fn l_phi(&self, k: usize) -> Result<T> {
        self.check_step(k)?;
        Ok(self.l_phi)
    }

    pub fn sigma_b(&self, k: usize) -> Result<T> {
        self.check_step(k)?;
        Ok(self.sigma_b)
    }

    /// `φ_k(x)` for one state.
    pub fn residual(&self, k: usize, x: &[T]) -> Result<Vec<T>> {
        self.check_step(k)?;
        if x.len() != self.state_dim() {
            return Err(Error::dim(format!("state of length {} for n = {}", x.len(), self.state_dim())));
        }
        Ok(match &self.drift {
            Drift::Linear(m) => (0..m.rows())
                .map(|r| m.row(r).iter().zip(x).map(|(&a, &b)| a * b).sum())
                .collect(),
            Drift::Saturating { gain } => {
                vec![*gain * (T::one() + x[1] * x[1]).sqrt(), *gain * x[0]]
            }
        })
    }

    /// `x + φ_k(x)`.
    pub fn drift_step(&self, k: usize, x: &[T]) -> Result<Vec<T>> {
        let phi = self.residual(k, x)?;
        Ok(x.iter().zip(phi).map(|(&a, b)| a + b).collect())
    }

    /// Row-wise `φ_k` of a `B x n` batch.
    pub fn residual_batch(&self, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_step(k)?;
        if x.cols() != self.state_dim() {
            return Err(Error::dim("batch width differs from state dimension"));
        }
        Ok(match &self.drift {
            Drift::Linear(m) => x.matmul_t(false, m, true),
            Drift::Saturating { gain } => Tensor::from_fn(x.rows(), 2, |r, c| {
                if c == 0 {
                    *gain * (T::one() + x.get(r, 1) * x.get(r, 1)).sqrt()
                } else {
                    *gain * x.get(r, 0)
                }
            }),
        })
    }

    /// Row-wise `φ_k` recorded on the tape.
    pub fn residual_on_tape(&self, tape: &mut Tape<T>, k: usize, x: Var) -> Result<Var> {
        self.check_step(k)?;
        if tape.shape(x)[1] != self.state_dim() {
            return Err(Error::dim("batch width differs from state dimension"));
        }
        match &self.drift {
            Drift::Linear(m) => {
                let m = tape.constant(m.clone());
                tape.matmul_t(x, false, m, true)
            }
            Drift::Saturating { gain } => {
                let px = tape.cols(x, 0, 1)?;
                let py = tape.cols(x, 1, 1)?;
                let y2 = tape.mul(py, py)?;
                let inner = tape.add_scalar(y2, T::one());
                let root = tape.sqrt(inner);
                let first = tape.scale(root, *gain);
                let second = tape.scale(px, *gain);
                tape.concat_cols(&[first, second])
            }
        }
    }

    /// Row-wise `B_k u` recorded on the tape.
    pub fn input_on_tape(&self, tape: &mut Tape<T>, k: usize, u: Var) -> Result<Var> {
        self.check_step(k)?;
        let b = tape.constant(self.input.clone());
        tape.matmul_t(u, false, b, true)
    }

    /// `∇φ_k(x)`, `n x n`.
    pub fn residual_jacobian(&self, k: usize, x: &[T]) -> Result<Tensor<T>> {
        self.check_step(k)?;
        Ok(match &self.drift {
            Drift::Linear(m) => m.clone(),
            Drift::Saturating { gain } => {
                let dy = *gain * x[1] / (T::one() + x[1] * x[1]).sqrt();
                Tensor::from_rows(&[vec![T::zero(), dy], vec![*gain, T::zero()]])?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle<T> {
    pub center: Vec<T>,
    pub radius: T,
    pub weight: T,
}

/// `V(x) = Σ λ exp(-‖P x - x₀‖² / r²)`, with `P` selecting the position
/// coordinates listed in `position`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleField<T> {
    position: Vec<usize>,
    obstacles: Vec<Obstacle<T>>,
}

impl<T: Scalar> ObstacleField<T> {
    pub fn new(position: Vec<usize>, obstacles: Vec<Obstacle<T>>) -> Result<Self> {
        for (i, o) in obstacles.iter().enumerate() {
            if o.center.len() != position.len() {
                return Err(Error::dim(format!(
                    "obstacle {i}: center has {} coordinates, projector selects {}",
                    o.center.len(),
                    position.len()
                )));
            }
            if !(o.radius > T::zero()) {
                return Err(Error::contract(format!("obstacle {i}: radius must be positive")));
            }
            if !(o.weight >= T::zero()) {
                return Err(Error::contract(format!("obstacle {i}: weight must be nonnegative")));
            }
        }
        Ok(Self {
            position,
            obstacles,
        })
    }

    pub fn empty() -> Self {
        Self {
            position: Vec::new(),
            obstacles: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn obstacles(&self) -> &[Obstacle<T>] {
        &self.obstacles
    }

    pub fn position(&self) -> &[usize] {
        &self.position
    }

    pub fn max_value(&self) -> T {
        self.obstacles.iter().map(|o| o.weight).sum()
    }

    pub fn potential(&self, x: &[T]) -> T {
        self.obstacles
            .iter()
            .map(|o| {
                let d2: T = self
                    .position
                    .iter()
                    .zip(&o.center)
                    .map(|(&i, &c)| (x[i] - c) * (x[i] - c))
                    .sum();
                o.weight * (-d2 / (o.radius * o.radius)).exp()
            })
            .sum()
    }

    /// Row-wise potential of a `B x n` node as `B x 1`, or `None` for an
    /// empty field.
    pub fn potential_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Option<Var>> {
        if self.obstacles.is_empty() {
            return Ok(None);
        }
        let n = tape.shape(x)[1];
        if let Some(&bad) = self.position.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("position index {bad} for n = {n}")));
        }
        let p = self.position.len();
        let proj = Tensor::from_fn(n, p, |r, c| if self.position[c] == r { T::one() } else { T::zero() });
        let proj = tape.constant(proj);
        let px = tape.matmul(x, proj)?;
        let mut total: Option<Var> = None;
        for o in &self.obstacles {
            let neg = tape.constant(Tensor::row_vector(&o.center).scale(-T::one()));
            let d = tape.add_row(px, neg)?;
            let d2 = tape.row_sum_sq(d)?;
            let e = tape.scale(d2, -(o.radius * o.radius).recip());
            let e = tape.exp(e);
            let v = tape.scale(e, o.weight);
            total = Some(match total {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn double_integrator_examples() {
        let s = SystemSpec::<f64>::double_integrator_2d(0.1, 30).unwrap();
        assert_eq!((s.state_dim(), s.input_dim()), (4, 2));
        assert!(close(&s.residual(0, &[0.0, 0.0, 5.0, 8.0]).unwrap(), &[0.5, 0.8, 0.0, 0.0], 1e-15));
        assert!(close(&s.drift_step(0, &[1.0, 1.0, 0.0, 0.0]).unwrap(), &[1.0, 1.0, 0.0, 0.0], 0.0));
        assert!(close(&s.drift_step(3, &[0.0, 0.0, 5.0, 8.0]).unwrap(), &[0.5, 0.8, 5.0, 8.0], 1e-15));
        let bu = s.input_matrix(0).unwrap().matmul(&Tensor::col_vector(&[1.0, 0.0]));
        assert!(close(bu.as_slice(), &[0.0, 0.0, 0.1, 0.0], 0.0));
        let Drift::Linear(m) = s.drift() else { unreachable!() };
        assert!((m.spectral_norm() - 0.1).abs() < 1e-12);
        assert_eq!(s.l_phi(0).unwrap(), 0.1);
        assert!((s.sigma_b(0).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(s.drift_step(30, &[0.0; 4]), Err(Error::Index { index: 30, horizon: 30 })));
    }

    #[test]
    fn saturating_drift_examples() {
        let s = SystemSpec::<f64>::saturating_drift_2d(1.0, 40).unwrap();
        assert!(close(&s.residual(0, &[0.0, 0.0]).unwrap(), &[0.1, 0.0], 1e-15));
        assert!(close(&s.drift_step(0, &[0.0, 0.0]).unwrap(), &[0.1, 0.0], 1e-15));
        let j = s.residual_jacobian(0, &[0.0, 0.0]).unwrap();
        assert_eq!(j.as_slice(), &[0.0, 0.0, 0.1, 0.0]);
        assert_eq!(s.sigma_b(0).unwrap(), 1.0);
        let scaled = SystemSpec::<f64>::saturating_drift_2d(0.1, 40).unwrap();
        assert!((scaled.sigma_b(0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tape_jacobian_matches_hand_derivative() {
        let s = SystemSpec::<f64>::saturating_drift_2d(1.0, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[0.0, 0.0]));
        let phi = s.residual_on_tape(&mut tape, 0, x).unwrap();
        let j = tape.jacobian(phi, x).unwrap();
        assert_eq!(tape.value(j).as_slice(), &[0.0, 0.0, 0.1, 0.0]);
    }

    #[test]
    fn drift_lipschitz_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let systems = [
            SystemSpec::<f64>::double_integrator_2d(0.1, 1).unwrap(),
            SystemSpec::<f64>::saturating_drift_2d(1.0, 1).unwrap(),
            SystemSpec::<f64>::single_integrator(3, 0.2, 1).unwrap(),
        ];
        for s in &systems {
            let n = s.state_dim();
            let mut sup: f64 = 0.0;
            for _ in 0..10_000 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
                sup = sup.max(s.residual_jacobian(0, &x).unwrap().spectral_norm());
            }
            assert!(sup <= s.l_phi(0).unwrap() + 1e-9, "{}: {sup}", s.name());
        }
    }

    #[test]
    fn batched_residual_agrees_with_single_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [
            SystemSpec::<f64>::double_integrator_2d(0.1, 1).unwrap(),
            SystemSpec::<f64>::saturating_drift_2d(1.0, 1).unwrap(),
        ] {
            let n = s.state_dim();
            let xs = Tensor::from_fn(6, n, |_, _| rng.random_range(-3.0..3.0));
            let plain = s.residual_batch(0, &xs).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone());
            let t = s.residual_on_tape(&mut tape, 0, x).unwrap();
            for r in 0..6 {
                let single = s.residual(0, xs.row(r)).unwrap();
                assert!(close(plain.row(r), &single, 1e-15));
                assert!(close(tape.value(t).row(r), &single, 1e-15));
            }
        }
    }

    #[test]
    fn linear_system_metadata() {
        let a = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.0, 0.9]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![0.5]]).unwrap();
        let s = SystemSpec::<f64>::linear(&a, b, 0.1, 3).unwrap();
        assert!(s.a_matrix().unwrap().sub(&a).max_abs() < 1e-15);
        assert!((s.sigma_b(0).unwrap() - 0.5).abs() < 1e-12);
        let expanding = Tensor::identity(2).scale(2.5);
        assert!(SystemSpec::<f64>::linear(&expanding, Tensor::identity(2), 0.1, 3).is_err());
    }

    #[test]
    fn obstacle_potential_examples() {
        let field = ObstacleField::<f64>::new(
            vec![0, 1],
            vec![Obstacle {
                center: vec![3.0, 0.0],
                radius: 1.0,
                weight: 10.0,
            }],
        )
        .unwrap();
        assert!((field.potential(&[3.0, 0.0, 7.0, -1.0]) - 10.0).abs() < 1e-15);
        assert!((field.potential(&[3.0, 1.0, 0.0, 0.0]) - 10.0 / std::f64::consts::E).abs() < 1e-14);
        assert_eq!(ObstacleField::<f64>::empty().potential(&[1.0, 2.0]), 0.0);
        assert!(ObstacleField::<f64>::new(
            vec![0],
            vec![Obstacle {
                center: vec![0.0],
                radius: 0.0,
                weight: 1.0
            }]
        )
        .is_err());
    }

    #[test]
    fn potential_bounds_and_gradient() {
        let field = ObstacleField::<f64>::new(
            vec![0, 1],
            vec![
                Obstacle {
                    center: vec![3.0, 0.0],
                    radius: 1.0,
                    weight: 10.0,
                },
                Obstacle {
                    center: vec![-3.0, 0.5],
                    radius: 1.5,
                    weight: 4.0,
                },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v = field.potential(&x);
            assert!((0.0..=field.max_value()).contains(&v));

            let mut tape = Tape::new();
            let xv = tape.param(Tensor::row_vector(&x));
            let pv = field.potential_on_tape(&mut tape, xv).unwrap().unwrap();
            assert!((tape.value(pv).item() - v).abs() < 1e-12);
            let s = tape.sum(pv);
            let g = tape.backward(s).unwrap();
            let g = g.get(xv).unwrap();
            for i in 0..4 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (field.potential(&xp) - field.potential(&xm)) / (2.0 * h);
                assert!((fd - g.get(0, i)).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
