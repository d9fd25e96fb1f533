//! Separable quadratic tasks with bounded gradient noise, where proximal
//! solutions and Moreau envelopes have closed forms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flownet::ParamVector;
use crate::meta::TaskObjective;

/// `l(theta) = 1/2 sum_j a_j (theta_j - c_j)^2`, observed through
/// `l(theta) + xi . theta` with `xi` drawn uniformly from the ball of radius
/// `kappa1`. The gradient is `L`-Lipschitz with `L = max_j |a_j|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub kappa1: f64,
}

impl QuadraticTask {
    pub fn new(a: Vec<f64>, c: Vec<f64>, kappa1: f64) -> Self {
        assert_eq!(a.len(), c.len(), "curvature and centre lengths differ");
        QuadraticTask { a, c, kappa1 }
    }

    /// Random task of dimension `dim` with curvatures in `[-l, l]` and
    /// centres in `[-1, 1]`.
    pub fn random(dim: usize, l: f64, kappa1: f64, rng: &mut impl Rng) -> Self {
        let a = (0..dim).map(|_| rng.gen_range(-l..=l)).collect();
        let c = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        QuadraticTask::new(a, c, kappa1)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn smoothness(&self) -> f64 {
        self.a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn true_loss(&self, theta: &ParamVector) -> f64 {
        (0..self.dim()).map(|j| 0.5 * self.a[j] * (theta[j] - self.c[j]).powi(2)).sum()
    }

    /// Minimiser of the noise-free proximal objective
    /// `l(theta) + lambda/2 ||w - theta||^2`; requires `lambda > -min a`.
    pub fn prox_minimizer(&self, w: &ParamVector, lambda: f64) -> Result<ParamVector> {
        self.check(w, lambda)?;
        Ok(ParamVector::from_vec(
            (0..self.dim()).map(|j| (self.a[j] * self.c[j] + lambda * w[j]) / (self.a[j] + lambda)).collect(),
        ))
    }

    /// Moreau envelope `min_theta l(theta) + lambda/2 ||w - theta||^2`.
    pub fn moreau_value(&self, w: &ParamVector, lambda: f64) -> Result<f64> {
        self.check(w, lambda)?;
        Ok((0..self.dim())
            .map(|j| 0.5 * self.a[j] * lambda / (self.a[j] + lambda) * (w[j] - self.c[j]).powi(2))
            .sum())
    }

    fn check(&self, w: &ParamVector, lambda: f64) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::contract(format!("expected {} parameters, got {}", self.dim(), w.len())));
        }
        if self.a.iter().any(|a| a + lambda <= 0.0) {
            return Err(Error::Param(format!("lambda {lambda} does not make the proximal objective convex")));
        }
        Ok(())
    }
}

impl TaskObjective for QuadraticTask {
    type Batch = Vec<f64>;

    fn sample(&self, _: &ParamVector, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let d = self.dim();
        if self.kappa1 == 0.0 {
            return Ok(vec![0.0; d]);
        }
        // uniform in the ball: Gaussian direction, radius kappa1 * U^(1/d)
        let dir: Vec<f64> = (0..d)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(f64::MIN_POSITIVE), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = self.kappa1 * rng.gen::<f64>().powf(1.0 / d as f64);
        Ok(dir.into_iter().map(|v| v / norm * radius).collect())
    }

    fn loss_grad(&self, theta: &ParamVector, xi: &Vec<f64>) -> Result<(f64, ParamVector)> {
        if theta.len() != self.dim() || xi.len() != self.dim() {
            return Err(Error::contract("quadratic task dimension mismatch"));
        }
        let mut loss = 0.0;
        let mut g = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let d = theta[j] - self.c[j];
            loss += 0.5 * self.a[j] * d * d + xi[j] * theta[j];
            g.push(self.a[j] * d + xi[j]);
        }
        Ok((loss, ParamVector::from_vec(g)))
    }
}
