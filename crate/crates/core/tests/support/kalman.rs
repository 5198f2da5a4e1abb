//! Scalar linear-Gaussian toy model with its exact Kalman-filter
//! likelihood, used as an oracle for the sampling-based estimators.
//!
//! `x_0 ~ N(m0, p0)`, `x_k = phi x_{k-1} + sigma_x e_k`,
//! `y_k = x_k + sigma_y n_k` for `k = 1..=N`.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use stochload::likelihood::StateSpaceModel;
use stochload::rng::NoiseRng;

#[derive(Debug, Clone)]
pub struct ArToy {
    pub phi: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub m0: f64,
    pub p0: f64,
    pub ys: Vec<f64>,
}

fn normal(rng: &mut NoiseRng) -> f64 {
    StandardNormal.sample(rng)
}

impl ArToy {
    /// Stationary start, observations drawn from the model itself.
    pub fn generate(phi: f64, sigma_x: f64, sigma_y: f64, n: usize, seed: u64) -> Self {
        let p0 = sigma_x * sigma_x / (1.0 - phi * phi);
        let mut rng = NoiseRng::seed_from_u64(seed);
        let mut x = p0.sqrt() * normal(&mut rng);
        let ys = (0..n)
            .map(|_| {
                x = phi * x + sigma_x * normal(&mut rng);
                x + sigma_y * normal(&mut rng)
            })
            .collect();
        ArToy {
            phi,
            sigma_x,
            sigma_y,
            m0: 0.0,
            p0,
            ys,
        }
    }

    /// Exact `log p(y_1..y_N)` by the Kalman filter.
    pub fn exact_loglik(&self) -> f64 {
        let (mut m, mut p) = (self.m0, self.p0);
        let r = self.sigma_y * self.sigma_y;
        let q = self.sigma_x * self.sigma_x;
        let mut total = 0.0;
        for &y in &self.ys {
            m *= self.phi;
            p = self.phi * self.phi * p + q;
            let s = p + r;
            let innov = y - m;
            total += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
            let gain = p / s;
            m += gain * innov;
            p *= 1.0 - gain;
        }
        total
    }
}

impl StateSpaceModel for ArToy {
    type State = f64;

    fn n_obs(&self) -> usize {
        self.ys.len()
    }

    fn initial(&self, rng: &mut NoiseRng) -> f64 {
        self.m0 + self.p0.sqrt() * normal(rng)
    }

    fn advance(&self, x: &mut f64, _k: usize, rng: &mut NoiseRng) {
        *x = self.phi * *x + self.sigma_x * normal(rng);
    }

    fn log_obs(&self, x: &f64, k: usize) -> f64 {
        let r = self.sigma_y * self.sigma_y;
        let d = self.ys[k] - x;
        -0.5 * ((2.0 * std::f64::consts::PI * r).ln() + d * d / r)
    }
}

/// Mean of `exp(estimate - exact)` with its standard error, plus the
/// sample variance of the log-estimates.
pub fn ratio_stats(estimates: &[f64], exact: f64) -> (f64, f64, f64) {
    let n = estimates.len() as f64;
    let ratios: Vec<f64> = estimates.iter().map(|e| (e - exact).exp()).collect();
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let lmean = estimates.iter().sum::<f64>() / n;
    let lvar = estimates.iter().map(|e| (e - lmean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt(), lvar)
}
