//! Log-likelihood of a measurement series under the load model.
//!
//! Three estimators share one state-space abstraction:
//!
//! * deterministic: a single noise-free trajectory;
//! * Monte Carlo: `L` independent stochastic trajectories drawn from the
//!   process prior, averaged on the likelihood scale;
//! * bootstrap particle filter with systematic resampling.
//!
//! The Monte Carlo and particle-filter estimates are unbiased on the
//! likelihood scale, which is what pseudo-marginal MCMC needs.
//!
//! Trajectory / particle `i` always draws from random stream `i` of the
//! evaluation seed. With resampling switched off the particle filter
//! therefore propagates exactly the Monte Carlo trajectories.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    d_input, inject, integrate_motor, lag_input, lag_update, lag_update_det, LagInput, LoadParams,
    TrippingParams,
};
use crate::rng::{derive_seed, stream_rng, NoiseRng};
use crate::scenario::MeasurementSeries;

/// Independent Gaussian noise on each measured channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationModel {
    noise_var: f64,
    log_norm: f64,
    inv_two_var: f64,
}

impl ObservationModel {
    pub fn new(noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::config(format!(
                "noise_var must be positive, got {noise_var}"
            )));
        }
        Ok(ObservationModel {
            noise_var,
            log_norm: -0.5 * (2.0 * PI * noise_var).ln(),
            inv_two_var: 0.5 / noise_var,
        })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    #[inline]
    pub fn log_density(&self, y: f64, mean: f64) -> f64 {
        let r = y - mean;
        self.log_norm - r * r * self.inv_two_var
    }

    /// Joint density of two independent channels.
    #[inline]
    pub fn log_density2(&self, y: (f64, f64), mean: (f64, f64)) -> f64 {
        let rp = y.0 - mean.0;
        let rq = y.1 - mean.1;
        2.0 * self.log_norm - (rp * rp + rq * rq) * self.inv_two_var
    }
}

/// `log((1/n) sum exp(x_i))`, stable for large magnitudes. Returns `-inf`
/// for an empty slice or when every term is `-inf`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + (sum / xs.len() as f64).ln()
}

/// Hidden Markov model observed at `n_obs` instants.
pub trait StateSpaceModel {
    type State: Clone;

    fn n_obs(&self) -> usize;

    /// Draws `x_0`.
    fn initial(&self, rng: &mut NoiseRng) -> Self::State;

    /// Propagates the state from the previous observation instant (or the
    /// start) to observation `k`.
    fn advance(&self, state: &mut Self::State, k: usize, rng: &mut NoiseRng);

    /// Advances every particle; particle `i` draws only from `rngs[i]`.
    fn advance_all(&self, states: &mut [Self::State], k: usize, rngs: &mut [NoiseRng]) {
        for (x, rng) in states.iter_mut().zip(rngs.iter_mut()) {
            self.advance(x, k, rng);
        }
    }

    /// `log p(y_k | x_k)`.
    fn log_obs(&self, state: &Self::State, k: usize) -> f64;
}

/// Result of a Monte Carlo or particle-filter run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcOutcome {
    pub loglik: f64,
    /// First observation at which every sample had zero density.
    pub collapse_at: Option<usize>,
    pub resample_count: usize,
}

/// Averages `p(y | x^i)` over `n` trajectories drawn from the dynamics.
pub fn mc_loglik<M: StateSpaceModel>(model: &M, n: usize, seed: u64) -> SmcOutcome {
    let n_obs = model.n_obs();
    let per_path: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut x = model.initial(&mut rng);
            let mut total = 0.0;
            for k in 0..n_obs {
                model.advance(&mut x, k, &mut rng);
                total += model.log_obs(&x, k);
                if total == f64::NEG_INFINITY {
                    break;
                }
            }
            total
        })
        .collect();
    let loglik = log_mean_exp(&per_path);
    SmcOutcome {
        loglik,
        collapse_at: None,
        resample_count: 0,
    }
}

/// When the particle filter resamples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Resample when ESS drops below this fraction of the particle count.
    EssBelow(f64),
    Never,
    Always,
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling::EssBelow(0.5)
    }
}

/// Effective sample size of unnormalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Systematic resampling: ancestor indices for `n` offspring given
/// unnormalized `weights` and a uniform offset `u0` in `[0, 1)`.
pub fn systematic_resample(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    let last = weights.len() - 1;
    for j in 0..n {
        let u = (u0 + j as f64) / n as f64 * total;
        while i < last && cum + weights[i] <= u {
            cum += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

const RESAMPLE_STREAM: u64 = u64::MAX;

/// Bootstrap particle filter estimate of `log p(y_{1:N})`.
pub fn pf_loglik<M: StateSpaceModel>(
    model: &M,
    n: usize,
    seed: u64,
    resampling: Resampling,
) -> SmcOutcome {
    let n_obs = model.n_obs();
    let mut rngs: Vec<NoiseRng> = (0..n).map(|i| stream_rng(seed, i as u64)).collect();
    let mut resample_rng = stream_rng(seed, RESAMPLE_STREAM);
    let mut particles: Vec<M::State> = rngs.iter_mut().map(|r| model.initial(r)).collect();
    let mut weights = vec![1.0; n];
    let mut log_obs = vec![0.0; n];
    let mut scratch: Vec<M::State> = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let mut resample_count = 0;

    for k in 0..n_obs {
        let mut m = f64::NEG_INFINITY;
        model.advance_all(&mut particles, k, &mut rngs);
        for i in 0..n {
            log_obs[i] = model.log_obs(&particles[i], k);
            m = m.max(log_obs[i]);
        }
        if m == f64::NEG_INFINITY || m.is_nan() {
            return SmcOutcome {
                loglik: f64::NEG_INFINITY,
                collapse_at: Some(k),
                resample_count,
            };
        }
        let prior_mass: f64 = weights.iter().sum();
        let mut post_mass = 0.0;
        let mut peak = 0.0f64;
        for i in 0..n {
            weights[i] *= (log_obs[i] - m).exp();
            post_mass += weights[i];
            peak = peak.max(weights[i]);
        }
        if post_mass == 0.0 {
            return SmcOutcome {
                loglik: f64::NEG_INFINITY,
                collapse_at: Some(k),
                resample_count,
            };
        }
        loglik += m + (post_mass / prior_mass).ln();
        for w in weights.iter_mut() {
            *w /= peak;
        }

        if k + 1 == n_obs {
            break;
        }
        let resample = match resampling {
            Resampling::Never => false,
            Resampling::Always => true,
            Resampling::EssBelow(frac) => effective_sample_size(&weights) < frac * n as f64,
        };
        if resample {
            let u0: f64 = resample_rng.random();
            let ancestors = systematic_resample(&weights, n, u0);
            scratch.clear();
            scratch.extend(ancestors.iter().map(|&a| particles[a].clone()));
            std::mem::swap(&mut particles, &mut scratch);
            weights.iter_mut().for_each(|w| *w = 1.0);
            resample_count += 1;
        }
    }
    SmcOutcome {
        loglik,
        collapse_at: None,
        resample_count,
    }
}

/// Motor injections sampled at the observation instants, plus the
/// terminal voltage at every integration step.
#[derive(Debug, Clone)]
pub struct MotorPath {
    pub h: f64,
    pub stride: usize,
    /// Voltage at steps `0..n_obs * stride`.
    pub voltages: Vec<f64>,
    /// `(P_mot, Q_mot, P_zip, Q_zip)` at observation `k`, i.e. at step
    /// `(k + 1) * stride`.
    pub at_obs: Vec<[f64; 4]>,
}

impl MotorPath {
    pub fn compute(p: &LoadParams, data: &MeasurementSeries) -> Result<Self> {
        let stride = data.stride()?;
        let n_obs = data.len();
        let last = n_obs * stride;
        let mut voltages = Vec::with_capacity(last);
        let mut at_obs = Vec::with_capacity(n_obs);
        let zip = p.zip;
        integrate_motor(p, &data.scenario, data.h, last, |step, m| {
            if step < last {
                voltages.push(m.v);
            }
            if step > 0 && step % stride == 0 {
                let (p_zip, q_zip) = zip.power(m.v);
                at_obs.push([m.p_mot, m.q_mot, p_zip, q_zip]);
            }
        })?;
        Ok(MotorPath {
            h: data.h,
            stride,
            voltages,
            at_obs,
        })
    }
}

/// The load model seen as a hidden Markov chain in the connected
/// fraction alone.
pub struct FractionModel<'a> {
    path: &'a MotorPath,
    data: &'a MeasurementSeries,
    obs: ObservationModel,
    initial: f64,
    gain: f64,
    inputs: Vec<LagInput>,
    stochastic: bool,
}

impl<'a> FractionModel<'a> {
    pub fn new(
        path: &'a MotorPath,
        data: &'a MeasurementSeries,
        obs: ObservationModel,
        trip: TrippingParams,
        stochastic: bool,
    ) -> Self {
        let inputs = path
            .voltages
            .iter()
            .map(|&v| lag_input(v, path.h, &trip, stochastic))
            .collect();
        FractionModel {
            path,
            data,
            obs,
            initial: d_input(path.voltages[0], &trip),
            gain: path.h / trip.t_d,
            inputs,
            stochastic,
        }
    }
}

impl StateSpaceModel for FractionModel<'_> {
    type State = f64;

    fn n_obs(&self) -> usize {
        self.path.at_obs.len()
    }

    fn initial(&self, _rng: &mut NoiseRng) -> f64 {
        self.initial
    }

    #[inline]
    fn advance(&self, fr: &mut f64, k: usize, rng: &mut NoiseRng) {
        let stride = self.path.stride;
        let mut x = *fr;
        for input in &self.inputs[k * stride..(k + 1) * stride] {
            x = if self.stochastic {
                lag_update(x, self.gain, *input, rng)
            } else {
                lag_update_det(x, self.gain, input.target)
            };
        }
        *fr = x;
    }

    fn advance_all(&self, states: &mut [f64], k: usize, rngs: &mut [NoiseRng]) {
        let stride = self.path.stride;
        for input in &self.inputs[k * stride..(k + 1) * stride] {
            if self.stochastic && input.noise_sd > 0.0 {
                for (x, rng) in states.iter_mut().zip(rngs.iter_mut()) {
                    *x = lag_update(*x, self.gain, *input, rng);
                }
            } else {
                for x in states.iter_mut() {
                    *x = lag_update_det(*x, self.gain, input.target);
                }
            }
        }
    }

    #[inline]
    fn log_obs(&self, fr: &f64, k: usize) -> f64 {
        let [p_mot, q_mot, p_zip, q_zip] = self.path.at_obs[k];
        self.obs.log_density2(
            (self.data.p_meas[k], self.data.q_meas[k]),
            (inject(*fr, p_mot, p_zip), inject(*fr, q_mot, q_zip)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[serde(rename = "det")]
    Deterministic,
    Mc,
    Pf,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Deterministic => "det",
            EstimatorKind::Mc => "mc",
            EstimatorKind::Pf => "pf",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(EstimatorKind::Deterministic),
            "mc" => Ok(EstimatorKind::Mc),
            "pf" => Ok(EstimatorKind::Pf),
            other => Err(Error::config(format!(
                "unknown estimator {other:?} (expected det, mc or pf)"
            ))),
        }
    }
}

/// Estimator choice with its sample size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Deterministic,
    MonteCarlo { trajectories: usize },
    ParticleFilter { particles: usize },
}

impl Estimator {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Deterministic => EstimatorKind::Deterministic,
            Estimator::MonteCarlo { .. } => EstimatorKind::Mc,
            Estimator::ParticleFilter { .. } => EstimatorKind::Pf,
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            Estimator::Deterministic => 1,
            Estimator::MonteCarlo { trajectories } => trajectories,
            Estimator::ParticleFilter { particles } => particles,
        }
    }

    pub fn with_samples(kind: EstimatorKind, n: usize) -> Self {
        match kind {
            EstimatorKind::Deterministic => Estimator::Deterministic,
            EstimatorKind::Mc => Estimator::MonteCarlo { trajectories: n },
            EstimatorKind::Pf => Estimator::ParticleFilter { particles: n },
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Estimator::Deterministic)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Estimator::MonteCarlo { trajectories } if trajectories < 1 => Err(Error::config(
                "Monte Carlo estimator needs at least 1 trajectory",
            )),
            Estimator::ParticleFilter { particles } if particles < 1 => {
                Err(Error::config("particle filter needs at least 1 particle"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLikEstimate {
    /// Finite, or `-inf` when the data are impossible under `theta`.
    pub value: f64,
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    pub seed: u64,
    /// Why the value is `-inf`, when it is.
    pub diagnostic: Option<String>,
}

/// Likelihood of one dataset as a function of the masked parameters.
#[derive(Debug, Clone)]
pub struct LoadLikelihood {
    base: LoadParams,
    data: MeasurementSeries,
    obs: ObservationModel,
    resampling: Resampling,
}

impl LoadLikelihood {
    /// `base` supplies every parameter not under inference.
    pub fn new(base: LoadParams, data: MeasurementSeries) -> Result<Self> {
        base.validate()?;
        data.validate()?;
        if data.is_empty() {
            return Err(Error::config("dataset has no observations"));
        }
        let obs = ObservationModel::new(data.noise_var)?;
        Ok(LoadLikelihood {
            base,
            data,
            obs,
            resampling: Resampling::default(),
        })
    }

    pub fn with_resampling(mut self, resampling: Resampling) -> Self {
        self.resampling = resampling;
        self
    }

    pub fn base(&self) -> &LoadParams {
        &self.base
    }

    pub fn data(&self) -> &MeasurementSeries {
        &self.data
    }

    /// Evaluates at `theta` (ordered like the base parameter mask).
    pub fn evaluate(&self, theta: &[f64], est: Estimator, seed: u64) -> Result<LogLikEstimate> {
        let params = self.base.with_theta(theta)?;
        self.evaluate_params(&params, est, seed)
    }

    pub fn evaluate_params(
        &self,
        params: &LoadParams,
        est: Estimator,
        seed: u64,
    ) -> Result<LogLikEstimate> {
        est.validate()?;
        params.validate()?;
        if self.data.h >= params.tripping.t_d {
            return Err(Error::config(format!(
                "step size h={} must be below t_d={}",
                self.data.h, params.tripping.t_d
            )));
        }
        let mut out = LogLikEstimate {
            value: f64::NEG_INFINITY,
            estimator: est.kind(),
            n_samples: est.samples(),
            seed,
            diagnostic: None,
        };
        let path = match MotorPath::compute(params, &self.data) {
            Ok(path) => path,
            Err(
                e @ (Error::BlowUp { .. } | Error::Initialization { .. } | Error::Singular { .. }),
            ) => {
                out.diagnostic = Some(e.to_string());
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        let trip = params.tripping;
        let outcome = match est {
            Estimator::Deterministic => {
                let model = FractionModel::new(&path, &self.data, self.obs, trip, false);
                deterministic_loglik(&model)
            }
            Estimator::MonteCarlo { trajectories } => {
                let model = FractionModel::new(&path, &self.data, self.obs, trip, true);
                mc_loglik(&model, trajectories, seed)
            }
            Estimator::ParticleFilter { particles } => {
                let model = FractionModel::new(&path, &self.data, self.obs, trip, true);
                pf_loglik(&model, particles, seed, self.resampling)
            }
        };
        out.value = outcome.loglik;
        if let Some(k) = outcome.collapse_at {
            out.diagnostic = Some(format!("all particle weights vanished at observation {k}"));
        } else if outcome.loglik == f64::NEG_INFINITY {
            out.diagnostic = Some("zero likelihood".into());
        }
        Ok(out)
    }
}

/// Single noise-free trajectory; the model must not draw noise.
pub fn deterministic_loglik<M: StateSpaceModel>(model: &M) -> SmcOutcome {
    let mut rng = stream_rng(0, 0);
    let mut x = model.initial(&mut rng);
    let mut loglik = 0.0;
    for k in 0..model.n_obs() {
        model.advance(&mut x, k, &mut rng);
        loglik += model.log_obs(&x, k);
    }
    SmcOutcome {
        loglik,
        collapse_at: None,
        resample_count: 0,
    }
}

pub fn loglik_deterministic(lik: &LoadLikelihood, theta: &[f64]) -> Result<LogLikEstimate> {
    lik.evaluate(theta, Estimator::Deterministic, 0)
}

pub fn loglik_mc(
    lik: &LoadLikelihood,
    theta: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<LogLikEstimate> {
    lik.evaluate(theta, Estimator::MonteCarlo { trajectories }, seed)
}

pub fn loglik_pf(
    lik: &LoadLikelihood,
    theta: &[f64],
    particles: usize,
    seed: u64,
) -> Result<LogLikEstimate> {
    lik.evaluate(theta, Estimator::ParticleFilter { particles }, seed)
}

/// Unbiased sample variance, shifted by the first value so that identical
/// inputs give exactly zero.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let shift = xs[0];
    let n = xs.len() as f64;
    let mean: f64 = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    xs.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub variance: f64,
    pub replications: usize,
}

pub const VARIANCE_CSV_HEADER: &str = "estimator,n,variance,replications";

pub fn variance_table_csv(rows: &[VarianceRow]) -> String {
    let mut out = String::from(VARIANCE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.estimator, r.n, r.variance, r.replications
        ));
    }
    out
}

/// Spread of the MC and PF estimates at `theta` for each sample count.
/// Replication `r` at count `n` uses a seed derived from `(seed, n, r)`,
/// shared by both estimators.
pub fn estimator_variance_study(
    lik: &LoadLikelihood,
    theta: &[f64],
    sample_counts: &[usize],
    replications: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if replications < 20 {
        return Err(Error::config(format!(
            "variance study needs at least 20 replications, got {replications}"
        )));
    }
    let mut rows = Vec::with_capacity(2 * sample_counts.len());
    for kind in [EstimatorKind::Mc, EstimatorKind::Pf] {
        for &n in sample_counts {
            let est = Estimator::with_samples(kind, n);
            let values = (0..replications)
                .map(|r| {
                    let s = derive_seed(seed, &[n as u64, r as u64]);
                    lik.evaluate(theta, est, s).map(|e| e.value)
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(VarianceRow {
                estimator: kind,
                n,
                variance: sample_variance(&values),
                replications,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoadParams, SimMode};
    use crate::scenario::{synthesize_dataset, SynthesisSettings, VoltageScenario};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn dataset(
        mode: SimMode,
        sigma_w: f64,
        noise_var: f64,
        seed: u64,
    ) -> (LoadParams, MeasurementSeries) {
        let mut truth = LoadParams::default();
        truth.tripping.sigma_w = sigma_w;
        let settings = SynthesisSettings {
            mode,
            noise_var,
            seed,
            ..Default::default()
        };
        let data = synthesize_dataset(&truth, &VoltageScenario::default(), &settings).unwrap();
        (truth, data)
    }

    #[test]
    fn zero_residual_gives_closed_form() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 1e-300, 1);
        let mut data = data;
        data.noise_var = 0.01;
        let lik = LoadLikelihood::new(truth.clone(), data).unwrap();
        let est = loglik_deterministic(&lik, &truth.theta()).unwrap();
        let expected = -(500.0) * (2.0 * PI * 0.01).ln();
        assert!(
            (est.value - expected).abs() < 1e-9 * expected.abs(),
            "{} {expected}",
            est.value
        );
    }

    #[test]
    fn unordered_thresholds_rejected() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 0.01, 1);
        let lik = LoadLikelihood::new(truth, data).unwrap();
        assert!(matches!(
            loglik_deterministic(&lik, &[0.2, 0.8, 0.8]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_process_noise_makes_all_estimators_agree_exactly() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 0.01, 3);
        let lik = LoadLikelihood::new(truth, data).unwrap();
        let theta = [0.75, 0.22, 0.85];
        let det = loglik_deterministic(&lik, &theta).unwrap().value;
        for n in [1, 7, 32] {
            assert_eq!(loglik_mc(&lik, &theta, n, 5).unwrap().value, det);
        }
        for n in [2, 9, 64] {
            assert_eq!(loglik_pf(&lik, &theta, n, 5).unwrap().value, det);
        }
    }

    #[test]
    fn particle_filter_is_deterministic_given_seed() {
        let (mut truth, data) = dataset(SimMode::Stochastic, 0.1, 0.01, 4);
        truth.tripping.sigma_w = 0.1;
        let lik = LoadLikelihood::new(truth.clone(), data).unwrap();
        let a = loglik_pf(&lik, &truth.theta(), 50, 17).unwrap();
        let b = loglik_pf(&lik, &truth.theta(), 50, 17).unwrap();
        assert_eq!(a, b);
        let c = loglik_pf(&lik, &truth.theta(), 50, 18).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn pf_without_resampling_equals_mc() {
        let (mut truth, data) = dataset(SimMode::Stochastic, 0.1, 0.01, 6);
        truth.tripping.sigma_w = 0.1;
        let theta = truth.theta();
        let mc = LoadLikelihood::new(truth.clone(), data.clone()).unwrap();
        let pf = LoadLikelihood::new(truth, data)
            .unwrap()
            .with_resampling(Resampling::Never);
        for seed in 0..5 {
            let a = loglik_mc(&mc, &theta, 16, seed).unwrap().value;
            let b = loglik_pf(&pf, &theta, 16, seed).unwrap().value;
            assert!((a - b).abs() < 1e-9 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn estimator_sample_size_preconditions() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 0.01, 1);
        let lik = LoadLikelihood::new(truth.clone(), data).unwrap();
        assert!(loglik_mc(&lik, &truth.theta(), 0, 1).is_err());
        assert!(loglik_pf(&lik, &truth.theta(), 0, 1).is_err());
        assert!(loglik_pf(&lik, &truth.theta(), 1, 1).is_ok());
    }

    #[test]
    fn log_mean_exp_of_constant_is_constant() {
        for n in 1..40 {
            let xs = vec![-1234.5678; n];
            assert_eq!(log_mean_exp(&xs), -1234.5678);
        }
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_mean_exp(&[]), f64::NEG_INFINITY);
        let v = log_mean_exp(&[0.0, f64::NEG_INFINITY]);
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn log_mean_exp_shift(xs in prop::collection::vec(-50.0f64..50.0, 1..30), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = log_mean_exp(&xs) + c;
            let b = log_mean_exp(&shifted);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + c.abs() + a.abs()));
        }
    }

    #[test]
    fn systematic_resampling_preserves_expected_counts() {
        let weights = [0.05, 0.4, 0.15, 0.3, 0.1];
        let n = 20;
        let draws = 10_000;
        let mut rng = NoiseRng::seed_from_u64(8);
        let mut totals = [0usize; 5];
        let mut sq = [0f64; 5];
        for _ in 0..draws {
            let mut counts = [0usize; 5];
            for a in systematic_resample(&weights, n, rand::Rng::random(&mut rng)) {
                counts[a] += 1;
            }
            for i in 0..5 {
                totals[i] += counts[i];
                sq[i] += (counts[i] * counts[i]) as f64;
            }
        }
        for i in 0..5 {
            let mean = totals[i] as f64 / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let expected = n as f64 * weights[i];
            // systematic counts are floor/ceil of n w_i
            assert!(mean >= expected.floor() && mean <= expected.ceil());
            let se = (var / draws as f64).sqrt().max(1e-12);
            assert!(
                (mean - expected).abs() < 3.0 * se + 1e-12,
                "{i}: {mean} vs {expected}"
            );
        }
    }

    #[test]
    fn ess_extremes() {
        assert_eq!(effective_sample_size(&[1.0; 8]), 8.0);
        assert_eq!(effective_sample_size(&[0.0, 0.0, 3.0]), 1.0);
    }

    #[test]
    fn variance_study_degenerate_noise_is_zero() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 0.01, 2);
        let lik = LoadLikelihood::new(truth.clone(), data).unwrap();
        let rows = estimator_variance_study(&lik, &truth.theta(), &[2, 5], 20, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.variance == 0.0));
        assert!(estimator_variance_study(&lik, &truth.theta(), &[2], 19, 1).is_err());
        let csv = variance_table_csv(&rows);
        assert!(csv.starts_with("estimator,n,variance,replications\nmc,2,0,20\n"));
    }

    #[test]
    fn deterministic_truth_beats_coarse_grid() {
        let (truth, data) = dataset(SimMode::Deterministic, 0.0, 0.01, 21);
        let lik = LoadLikelihood::new(truth.clone(), data).unwrap();
        let at_truth = loglik_deterministic(&lik, &truth.theta()).unwrap().value;
        for v1 in [0.6, 0.7, 0.9] {
            for v2 in [0.1, 0.3] {
                for h in [0.7, 0.9, 1.1] {
                    let other = loglik_deterministic(&lik, &[v1, v2, h]).unwrap().value;
                    assert!(at_truth > other, "({v1},{v2},{h}): {other} >= {at_truth}");
                }
            }
        }
    }
}
