//! Posterior sampling: random-walk Metropolis-Hastings and the
//! affine-invariant ensemble sampler with the stretch move.
//!
//! Both samplers are pseudo-marginal when the likelihood is estimated: a
//! walker keeps the log-posterior computed when it was accepted and never
//! re-evaluates it. Each evaluation gets its own seed derived from
//! `(seed, walker, step)`, so a run is reproducible and the walkers of a
//! half-ensemble can be evaluated in parallel.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Estimator, LoadLikelihood};
use crate::rng::{derive_seed, stream_rng};

/// Flat prior on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PriorBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::config(
                "prior bounds must be nonempty and of equal length",
            ));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "prior bound {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(PriorBox { lower, upper })
    }

    /// `v_1off in [0.5, 0.9]`, `v_2off in [0.1, 0.3]`, `H in [0.7, 1.1]`.
    pub fn case_study() -> Self {
        PriorBox {
            lower: vec![0.5, 0.1, 0.7],
            upper: vec![0.9, 0.3, 1.1],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn log_volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo).ln())
            .sum()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.log_volume()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .collect()
    }
}

/// A (possibly estimated) log-likelihood. `seed` drives any randomness of
/// the estimator.
pub trait LogLikelihood: Sync {
    fn log_likelihood(&self, theta: &[f64], seed: u64) -> f64;
}

impl<F> LogLikelihood for F
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    fn log_likelihood(&self, theta: &[f64], seed: u64) -> f64 {
        self(theta, seed)
    }
}

/// Load-model likelihood paired with an estimator. Failed evaluations
/// count as zero likelihood.
#[derive(Debug, Clone)]
pub struct LoadTarget {
    pub likelihood: LoadLikelihood,
    pub estimator: Estimator,
}

impl LogLikelihood for LoadTarget {
    fn log_likelihood(&self, theta: &[f64], seed: u64) -> f64 {
        self.likelihood
            .evaluate(theta, self.estimator, seed)
            .map(|e| e.value)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Unnormalized log posterior. Outside the prior box the likelihood is
/// not evaluated.
pub fn log_posterior<L: LogLikelihood + ?Sized>(
    theta: &[f64],
    prior: &PriorBox,
    likelihood: &L,
    seed: u64,
) -> f64 {
    let lp = prior.log_density(theta);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let ll = likelihood.log_likelihood(theta, seed);
    if ll.is_nan() {
        return f64::NEG_INFINITY;
    }
    lp + ll
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhOutcome {
    pub next: Vec<f64>,
    pub log_post: f64,
    pub accepted: bool,
}

/// One random-walk Metropolis-Hastings step with independent Gaussian
/// increments of standard deviation `proposal_scale[i]`.
pub fn mh_step<T, R>(
    current: &[f64],
    log_post_current: f64,
    proposal_scale: &[f64],
    target: T,
    rng: &mut R,
) -> MhOutcome
where
    T: FnOnce(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let proposal: Vec<f64> = current
        .iter()
        .zip(proposal_scale)
        .map(|(x, s)| x + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = target(&proposal);
    let u: f64 = rng.random();
    if accept(u, lp - log_post_current) {
        MhOutcome {
            next: proposal,
            log_post: lp,
            accepted: true,
        }
    } else {
        MhOutcome {
            next: current.to_vec(),
            log_post: log_post_current,
            accepted: false,
        }
    }
}

#[inline]
fn accept(u: f64, log_ratio: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || u.ln() < log_ratio
}

/// Draws `z` from `g(z) ∝ 1/sqrt(z)` on `[1/a, a]`.
pub fn sample_stretch<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let r = (a - 1.0) * u + 1.0;
    r * r / a
}

/// `complement + z (current - complement)`.
pub fn stretch_proposal(current: &[f64], complement: &[f64], z: f64) -> Vec<f64> {
    current
        .iter()
        .zip(complement)
        .map(|(x, c)| c + z * (x - c))
        .collect()
}

/// Log acceptance ratio `(dim - 1) ln z + Δ log posterior`.
pub fn stretch_log_ratio(dim: usize, z: f64, log_post_new: f64, log_post_old: f64) -> f64 {
    (dim as f64 - 1.0) * z.ln() + log_post_new - log_post_old
}

/// Per-step counters of the ensemble move.
#[derive(Debug, Clone, PartialEq)]
pub struct StretchStats {
    pub accepted: Vec<bool>,
    /// `z` drawn for every walker.
    pub z: Vec<f64>,
}

/// One ensemble update with the stretch move, in two half-batches.
///
/// `target(theta, seed)` is the log posterior; walker `k` uses random
/// stream `k` of `step_seed` and evaluation seed `derive_seed(step_seed, [k])`.
pub fn ensemble_stretch_step<T>(
    walkers: &mut [Vec<f64>],
    log_posts: &mut [f64],
    a_stretch: f64,
    target: &T,
    step_seed: u64,
) -> Result<StretchStats>
where
    T: Fn(&[f64], u64) -> f64 + Sync,
{
    let n = walkers.len();
    let dim = walkers.first().map_or(0, Vec::len);
    if n < 2 * dim || n < 2 {
        return Err(Error::config(format!(
            "ensemble needs at least {} walkers for dimension {dim}, got {n}",
            (2 * dim).max(2)
        )));
    }
    if !(a_stretch > 1.0) {
        return Err(Error::config(format!(
            "stretch scale must exceed 1, got {a_stretch}"
        )));
    }
    if walkers.iter().all(|w| *w == walkers[0]) {
        return Err(Error::DegenerateEnsemble);
    }
    let half = n / 2;
    let mut stats = StretchStats {
        accepted: vec![false; n],
        z: vec![0.0; n],
    };
    for (active, other) in [(0..half, half..n), (half..n, 0..half)] {
        let results: Vec<(usize, Vec<f64>, f64, f64, bool)> = active
            .clone()
            .into_par_iter()
            .map(|k| {
                let mut rng = stream_rng(step_seed, k as u64);
                let j = other.start + rng.random_range(0..other.len());
                let z = sample_stretch(a_stretch, &mut rng);
                let proposal = stretch_proposal(&walkers[k], &walkers[j], z);
                let lp = target(&proposal, derive_seed(step_seed, &[k as u64]));
                let u: f64 = rng.random();
                let ok = accept(u, stretch_log_ratio(dim, z, lp, log_posts[k]));
                (k, proposal, lp, z, ok)
            })
            .collect();
        for (k, proposal, lp, z, ok) in results {
            stats.z[k] = z;
            stats.accepted[k] = ok;
            if ok {
                walkers[k] = proposal;
                log_posts[k] = lp;
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ensemble,
    Mh,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ensemble => "ensemble",
            SamplerKind::Mh => "mh",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" | "emcee" | "stretch" => Ok(SamplerKind::Ensemble),
            "mh" | "metropolis" => Ok(SamplerKind::Mh),
            other => Err(Error::config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Where walkers start: uniform jitter of `jitter` box widths around
/// `center` (the box center when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_jitter() -> f64 {
    0.05
}

fn default_attempts() -> usize {
    100
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            center: None,
            jitter: default_jitter(),
            max_attempts: default_attempts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub walkers: usize,
    pub steps: usize,
    /// Stretch-move scale `a`.
    pub stretch: f64,
    /// Random-walk standard deviations for MH; defaults to 5% of the box.
    #[serde(default)]
    pub proposal_scale: Option<Vec<f64>>,
    #[serde(default)]
    pub init: InitSpec,
    pub seed: u64,
    /// Fraction of steps suggested as burn-in.
    pub burn_in_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ensemble,
            walkers: 400,
            steps: 1000,
            stretch: 2.0,
            proposal_scale: None,
            init: InitSpec::default(),
            seed: 0,
            burn_in_fraction: 0.2,
        }
    }
}

/// Provenance recorded alongside the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub sampler: SamplerKind,
    pub estimator: String,
    pub n_samples: usize,
    pub seed: u64,
    pub prior: PriorBox,
    pub dataset: String,
    pub burn_in_suggestion: usize,
}

/// Every state visited by every walker.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    pub initial: Vec<Vec<f64>>,
    pub initial_log_post: Vec<f64>,
    /// `[walker][step][dim]`, steps `1..=n_steps`.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// `[walker][step]`.
    pub log_posterior: Vec<Vec<f64>>,
    pub accepted: Vec<usize>,
    pub meta: ChainMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainSidecar {
    names: Vec<String>,
    walkers: usize,
    steps: usize,
    accepted: Vec<usize>,
    initial: Vec<Vec<f64>>,
    initial_log_post: Vec<f64>,
    meta: ChainMeta,
}

impl Chain {
    pub fn n_walkers(&self) -> usize {
        self.initial.len()
    }

    pub fn n_steps(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn acceptance_rate(&self) -> Vec<f64> {
        let steps = self.n_steps();
        self.accepted
            .iter()
            .map(|&a| {
                if steps == 0 {
                    0.0
                } else {
                    a as f64 / steps as f64
                }
            })
            .collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        let r = self.acceptance_rate();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Draws of parameter `p` pooled over walkers, steps `from..`.
    pub fn pooled(&self, p: usize, from: usize) -> Vec<f64> {
        self.draws
            .iter()
            .flat_map(|w| w.iter().skip(from).map(move |x| x[p]))
            .collect()
    }

    pub fn csv_header(&self) -> String {
        format!("walker,step,{},log_posterior", self.names.join(","))
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for (w, (draws, lps)) in self.draws.iter().zip(&self.log_posterior).enumerate() {
            for (s, (x, lp)) in draws.iter().zip(lps).enumerate() {
                out.push_str(&format!("{w},{}", s + 1));
                for v in x {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{lp}\n"));
            }
        }
        out
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut name = csv_path
            .file_stem()
            .map(|s| s.to_os_string())
            .unwrap_or_default();
        name.push(".meta.toml");
        csv_path.with_file_name(name)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let side = ChainSidecar {
            names: self.names.clone(),
            walkers: self.n_walkers(),
            steps: self.n_steps(),
            accepted: self.accepted.clone(),
            initial: self.initial.clone(),
            initial_log_post: self.initial_log_post.clone(),
            meta: self.meta.clone(),
        };
        let meta_path = Self::sidecar_path(csv_path);
        let text = toml::to_string(&side).expect("chain metadata always serializes");
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta_path = Self::sidecar_path(csv_path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let side: ChainSidecar =
            toml::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let dim = side.names.len();
        let mut draws = vec![Vec::with_capacity(side.steps); side.walkers];
        let mut log_posterior = vec![Vec::with_capacity(side.steps); side.walkers];
        let mut lines = text.lines();
        let header = format!("walker,step,{},log_posterior", side.names.join(","));
        if lines.next().map(str::trim) != Some(header.as_str()) {
            return Err(Error::format(csv_path, format!("expected header {header}")));
        }
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: String| Error::format(csv_path, format!("line {}: {reason}", i + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != dim + 3 {
                return Err(bad(format!("expected {} columns", dim + 3)));
            }
            let w: usize = cols[0].parse().map_err(|e| bad(format!("{e}")))?;
            let s: usize = cols[1].parse().map_err(|e| bad(format!("{e}")))?;
            if w >= side.walkers || s != draws[w].len() + 1 {
                return Err(bad(format!("unexpected walker/step {w}/{s}")));
            }
            let vals = cols[2..]
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("{e}"))))
                .collect::<Result<Vec<f64>>>()?;
            log_posterior[w].push(vals[dim]);
            draws[w].push(vals[..dim].to_vec());
        }
        if draws.iter().any(|d| d.len() != side.steps) {
            return Err(Error::format(csv_path, "chain is truncated"));
        }
        Ok(Chain {
            names: side.names,
            initial: side.initial,
            initial_log_post: side.initial_log_post,
            draws,
            log_posterior,
            accepted: side.accepted,
            meta: side.meta,
        })
    }
}

const INIT_TAG: u64 = 0x1417;

fn initialize<T>(
    target: &T,
    prior: &PriorBox,
    cfg: &SamplerConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)>
where
    T: Fn(&[f64], u64) -> f64 + Sync,
{
    let center = match &cfg.init.center {
        Some(c) if c.len() == prior.dim() => c.clone(),
        Some(c) => {
            return Err(Error::config(format!(
                "initial center has {} entries, prior has {}",
                c.len(),
                prior.dim()
            )))
        }
        None => prior.center(),
    };
    let widths = prior.widths();
    let init_seed = derive_seed(cfg.seed, &[INIT_TAG]);
    (0..cfg.walkers)
        .into_par_iter()
        .map(|w| {
            let mut rng = stream_rng(init_seed, w as u64);
            for attempt in 0..cfg.init.max_attempts {
                let theta: Vec<f64> = center
                    .iter()
                    .zip(&widths)
                    .map(|(c, wd)| c + cfg.init.jitter * wd * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                let lp = target(&theta, derive_seed(init_seed, &[w as u64, attempt as u64]));
                if lp.is_finite() {
                    return Ok((theta, lp));
                }
            }
            Err(Error::SamplerInit {
                walker: w,
                attempts: cfg.init.max_attempts,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Runs the configured sampler against `likelihood` under `prior`.
pub fn run_sampler<L: LogLikelihood>(
    likelihood: &L,
    prior: &PriorBox,
    names: Vec<String>,
    cfg: &SamplerConfig,
    meta: ChainMeta,
) -> Result<Chain> {
    run_sampler_with_progress(likelihood, prior, names, cfg, meta, |_, _| {})
}

/// As [`run_sampler`], reporting `(step, running acceptance)` after each step.
pub fn run_sampler_with_progress<L, P>(
    likelihood: &L,
    prior: &PriorBox,
    names: Vec<String>,
    cfg: &SamplerConfig,
    mut meta: ChainMeta,
    mut progress: P,
) -> Result<Chain>
where
    L: LogLikelihood,
    P: FnMut(usize, f64),
{
    if names.len() != prior.dim() {
        return Err(Error::config(format!(
            "{} parameter names for a {}-dimensional prior",
            names.len(),
            prior.dim()
        )));
    }
    if cfg.walkers == 0 {
        return Err(Error::config("need at least one walker"));
    }
    if !(0.0..1.0).contains(&cfg.burn_in_fraction) {
        return Err(Error::config("burn_in_fraction must lie in [0, 1)"));
    }
    let target = |theta: &[f64], seed: u64| log_posterior(theta, prior, likelihood, seed);
    let (mut walkers, mut log_posts) = initialize(&target, prior, cfg)?;
    let initial = walkers.clone();
    let initial_log_post = log_posts.clone();
    let n = cfg.walkers;
    let mut draws = vec![Vec::with_capacity(cfg.steps); n];
    let mut lp_store = vec![Vec::with_capacity(cfg.steps); n];
    let mut accepted = vec![0usize; n];

    let scale = match &cfg.proposal_scale {
        Some(s) if s.len() == prior.dim() => s.clone(),
        Some(_) => return Err(Error::config("proposal_scale length differs from prior")),
        None => prior.widths().iter().map(|w| 0.05 * w).collect(),
    };

    for step in 0..cfg.steps {
        let step_seed = derive_seed(cfg.seed, &[step as u64]);
        match cfg.kind {
            SamplerKind::Ensemble => {
                let stats = ensemble_stretch_step(
                    &mut walkers,
                    &mut log_posts,
                    cfg.stretch,
                    &target,
                    step_seed,
                )?;
                for (a, ok) in accepted.iter_mut().zip(&stats.accepted) {
                    *a += usize::from(*ok);
                }
            }
            SamplerKind::Mh => {
                let results: Vec<MhOutcome> = (0..n)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = stream_rng(step_seed, k as u64);
                        let eval_seed = derive_seed(step_seed, &[k as u64]);
                        mh_step(
                            &walkers[k],
                            log_posts[k],
                            &scale,
                            |th| target(th, eval_seed),
                            &mut rng,
                        )
                    })
                    .collect();
                for (k, out) in results.into_iter().enumerate() {
                    accepted[k] += usize::from(out.accepted);
                    walkers[k] = out.next;
                    log_posts[k] = out.log_post;
                }
            }
        }
        for k in 0..n {
            draws[k].push(walkers[k].clone());
            lp_store[k].push(log_posts[k]);
        }
        let rate = accepted.iter().sum::<usize>() as f64 / (n * (step + 1)) as f64;
        progress(step + 1, rate);
    }
    meta.seed = cfg.seed;
    meta.sampler = cfg.kind;
    meta.prior = prior.clone();
    meta.burn_in_suggestion = (cfg.burn_in_fraction * cfg.steps as f64).floor() as usize;
    Ok(Chain {
        names,
        initial,
        initial_log_post,
        draws,
        log_posterior: lp_store,
        accepted,
        meta,
    })
}

/// Metadata for a chain drawn with `estimator` on dataset `dataset`.
pub fn chain_meta(estimator: Estimator, dataset: impl Into<String>) -> ChainMeta {
    ChainMeta {
        sampler: SamplerKind::Ensemble,
        estimator: estimator.kind().to_string(),
        n_samples: estimator.samples(),
        seed: 0,
        prior: PriorBox::case_study(),
        dataset: dataset.into(),
        burn_in_suggestion: 0,
    }
}
