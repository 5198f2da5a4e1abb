//! Posterior summaries, histograms, deterministic-vs-stochastic comparison
//! and likelihood scans, plus their file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Estimator, LoadLikelihood};
use crate::model::{LoadParams, ParamName};
use crate::sampler::Chain;

/// Default credible level, one standard deviation of a normal.
pub const DEFAULT_LEVEL: f64 = 0.683;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; values outside are dropped and
    /// `hi` itself falls in the last bin.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if !(lo..=hi).contains(&v) {
                continue;
            }
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", self.edges[i], self.edges[i + 1]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub interval: [f64; 2],
    pub histogram: Histogram,
    pub truth: Option<f64>,
    /// Integrated autocorrelation time in steps, averaged over walkers.
    pub autocorr_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub burn_in: usize,
    pub level: f64,
    pub retained: usize,
    pub mean_acceptance: f64,
    pub params: Vec<ParamSummary>,
}

impl PosteriorSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary always serializes")
    }
}

/// Mean and population standard deviation of sorted values. Summing in
/// sorted order makes the result independent of how draws were pooled.
fn sorted_moments(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len() as f64;
    let shift = sorted[0];
    let mean = shift + sorted.iter().map(|x| x - shift).sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Autocorrelation function of `x` up to lag `max_lag`.
fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>();
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            if c0 == 0.0 {
                return if lag == 0 { 1.0 } else { 0.0 };
            }
            c[..n - lag]
                .iter()
                .zip(&c[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / c0
        })
        .collect()
}

/// Integrated autocorrelation time with a self-consistent window of
/// `window_factor` times the estimate, averaging the autocorrelation
/// functions of several series of equal length.
pub fn integrated_autocorr_time(series: &[Vec<f64>], window_factor: f64) -> f64 {
    let Some(len) = series.iter().map(Vec::len).min() else {
        return f64::NAN;
    };
    if len < 2 {
        return f64::NAN;
    }
    let mut rho = vec![0.0; len];
    for s in series {
        for (r, a) in rho.iter_mut().zip(autocorrelation(&s[..len], len - 1)) {
            *r += a;
        }
    }
    for r in &mut rho {
        *r /= series.len() as f64;
    }
    let mut tau = 1.0;
    for m in 1..len {
        tau += 2.0 * rho[m];
        if m as f64 >= window_factor * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Statistics of the pooled draws after discarding the first
/// `burn_in_fraction` of steps of every walker.
pub fn summarize(
    chain: &Chain,
    burn_in_fraction: f64,
    bins: usize,
    level: f64,
    truth: Option<&[f64]>,
) -> Result<PosteriorSummary> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::config("burn_in_fraction must lie in [0, 1)"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config("credible level must lie in (0, 1)"));
    }
    if let Some(t) = truth {
        if t.len() != chain.dim() {
            return Err(Error::Mismatch(format!(
                "{} truth values for {} parameters",
                t.len(),
                chain.dim()
            )));
        }
    }
    let burn_in = (burn_in_fraction * chain.n_steps() as f64).floor() as usize;
    let retained = chain.n_walkers() * chain.n_steps().saturating_sub(burn_in);
    if retained == 0 {
        return Err(Error::EmptySample);
    }
    let prior = &chain.meta.prior;
    let mut params = Vec::with_capacity(chain.dim());
    for (p, name) in chain.names.iter().enumerate() {
        let mut values = chain.pooled(p, burn_in);
        values.sort_by(f64::total_cmp);
        let (mean, std) = sorted_moments(&values);
        let tail = 0.5 * (1.0 - level);
        let interval = [quantile(&values, tail), quantile(&values, 1.0 - tail)];
        let (lo, hi) = if prior.dim() == chain.dim() {
            (prior.lower[p], prior.upper[p])
        } else {
            (values[0], values[values.len() - 1])
        };
        let per_walker: Vec<Vec<f64>> = chain
            .draws
            .iter()
            .map(|w| w[burn_in..].iter().map(|x| x[p]).collect())
            .collect();
        params.push(ParamSummary {
            name: name.clone(),
            mean,
            std,
            interval,
            histogram: Histogram::new(&values, lo, hi, bins),
            truth: truth.map(|t| t[p]),
            autocorr_time: integrated_autocorr_time(&per_walker, 5.0),
        });
    }
    Ok(PosteriorSummary {
        burn_in,
        level,
        retained,
        mean_acceptance: chain.mean_acceptance(),
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamComparison {
    pub name: String,
    pub truth: f64,
    pub mean_det: f64,
    pub mean_stoch: f64,
    pub bias_det: f64,
    pub bias_stoch: f64,
    pub std_det: f64,
    pub std_stoch: f64,
    /// `bias_stoch < bias_det`.
    pub stoch_less_biased: bool,
    /// `std_stoch > std_det`.
    pub stoch_wider: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub params: Vec<ParamComparison>,
}

impl Comparison {
    pub fn param(&self, name: &str) -> Option<&ParamComparison> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison always serializes")
    }
}

/// Bias and spread of two posterior summaries against known truth.
pub fn compare_summaries(
    det: &PosteriorSummary,
    stoch: &PosteriorSummary,
    truth: &[f64],
) -> Result<Comparison> {
    let names = |s: &PosteriorSummary| s.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    if names(det) != names(stoch) {
        return Err(Error::Mismatch(format!(
            "parameterizations differ: {:?} vs {:?}",
            names(det),
            names(stoch)
        )));
    }
    if truth.len() != det.params.len() {
        return Err(Error::Mismatch(format!(
            "{} truth values for {} parameters",
            truth.len(),
            det.params.len()
        )));
    }
    let params = det
        .params
        .iter()
        .zip(&stoch.params)
        .zip(truth)
        .map(|((d, s), &t)| {
            let bias_det = (d.mean - t).abs();
            let bias_stoch = (s.mean - t).abs();
            ParamComparison {
                name: d.name.clone(),
                truth: t,
                mean_det: d.mean,
                mean_stoch: s.mean,
                bias_det,
                bias_stoch,
                std_det: d.std,
                std_stoch: s.std,
                stoch_less_biased: bias_stoch < bias_det,
                stoch_wider: s.std > d.std,
            }
        })
        .collect();
    Ok(Comparison { params })
}

/// Summarizes both chains with the same burn-in and compares them.
pub fn compare_det_vs_stoch(
    chain_det: &Chain,
    chain_stoch: &Chain,
    truth: &[f64],
    burn_in_fraction: f64,
) -> Result<Comparison> {
    if chain_det.names != chain_stoch.names {
        return Err(Error::Mismatch(format!(
            "parameterizations differ: {:?} vs {:?}",
            chain_det.names, chain_stoch.names
        )));
    }
    if chain_det.meta.dataset != chain_stoch.meta.dataset {
        return Err(Error::Mismatch(format!(
            "datasets differ: {} vs {}",
            chain_det.meta.dataset, chain_stoch.meta.dataset
        )));
    }
    let det = summarize(
        chain_det,
        burn_in_fraction,
        DEFAULT_BINS,
        DEFAULT_LEVEL,
        Some(truth),
    )?;
    let stoch = summarize(
        chain_stoch,
        burn_in_fraction,
        DEFAULT_BINS,
        DEFAULT_LEVEL,
        Some(truth),
    )?;
    compare_summaries(&det, &stoch, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub value: f64,
    pub loglik: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTable {
    pub param: ParamName,
    pub estimator: Estimator,
    pub rows: Vec<ScanRow>,
}

pub const SCAN_CSV_HEADER: &str = "param,value,loglik";

impl ScanTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCAN_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", self.param, r.value, r.loglik);
        }
        out
    }

    /// Grid value with the largest log-likelihood; ties go to the first.
    pub fn argmax(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| !r.loglik.is_nan())
            .fold(None::<&ScanRow>, |best, r| match best {
                Some(b) if b.loglik >= r.loglik => Some(b),
                _ => Some(r),
            })
            .map(|r| r.value)
    }

    pub fn max_loglik(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.loglik)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Log-likelihood at the grid point closest to `value`.
    pub fn loglik_near(&self, value: f64) -> Option<f64> {
        self.rows
            .iter()
            .min_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()))
            .map(|r| r.loglik)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Evaluates the likelihood along one parameter with every other
/// parameter held at `fixed`. The same seed is used at every grid point.
/// Numerical failures become `-inf` rows.
pub fn likelihood_scan(
    likelihood: &LoadLikelihood,
    param: ParamName,
    grid: &[f64],
    fixed: &LoadParams,
    estimator: Estimator,
    seed: u64,
) -> Result<ScanTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut p = fixed.clone();
        p.set(param, value);
        p.validate()
            .map_err(|e| Error::config(format!("scan point {param}={value}: {e}")))?;
        let est = likelihood.evaluate_params(&p, estimator, seed)?;
        rows.push(ScanRow {
            value,
            loglik: est.value,
            diagnostic: est.diagnostic,
        });
    }
    Ok(ScanTable {
        param,
        estimator,
        rows,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `summary.json` and one `hist_<param>.csv` per parameter.
pub fn write_summary(dir: &Path, summary: &PosteriorSummary) -> Result<()> {
    write(&dir.join("summary.json"), &summary.to_json())?;
    for p in &summary.params {
        write(
            &dir.join(format!("hist_{}.csv", p.name)),
            &p.histogram.to_csv(),
        )?;
    }
    Ok(())
}

pub fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<()> {
    write(&dir.join("compare.json"), &cmp.to_json())
}

/// Gnuplot script plotting every histogram in `summary` and every scan
/// file listed in `scans`, all relative to the output directory.
pub fn gnuplot_script(summary: Option<&PosteriorSummary>, scans: &[String]) -> String {
    let mut s =
        String::from("set datafile separator ','\nset terminal pngcairo size 800,600 noenhanced\n");
    if let Some(summary) = summary {
        for p in &summary.params {
            let _ = writeln!(s, "\nunset arrow");
            let mut marks = vec![(p.mean, 1), (p.mean - p.std, 2), (p.mean + p.std, 2)];
            if let Some(t) = p.truth {
                marks.push((t, 7));
            }
            for (x, lt) in marks {
                let _ = writeln!(
                    s,
                    "set arrow from {x}, graph 0 to {x}, graph 1 nohead lt {lt}"
                );
            }
            let _ = writeln!(
                s,
                "set output 'hist_{n}.png'\nset xlabel '{n}'\nset ylabel 'count'\nset style fill solid 0.5\n\
                 plot 'hist_{n}.csv' skip 1 using (($1+$2)/2):3 with boxes title 'posterior'",
                n = p.name
            );
        }
        let _ = writeln!(s, "\nunset arrow");
    }
    for f in scans {
        let stem = f.trim_end_matches(".csv");
        let _ = writeln!(
            s,
            "\nset output '{stem}.png'\nset xlabel 'parameter'\nset ylabel 'log-likelihood'\n\
             plot '{f}' skip 1 using 2:3 with linespoints title '{stem}'"
        );
    }
    s
}

pub fn write_gnuplot(
    dir: &Path,
    summary: Option<&PosteriorSummary>,
    scans: &[String],
) -> Result<()> {
    write(&dir.join("plot.gp"), &gnuplot_script(summary, scans))
}
