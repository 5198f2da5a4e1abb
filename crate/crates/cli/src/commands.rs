//! The subcommands. Each writes its artifacts under the configured output
//! directory and returns a machine-readable summary for standard output.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stochload::analysis::{
    compare_det_vs_stoch, likelihood_scan, linspace, summarize, write_comparison, write_gnuplot,
    write_summary,
};
use stochload::likelihood::{estimator_variance_study, variance_table_csv, LoadLikelihood};
use stochload::model::{simulate_trajectory, LoadParams};
use stochload::rng::{derive_seed, stream_rng};
use stochload::sampler::{chain_meta, run_sampler_with_progress, Chain, LoadTarget};
use stochload::scenario::{synthesize_dataset, MeasurementSeries, VoltageScenario};
use stochload::{Error, Result};

use crate::config::ExperimentConfig;

const SCAN_TAG: u64 = 0x5ca;
const SAMPLE_TAG: u64 = 0x5a3;

/// Creates the output directory and records the resolved configuration.
pub fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("config.resolved.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// The configured dataset: loaded from `data.path`, or synthesized from
/// the model under `scenario`.
pub fn dataset(
    cfg: &ExperimentConfig,
    scenario: &VoltageScenario,
) -> Result<(MeasurementSeries, String)> {
    match &cfg.data.path {
        Some(path) => Ok((MeasurementSeries::load(path)?, path.display().to_string())),
        None => {
            let s = cfg.synthesis();
            let data = synthesize_dataset(&cfg.model, scenario, &s)?;
            let id = format!(
                "synthetic a={} mode={} seed={} noise_var={}",
                scenario.a,
                match s.mode {
                    stochload::model::SimMode::Deterministic => "deterministic",
                    stochload::model::SimMode::Stochastic => "stochastic",
                },
                s.seed,
                s.noise_var
            );
            Ok((data, id))
        }
    }
}

/// Masked truth values, when the dataset records its generating parameters.
fn truth_theta(cfg: &ExperimentConfig, data: &MeasurementSeries) -> Option<Vec<f64>> {
    data.truth_params.as_ref().map(|p: &LoadParams| {
        cfg.model
            .theta_mask
            .names()
            .iter()
            .map(|&n| p.get(n))
            .collect()
    })
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = prepare_output(cfg)?;
    let s = cfg.synthesis();
    // the synthetic data draw their process noise from stream 0 as well
    let traj = simulate_trajectory(
        &cfg.model,
        &cfg.scenario,
        s.h,
        s.mode,
        &mut stream_rng(s.seed, 0),
    )?;
    write(&dir.join("trajectory.csv"), &traj.to_csv())?;
    let data = synthesize_dataset(&cfg.model, &cfg.scenario, &s)?;
    let data_path = dir.join("data.csv");
    data.save(&data_path)?;
    let min_fraction = traj
        .rows
        .iter()
        .map(|r| r.state.fr)
        .fold(f64::INFINITY, f64::min);
    Ok(json!({
        "command": "simulate",
        "points": data.len(),
        "horizon": cfg.scenario.t_end,
        "noise_var": data.noise_var,
        "mode": s.mode,
        "seed": s.seed,
        "min_fraction": min_fraction,
        "files": ["trajectory.csv", "data.csv", MeasurementSeries::sidecar_path(&data_path).file_name().map(|f| f.to_string_lossy().into_owned())],
    }))
}

pub fn scan(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = prepare_output(cfg)?;
    let (lo, hi) = cfg.scan_bounds()?;
    let grid = linspace(lo, hi, cfg.scan.points);
    let param = cfg.scan.param;
    let estimator = cfg.estimator.estimator();
    let seed = derive_seed(cfg.seed, &[SCAN_TAG]);
    let runs: Vec<(Option<f64>, String)> = if cfg.scan.dips.is_empty() || cfg.data.path.is_some() {
        if cfg.data.path.is_some() && !cfg.scan.dips.is_empty() {
            eprintln!("scan: data file given, ignoring scan.dips");
        }
        vec![(None, format!("scan_{param}.csv"))]
    } else {
        cfg.scan
            .dips
            .iter()
            .map(|&a| (Some(a), format!("scan_{param}_a{a}.csv")))
            .collect()
    };
    let mut results = Vec::new();
    for (dip, file) in &runs {
        let scenario = match dip {
            Some(a) => VoltageScenario {
                a: *a,
                ..cfg.scenario
            },
            None => cfg.scenario,
        };
        let (data, id) = dataset(cfg, &scenario)?;
        let lik = LoadLikelihood::new(cfg.model.clone(), data)?;
        eprintln!("scan: {param} over {} points on {id}", grid.len());
        let table = likelihood_scan(&lik, param, &grid, &cfg.model, estimator, seed)?;
        write(&dir.join(file), &table.to_csv())?;
        let failures = table
            .rows
            .iter()
            .filter(|r| r.loglik == f64::NEG_INFINITY)
            .count();
        results.push(json!({
            "dip": scenario.a,
            "file": file,
            "argmax": table.argmax(),
            "max_loglik": finite_or_null(table.max_loglik()),
            "loglik_at_truth": table.loglik_near(cfg.model.get(param)).and_then(finite_or_null),
            "failed_points": failures,
        }));
    }
    let files: Vec<String> = runs.into_iter().map(|(_, f)| f).collect();
    write_gnuplot(&dir, None, &files)?;
    Ok(json!({
        "command": "scan",
        "param": param,
        "estimator": estimator.kind(),
        "samples": estimator.samples(),
        "truth": cfg.model.get(param),
        "scans": results,
    }))
}

fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn sample(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = prepare_output(cfg)?;
    let (data, id) = dataset(cfg, &cfg.scenario)?;
    let truth = truth_theta(cfg, &data);
    let estimator = cfg.estimator.estimator();
    let target = LoadTarget {
        likelihood: LoadLikelihood::new(cfg.model.clone(), data)?,
        estimator,
    };
    let prior = cfg.prior_box()?;
    let sampler = cfg.sampler_config(derive_seed(cfg.seed, &[SAMPLE_TAG]));
    let every = (sampler.steps / 20).max(1);
    eprintln!(
        "sample: {} walkers x {} steps, estimator {} ({} samples), data {id}",
        sampler.walkers,
        sampler.steps,
        estimator.kind(),
        estimator.samples()
    );
    let chain = run_sampler_with_progress(
        &target,
        &prior,
        cfg.param_names(),
        &sampler,
        chain_meta(estimator, id),
        |step, rate| {
            if step % every == 0 || step == sampler.steps {
                eprintln!("sample: step {step}/{} acceptance {rate:.3}", sampler.steps);
            }
        },
    )?;
    chain.save(&dir.join("chain.csv"))?;
    let mut out = json!({
        "command": "sample",
        "walkers": chain.n_walkers(),
        "steps": chain.n_steps(),
        "rows": chain.n_walkers() * chain.n_steps(),
        "mean_acceptance": chain.mean_acceptance(),
        "burn_in_suggestion": chain.meta.burn_in_suggestion,
    });
    if chain.n_steps() > 0 {
        let summary = summarize(
            &chain,
            cfg.sampler.burn_in_fraction,
            cfg.analysis.bins,
            cfg.analysis.level,
            truth.as_deref(),
        )?;
        write_summary(&dir, &summary)?;
        write_gnuplot(&dir, Some(&summary), &[])?;
        out["summary"] = summary_json(&summary);
    }
    Ok(out)
}

fn summary_json(s: &stochload::analysis::PosteriorSummary) -> Value {
    s.params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                json!({ "mean": p.mean, "std": p.std, "interval": p.interval, "truth": p.truth }),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

pub fn variance_study(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = prepare_output(cfg)?;
    let (data, id) = dataset(cfg, &cfg.scenario)?;
    let lik = LoadLikelihood::new(cfg.model.clone(), data)?;
    let theta = cfg
        .variance
        .theta
        .clone()
        .unwrap_or_else(|| cfg.model.theta());
    eprintln!(
        "variance-study: counts {:?}, {} replications, data {id}",
        cfg.variance.counts, cfg.variance.replications
    );
    let rows = estimator_variance_study(
        &lik,
        &theta,
        &cfg.variance.counts,
        cfg.variance.replications,
        cfg.seed,
    )?;
    write(&dir.join("variance.csv"), &variance_table_csv(&rows))?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "estimator": r.estimator, "n": r.n, "variance": r.variance }))
        .collect();
    Ok(json!({ "command": "variance-study", "theta": theta, "rows": table }))
}

/// Summarizes `chain`, and compares it with `stoch_chain` when given.
/// Truth comes from the chain's dataset if recorded, else from the model.
pub fn analyze(cfg: &ExperimentConfig, chain: &Path, stoch_chain: Option<&Path>) -> Result<Value> {
    let dir = prepare_output(cfg)?;
    let det = Chain::load(chain)?;
    if det.names != cfg.param_names() {
        return Err(Error::Mismatch(format!(
            "chain parameters {:?} differ from the configured mask {:?}",
            det.names,
            cfg.param_names()
        )));
    }
    let truth = cfg.model.theta();
    let summary = summarize(
        &det,
        cfg.sampler.burn_in_fraction,
        cfg.analysis.bins,
        cfg.analysis.level,
        Some(&truth),
    )?;
    write_summary(&dir, &summary)?;
    write_gnuplot(&dir, Some(&summary), &[])?;
    let mut out = json!({ "command": "analyze", "summary": summary_json(&summary) });
    if let Some(path) = stoch_chain {
        let stoch = Chain::load(path)?;
        let cmp = compare_det_vs_stoch(&det, &stoch, &truth, cfg.sampler.burn_in_fraction)?;
        write_comparison(&dir, &cmp)?;
        out["compare"] = serde_json::to_value(&cmp).expect("comparison serializes");
    }
    Ok(out)
}
