//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p stochload-cli --test acceptance -- 3 5`.

#[path = "../../core/tests/support/kalman.rs"]
mod kalman;

use rand::Rng;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use stochload::analysis::{likelihood_scan, linspace, summarize, DEFAULT_BINS, DEFAULT_LEVEL};
use stochload::likelihood::{
    estimator_variance_study, log_mean_exp, mc_loglik, pf_loglik, systematic_resample, Estimator,
    EstimatorKind, LoadLikelihood, Resampling,
};
use stochload::model::{
    d_input, simulate_trajectory, state_derivative, steady_state_init, LoadParams, Motor,
    ParamName, SimMode,
};
use stochload::rng::{derive_seed, stream_rng};
use stochload::sampler::{
    chain_meta, ensemble_stretch_step, mh_step, run_sampler, Chain, LoadTarget, PriorBox,
    SamplerConfig,
};
use stochload::scenario::{
    synthesize_dataset, MeasurementSeries, SynthesisSettings, VoltageScenario,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn dataset(truth: &LoadParams, a: f64, mode: SimMode, seed: u64) -> MeasurementSeries {
    let settings = SynthesisSettings {
        mode,
        seed,
        ..Default::default()
    };
    synthesize_dataset(truth, &VoltageScenario::with_dip(a), &settings).expect("dataset")
}

fn stochastic_truth() -> LoadParams {
    let mut p = LoadParams::default();
    // process noise variance 0.01
    p.tripping.sigma_w = 0.1;
    p
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let p = LoadParams::default();
    let x = steady_state_init(&p, 1.0).expect("init");
    let motor = Motor::new(p.motor, p.negative_stator_coupling).expect("motor");
    let (p_mot, _) = motor.power(x.i_d, x.i_q, 1.0, 0.0);
    let (de_d, de_q, ds) = state_derivative(&x, &p).expect("derivative");
    let deriv = de_d.abs().max(de_q.abs()).max(ds.abs());
    let flat = VoltageScenario {
        a: 1.0,
        d: 1.0,
        ..VoltageScenario::default()
    };
    let traj = simulate_trajectory(
        &p,
        &flat,
        1e-3,
        SimMode::Deterministic,
        &mut stream_rng(0, 0),
    )
    .expect("simulate");
    let drift = traj
        .rows
        .iter()
        .map(|r| {
            (r.state.e_d - x.e_d)
                .abs()
                .max((r.state.e_q - x.e_q).abs())
                .max((r.state.s - x.s).abs())
                .max((r.state.fr - x.fr).abs())
        })
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let power_err = (p_mot - 0.8).abs();
    outcome(
        power_err < 1e-8 && deriv < 1e-8 && drift < 1e-6 && within(elapsed, 1.0),
        format!(
            "|P_mot - 0.8| = {power_err:.2e}, max |derivative| = {deriv:.2e}, 5 s drift = {drift:.2e}, {:.3} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let toy = kalman::ArToy::generate(0.8, 0.2, 1.0, 50, 2024);
    let exact = toy.exact_loglik();
    let reps = 200u64;
    let mc: Vec<f64> = (0..reps)
        .map(|r| mc_loglik(&toy, 500, derive_seed(71, &[r])).loglik)
        .collect();
    let pf: Vec<f64> = (0..reps)
        .map(|r| pf_loglik(&toy, 500, derive_seed(72, &[r]), Resampling::default()).loglik)
        .collect();
    let (mc_mean, mc_se, mc_var) = kalman::ratio_stats(&mc, exact);
    let (pf_mean, pf_se, pf_var) = kalman::ratio_stats(&pf, exact);
    let elapsed = start.elapsed();
    let mc_ok = (mc_mean - 1.0).abs() < 3.0 * mc_se;
    let pf_ok = (pf_mean - 1.0).abs() < 3.0 * pf_se;
    outcome(
        mc_ok && pf_ok && pf_var < mc_var && within(elapsed, 60.0),
        format!(
            "MC ratio {mc_mean:.4} +- {mc_se:.4}, PF ratio {pf_mean:.4} +- {pf_se:.4}, \
             Var[log MC] = {mc_var:.4e}, Var[log PF] = {pf_var:.4e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let truth = LoadParams::default();
    let prior = PriorBox::case_study();
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, param) in [ParamName::V1off, ParamName::V2off].into_iter().enumerate() {
        let grid = linspace(prior.lower[i], prior.upper[i], 9);
        let cell = grid[1] - grid[0];
        let wrong = prior.lower[i];
        let mut gaps = Vec::new();
        for a in [0.6, 0.7, 0.8] {
            let data = dataset(&truth, a, SimMode::Deterministic, 1);
            let lik = LoadLikelihood::new(truth.clone(), data).expect("likelihood");
            let scan = likelihood_scan(&lik, param, &grid, &truth, Estimator::Deterministic, 0)
                .expect("scan");
            let best = scan.argmax().expect("nonempty");
            let gap =
                scan.loglik_near(truth.get(param)).unwrap() - scan.loglik_near(wrong).unwrap();
            gaps.push(gap);
            if a == 0.6 {
                let ok = (best - truth.get(param)).abs() <= cell + 1e-12;
                pass &= ok;
                detail.push(format!(
                    "{param} argmax at a=0.6: {best:.4} (cell {cell:.4})"
                ));
            }
        }
        // gaps are listed for a = 0.6, 0.7, 0.8
        let increasing = gaps[0] > gaps[1] && gaps[1] > gaps[2];
        pass &= increasing;
        detail.push(format!(
            "{param} gap vs {wrong}: {:.3}, {:.3}, {:.3}",
            gaps[0], gaps[1], gaps[2]
        ));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 120.0);
    detail.push(format!("{:.1} s", elapsed.as_secs_f64()));
    outcome(pass, detail.join("; "))
}

fn chain_for(
    data: MeasurementSeries,
    truth: &LoadParams,
    estimator: Estimator,
    seed: u64,
) -> Chain {
    let target = LoadTarget {
        likelihood: LoadLikelihood::new(truth.clone(), data).expect("likelihood"),
        estimator,
    };
    let cfg = SamplerConfig {
        walkers: 100,
        steps: 300,
        seed,
        ..Default::default()
    };
    let names = truth
        .theta_mask
        .names()
        .iter()
        .map(|n| n.to_string())
        .collect();
    run_sampler(
        &target,
        &PriorBox::case_study(),
        names,
        &cfg,
        chain_meta(estimator, "acceptance"),
    )
    .expect("sampler")
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let truth = LoadParams::default();
    let data = dataset(&truth, 0.6, SimMode::Deterministic, 1);
    let chain = chain_for(data, &truth, Estimator::Deterministic, 4);
    let s = summarize(
        &chain,
        0.2,
        DEFAULT_BINS,
        DEFAULT_LEVEL,
        Some(&truth.theta()),
    )
    .expect("summary");
    let mut pass = true;
    let mut detail = Vec::new();
    for (p, t) in s.params.iter().zip(truth.theta()) {
        let ok = (p.mean - t).abs() < 2.0 * p.std;
        pass &= ok;
        detail.push(format!(
            "{} {:.4} +- {:.4} (truth {t})",
            p.name, p.mean, p.std
        ));
    }
    let rate = chain.mean_acceptance();
    pass &= rate > 0.05 && rate < 0.95;
    let elapsed = start.elapsed();
    pass &= within(elapsed, 900.0);
    detail.push(format!(
        "acceptance {rate:.3}, {:.1} s",
        elapsed.as_secs_f64()
    ));
    outcome(pass, detail.join("; "))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let truth = stochastic_truth();
    let t = truth.tripping.v_1off;
    let mut biased = 0;
    let mut improved = 0;
    let mut rows = Vec::new();
    for r in 0..10u64 {
        let data = dataset(&truth, 0.6, SimMode::Stochastic, 101 + r);
        let det = chain_for(
            data.clone(),
            &truth,
            Estimator::Deterministic,
            derive_seed(5, &[r, 0]),
        );
        let pf = chain_for(
            data,
            &truth,
            Estimator::ParticleFilter { particles: 200 },
            derive_seed(5, &[r, 1]),
        );
        let sd = summarize(&det, 0.2, DEFAULT_BINS, DEFAULT_LEVEL, None).expect("summary");
        let sp = summarize(&pf, 0.2, DEFAULT_BINS, DEFAULT_LEVEL, None).expect("summary");
        let (d, p) = (&sd.params[0], &sp.params[0]);
        let (bias_det, bias_pf) = ((d.mean - t).abs(), (p.mean - t).abs());
        if bias_det > d.std {
            biased += 1;
        }
        if bias_pf < bias_det && p.std > d.std {
            improved += 1;
        }
        rows.push(format!(
            "r{r}: det {:.4}+-{:.4} pf {:.4}+-{:.4}",
            d.mean, d.std, p.mean, p.std
        ));
        eprintln!("criterion 5 replication {r}: {}", rows.last().unwrap());
    }
    let elapsed = start.elapsed();
    outcome(
        biased >= 7 && improved >= 7 && within(elapsed, 3600.0),
        format!(
            "det biased in {biased}/10, pf less biased and wider in {improved}/10, {:.0} s [{}]",
            elapsed.as_secs_f64(),
            rows.join("; ")
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let truth = stochastic_truth();
    let data = dataset(&truth, 0.6, SimMode::Stochastic, 1);
    let lik = LoadLikelihood::new(truth.clone(), data).expect("likelihood");
    let counts = [10, 50, 250];
    let rows = estimator_variance_study(&lik, &truth.theta(), &counts, 30, 6).expect("study");
    let var = |kind: EstimatorKind, n: usize| {
        rows.iter()
            .find(|r| r.estimator == kind && r.n == n)
            .map(|r| r.variance)
            .expect("row")
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for n in counts {
        let (mc, pf) = (var(EstimatorKind::Mc, n), var(EstimatorKind::Pf, n));
        pass &= pf < mc;
        detail.push(format!("n={n}: MC {mc:.4e} PF {pf:.4e}"));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 600.0);
    detail.push(format!("{:.1} s", elapsed.as_secs_f64()));
    outcome(pass, detail.join("; "))
}

fn run_cli(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_stochload"))
        .args(args)
        .arg("--output")
        .arg(dir)
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("output dir")
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        "seed = 7\n[model]\nsigma_w = 0.1\n[data]\nmode = \"stochastic\"\n\
         [sampler]\nwalkers = 12\nsteps = 20\n[variance]\ncounts = [5, 10]\nreplications = 20\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into()]),
        ("scan", vec!["scan".into(), "--points".into(), "9".into()]),
        (
            "scan-pf",
            vec![
                "scan".into(),
                "--estimator".into(),
                "pf".into(),
                "--particles".into(),
                "20".into(),
                "--points".into(),
                "5".into(),
            ],
        ),
        ("sample-det", vec!["sample".into()]),
        (
            "sample-pf",
            vec![
                "sample".into(),
                "--estimator".into(),
                "pf".into(),
                "--particles".into(),
                "20".into(),
            ],
        ),
        ("variance-study", vec!["variance-study".into()]),
    ];
    let mut failures = Vec::new();
    let mut checked = 0;
    for (name, args) in &runs {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{name}-{rep}"));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            full.extend(["--config", cfg.as_str()]);
            if !run_cli(&full, &dir) {
                failures.push(format!("{name} exited with failure"));
            }
            outputs.push(dir_contents(&dir));
        }
        // the echoed config names the output directory; compare everything else
        let strip = |v: &Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
            v.iter()
                .filter(|(f, _)| f != "config.resolved.toml")
                .cloned()
                .collect()
        };
        if strip(&outputs[0]) != strip(&outputs[1]) || outputs[0].is_empty() {
            failures.push(format!("{name} outputs differ"));
        }
        checked += outputs[0].len();
    }
    let chain = tmp.path().join("sample-det-0/chain.csv");
    let stoch = tmp.path().join("sample-pf-0/chain.csv");
    let mut analyses = Vec::new();
    for rep in 0..2 {
        let dir = tmp.path().join(format!("analyze-{rep}"));
        let ok = run_cli(
            &[
                "analyze",
                "--config",
                &cfg,
                "--chain",
                chain.to_str().unwrap(),
                "--stoch-chain",
                stoch.to_str().unwrap(),
            ],
            &dir,
        );
        if !ok {
            failures.push("analyze exited with failure".into());
        }
        analyses.push(
            dir_contents(&dir)
                .into_iter()
                .filter(|(f, _)| f != "config.resolved.toml")
                .collect::<Vec<_>>(),
        );
    }
    if analyses[0] != analyses[1] || analyses[0].is_empty() {
        failures.push("analyze outputs differ".into());
    }
    checked += analyses[0].len();
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{checked} files identical across reruns of 7 commands, {:.1} s",
                elapsed.as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn check(name: &str, ok: bool, detail: String, failures: &mut Vec<String>) {
    if !ok {
        failures.push(format!("{name}: {detail}"));
    }
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let truth = LoadParams::default();

    // fixed points of the motor at several terminal voltages
    let mut worst = 0.0f64;
    for v in [1.0, 0.95, 0.9] {
        let x = steady_state_init(&truth, v).expect("steady state");
        let (a, b, c) = state_derivative(&x, &truth).expect("derivative");
        worst = worst.max(a.abs()).max(b.abs()).max(c.abs());
    }
    check(
        "fixed points",
        worst < 1e-8,
        format!("max derivative {worst:e}"),
        &mut failures,
    );

    // tripping characteristic is continuous at both thresholds
    let tp = &truth.tripping;
    let eps = 1e-9;
    let jump = [tp.v_1off, tp.v_2off]
        .iter()
        .map(|&v| (d_input(v + eps, tp) - d_input(v - eps, tp)).abs())
        .fold(0.0, f64::max);
    check(
        "continuity",
        jump < 1e-6,
        format!("largest jump {jump:e}"),
        &mut failures,
    );

    // log-mean-exp commutes with a shift and survives large magnitudes
    let xs = [-3.0, 0.5, 2.0, -1.25];
    let base = log_mean_exp(&xs);
    let shift_err = [-1e3, 1e3, 7.5]
        .iter()
        .map(|&c| {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            (log_mean_exp(&shifted) - base - c).abs() / c.abs().max(1.0)
        })
        .fold(0.0, f64::max);
    let huge = log_mean_exp(&[-1e5, -1e5 - 1.0]);
    check(
        "log-sum-exp shift",
        shift_err < 1e-12 && huge.is_finite(),
        format!("relative shift error {shift_err:e}, large-magnitude value {huge}"),
        &mut failures,
    );

    // systematic resampling gives every index floor(n w) or ceil(n w) offspring
    let mut rng = stream_rng(8, 0);
    let mut bad = 0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        let n = 1 + rng.random_range(0..40usize);
        let idx = systematic_resample(&w, n, rng.random::<f64>());
        let mut counts = vec![0usize; w.len()];
        idx.iter().for_each(|&i| counts[i] += 1);
        for (c, wi) in counts.iter().zip(&w) {
            let expected = n as f64 * wi / total;
            if (*c as f64) < expected.floor() - 1e-9 || (*c as f64) > expected.ceil() + 1e-9 {
                bad += 1;
            }
        }
    }
    check(
        "resampling counts",
        bad == 0,
        format!("{bad} out-of-range counts"),
        &mut failures,
    );

    // detailed balance of random-walk MH between two cells weighted 0.3 / 0.7
    let weights = [0.3f64, 0.7];
    let target = |x: &[f64]| match x[0] {
        v if (0.0..1.0).contains(&v) => weights[0].ln(),
        v if (1.0..2.0).contains(&v) => weights[1].ln(),
        _ => f64::NEG_INFINITY,
    };
    let cell = |x: f64| usize::from(x >= 1.0);
    let mut rng = stream_rng(8, 1);
    let mut x = vec![0.5];
    let mut lp = target(&x);
    let mut occupancy = [0usize; 2];
    let mut moves = [[0usize; 2]; 2];
    for _ in 0..100_000 {
        let from = cell(x[0]);
        let out = mh_step(&x, lp, &[0.7], target, &mut rng);
        x = out.next;
        lp = out.log_post;
        occupancy[from] += 1;
        moves[from][cell(x[0])] += 1;
    }
    let p01 = moves[0][1] as f64 / occupancy[0] as f64;
    let p10 = moves[1][0] as f64 / occupancy[1] as f64;
    let (lhs, rhs) = (weights[0] * p01, weights[1] * p10);
    let sd = (weights[0].powi(2) * p01 * (1.0 - p01) / occupancy[0] as f64
        + weights[1].powi(2) * p10 * (1.0 - p10) / occupancy[1] as f64)
        .sqrt();
    check(
        "detailed balance",
        (lhs - rhs).abs() < 3.0 * sd,
        format!("flux {lhs:.5} vs {rhs:.5}, sd {sd:.5}"),
        &mut failures,
    );

    // stretch move commutes bitwise with a dyadic diagonal scaling
    let scale = [2.0, 0.25, 8.0];
    let lp_y = |y: &[f64], _: u64| {
        -0.5 * (y[0] * y[0] + 2.0 * y[1] * y[1] + 0.5 * y[2] * y[2] + y[0] * y[1])
    };
    let lp_x = |x: &[f64], s: u64| {
        let y: Vec<f64> = x.iter().zip(&scale).map(|(a, d)| a / d).collect();
        lp_y(&y, s)
    };
    let mut rng = stream_rng(8, 2);
    let mut ys: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..3).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let map = |y: &[f64]| {
        y.iter()
            .zip(&scale)
            .map(|(a, d)| a * d)
            .collect::<Vec<f64>>()
    };
    let mut xs: Vec<Vec<f64>> = ys.iter().map(|y| map(y)).collect();
    let mut lps_y: Vec<f64> = ys.iter().map(|y| lp_y(y, 0)).collect();
    let mut lps_x: Vec<f64> = xs.iter().map(|x| lp_x(x, 0)).collect();
    let mut mismatch = None;
    for step in 0..300 {
        let seed = derive_seed(8, &[step]);
        ensemble_stretch_step(&mut ys, &mut lps_y, 2.0, &lp_y, seed).expect("stretch step");
        ensemble_stretch_step(&mut xs, &mut lps_x, 2.0, &lp_x, seed).expect("stretch step");
        if mismatch.is_none() && xs.iter().zip(&ys).any(|(x, y)| *x != map(y)) {
            mismatch = Some(step);
        }
    }
    check(
        "affine invariance",
        mismatch.is_none(),
        format!("first mismatch at step {mismatch:?}"),
        &mut failures,
    );

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && within(elapsed, 300.0);
    outcome(
        pass,
        if failures.is_empty() {
            format!(
                "fixed points, continuity, log-sum-exp shift, resampling counts, detailed balance and affine invariance hold, {:.1} s",
                elapsed.as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (
            1,
            "steady-state initialization and constant-voltage drift",
            criterion_1,
        ),
        (
            2,
            "MC and PF estimates against the Kalman likelihood",
            criterion_2,
        ),
        (
            3,
            "deterministic scans peak at truth and sharpen with deeper dips",
            criterion_3,
        ),
        (
            4,
            "deterministic posterior covers the truth (100 x 300)",
            criterion_4,
        ),
        (
            5,
            "stochastic dataset: deterministic bias, PF posterior less biased and wider",
            criterion_5,
        ),
        (6, "PF log-likelihood variance below MC", criterion_6),
        (7, "bitwise reproducible command outputs", criterion_7),
        (8, "unit-level invariants", criterion_8),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let o = run();
        println!(
            "criterion {id} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
