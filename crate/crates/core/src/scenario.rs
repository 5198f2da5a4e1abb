//! Terminal-voltage test signal and synthetic measurement datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{simulate_trajectory, step_count, LoadParams, SimMode};
use crate::rng::stream_rng;

/// Voltage dip with delayed linear recovery.
///
/// `V = a` on `[1, 1 + b/60)`, a ramp from `d` back to 1 on
/// `[1 + b/60, 1 + c)` and 1 elsewhere. `b` is in 60 Hz cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoltageScenario {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub t_end: f64,
}

impl Default for VoltageScenario {
    fn default() -> Self {
        VoltageScenario {
            a: 0.6,
            b: 5.0,
            c: 0.5,
            d: 0.7,
            t_end: 5.0,
        }
    }
}

impl VoltageScenario {
    pub fn with_dip(a: f64) -> Self {
        VoltageScenario {
            a,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::config(format!(
                "scenario.a must lie in (0, 1], got {}",
                self.a
            )));
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return Err(Error::config(format!(
                "scenario.d must lie in (0, 1], got {}",
                self.d
            )));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::config(format!(
                "scenario.b must be positive, got {}",
                self.b
            )));
        }
        if !(self.b / 60.0 < self.c && self.c.is_finite()) {
            return Err(Error::config(format!(
                "scenario.c must exceed b/60 = {}, got {}",
                self.b / 60.0,
                self.c
            )));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!(
                "scenario.t_end must be positive, got {}",
                self.t_end
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: VoltageScenario =
            toml::from_str(text).map_err(|e| Error::config(format!("scenario file: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn voltage_at(&self, t: f64) -> f64 {
        voltage_at(t, self)
    }
}

pub fn voltage_at(t: f64, sc: &VoltageScenario) -> f64 {
    let dip_end = 1.0 + sc.b / 60.0;
    if (1.0..dip_end).contains(&t) {
        sc.a
    } else if t >= dip_end && t < 1.0 + sc.c {
        -(1.0 - sc.d) / (sc.b / 60.0 - sc.c) * (t - (1.0 + sc.c)) + 1.0
    } else {
        1.0
    }
}

/// Noisy `(P, Q)` observations on a uniform grid, with everything needed to
/// regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub times: Vec<f64>,
    pub p_meas: Vec<f64>,
    pub q_meas: Vec<f64>,
    pub noise_var: f64,
    pub seed: u64,
    pub scenario: VoltageScenario,
    /// Integration step the data were generated with (s).
    pub h: f64,
    pub obs_interval: f64,
    pub mode: SimMode,
    pub truth_params: Option<LoadParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    noise_var: f64,
    seed: u64,
    h: f64,
    obs_interval: f64,
    mode: SimMode,
    points: usize,
    scenario: VoltageScenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<LoadParams>,
}

impl MeasurementSeries {
    pub const CSV_HEADER: &'static str = "t,P_meas,Q_meas";

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Integration steps between consecutive observations.
    pub fn stride(&self) -> Result<usize> {
        obs_stride(self.obs_interval, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::config(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        if self.p_meas.len() != self.times.len() || self.q_meas.len() != self.times.len() {
            return Err(Error::config("measurement columns differ in length"));
        }
        self.scenario.validate()?;
        let stride = self.stride()?;
        let dt = stride as f64 * self.h;
        for (k, &t) in self.times.iter().enumerate() {
            let expected = (k + 1) as f64 * dt;
            if (t - expected).abs() > 1e-9 * expected.max(1.0) {
                return Err(Error::config(format!(
                    "observation {k} at t={t} is off the uniform grid (expected {expected})"
                )));
            }
        }
        Ok(())
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut name = csv_path
            .file_stem()
            .map(|s| s.to_os_string())
            .unwrap_or_default();
        name.push(".meta.toml");
        csv_path.with_file_name(name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 64);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.times[k], self.p_meas[k], self.q_meas[k]
            ));
        }
        out
    }

    fn sidecar(&self) -> String {
        let meta = Sidecar {
            noise_var: self.noise_var,
            seed: self.seed,
            h: self.h,
            obs_interval: self.obs_interval,
            mode: self.mode,
            points: self.len(),
            scenario: self.scenario,
            truth: self.truth_params.clone(),
        };
        toml::to_string(&meta).expect("dataset metadata always serializes")
    }

    /// Writes the CSV and its `.meta.toml` sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let meta_path = Self::sidecar_path(csv_path);
        fs::write(&meta_path, self.sidecar()).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let meta_path = Self::sidecar_path(csv_path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Sidecar =
            toml::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;

        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::format(
                csv_path,
                format!("expected header {}", Self::CSV_HEADER),
            ));
        }
        let (mut times, mut p_meas, mut q_meas) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::format(
                    csv_path,
                    format!("line {}: expected 3 columns", i + 2),
                ));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::format(csv_path, format!("line {}: {e}", i + 2)))
            };
            times.push(parse(cols[0])?);
            p_meas.push(parse(cols[1])?);
            q_meas.push(parse(cols[2])?);
        }
        if times.len() != meta.points {
            return Err(Error::format(
                csv_path,
                format!(
                    "sidecar declares {} points, found {}",
                    meta.points,
                    times.len()
                ),
            ));
        }
        let series = MeasurementSeries {
            times,
            p_meas,
            q_meas,
            noise_var: meta.noise_var,
            seed: meta.seed,
            scenario: meta.scenario,
            h: meta.h,
            obs_interval: meta.obs_interval,
            mode: meta.mode,
            truth_params: meta.truth,
        };
        series.validate()?;
        Ok(series)
    }
}

pub(crate) fn obs_stride(obs_interval: f64, h: f64) -> Result<usize> {
    let ratio = obs_interval / h;
    let stride = ratio.round();
    if !(stride >= 1.0 && (ratio - stride).abs() < 1e-9 * stride) {
        return Err(Error::config(format!(
            "observation interval {obs_interval} is not an integer multiple of h = {h}"
        )));
    }
    Ok(stride as usize)
}

/// Settings for [`synthesize_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub h: f64,
    pub obs_interval: f64,
    pub noise_var: f64,
    pub seed: u64,
    pub mode: SimMode,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            h: 1e-3,
            obs_interval: 1e-2,
            noise_var: 0.01,
            seed: 1,
            mode: SimMode::Deterministic,
        }
    }
}

/// Simulates `truth` under `sc` and records `(P_inj, Q_inj)` every
/// `obs_interval` with i.i.d. Gaussian noise on each channel.
///
/// Process noise uses stream 0 of `seed`, measurement noise stream 1.
pub fn synthesize_dataset(
    truth: &LoadParams,
    sc: &VoltageScenario,
    settings: &SynthesisSettings,
) -> Result<MeasurementSeries> {
    if !(settings.noise_var > 0.0 && settings.noise_var.is_finite()) {
        return Err(Error::config(format!(
            "noise_var must be positive, got {}",
            settings.noise_var
        )));
    }
    let stride = obs_stride(settings.obs_interval, settings.h)?;
    let n_steps = step_count(sc.t_end, settings.h)?;
    let mut process = stream_rng(settings.seed, 0);
    let traj = simulate_trajectory(truth, sc, settings.h, settings.mode, &mut process)?;
    let mut meas = stream_rng(settings.seed, 1);
    let sd = settings.noise_var.sqrt();
    let n_obs = n_steps / stride;
    let (mut times, mut p_meas, mut q_meas) = (
        Vec::with_capacity(n_obs),
        Vec::with_capacity(n_obs),
        Vec::with_capacity(n_obs),
    );
    for k in 1..=n_obs {
        let row = &traj.rows[k * stride];
        times.push(row.t);
        let zp: f64 = meas.sample(StandardNormal);
        let zq: f64 = meas.sample(StandardNormal);
        p_meas.push(row.p_inj + sd * zp);
        q_meas.push(row.q_inj + sd * zq);
    }
    Ok(MeasurementSeries {
        times,
        p_meas,
        q_meas,
        noise_var: settings.noise_var,
        seed: settings.seed,
        scenario: *sc,
        h: settings.h,
        obs_interval: settings.obs_interval,
        mode: settings.mode,
        truth_params: Some(truth.clone()),
    })
}
