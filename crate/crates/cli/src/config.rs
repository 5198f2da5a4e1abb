//! Experiment configuration: one TOML file per experiment, with command
//! line overrides applied on top.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stochload::likelihood::{Estimator, EstimatorKind};
use stochload::model::{LoadParams, ParamName, SimMode};
use stochload::sampler::{InitSpec, PriorBox, SamplerConfig, SamplerKind};
use stochload::scenario::{SynthesisSettings, VoltageScenario};
use stochload::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Integration step (s).
    pub h: f64,
    /// Time between observations (s).
    pub obs_interval: f64,
    pub noise_var: f64,
    /// Whether the synthetic truth carries process noise.
    pub mode: SimMode,
    /// Seed of the synthetic noise; the global seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Existing measurement CSV to use instead of synthesizing one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthesisSettings::default();
        DataConfig {
            h: s.h,
            obs_interval: s.obs_interval,
            noise_var: s.noise_var,
            mode: s.mode,
            seed: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Monte Carlo trajectory count.
    pub trajectories: usize,
    /// Particle count.
    pub particles: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::Deterministic,
            trajectories: 200,
            particles: 200,
        }
    }
}

impl EstimatorConfig {
    pub fn estimator(&self) -> Estimator {
        match self.kind {
            EstimatorKind::Deterministic => Estimator::Deterministic,
            EstimatorKind::Mc => Estimator::MonteCarlo {
                trajectories: self.trajectories,
            },
            EstimatorKind::Pf => Estimator::ParticleFilter {
                particles: self.particles,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let b = PriorBox::case_study();
        PriorConfig {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub walkers: usize,
    pub steps: usize,
    pub stretch: f64,
    pub burn_in_fraction: f64,
    /// Explicit starting point; the prior-box center when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_center: Option<Vec<f64>>,
    /// Half-width of the uniform start jitter, in prior-box widths.
    pub init_jitter: f64,
    pub init_attempts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal_scale: Option<Vec<f64>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let c = SamplerConfig::default();
        SamplerSection {
            kind: c.kind,
            walkers: c.walkers,
            steps: c.steps,
            stretch: c.stretch,
            burn_in_fraction: c.burn_in_fraction,
            init_center: None,
            init_jitter: c.init.jitter,
            init_attempts: c.init.max_attempts,
            proposal_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub param: ParamName,
    /// Grid bounds; the prior bounds of `param` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub points: usize,
    /// Dip depths to repeat the scan over; the scenario's own when empty.
    pub dips: Vec<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            param: ParamName::V1off,
            lower: None,
            upper: None,
            points: 41,
            dips: vec![0.6, 0.7, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    pub counts: Vec<usize>,
    pub replications: usize,
    /// Evaluation point; the model's own values when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        VarianceConfig {
            counts: vec![10, 50, 250],
            replications: 30,
            theta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
    pub level: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bins: stochload::analysis::DEFAULT_BINS,
            level: stochload::analysis::DEFAULT_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Truth for synthetic data and the values of non-inferred parameters.
    pub model: LoadParams,
    pub scenario: VoltageScenario,
    pub data: DataConfig,
    pub estimator: EstimatorConfig,
    pub prior: PriorConfig,
    pub sampler: SamplerSection,
    pub scan: ScanConfig,
    pub variance: VarianceConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("out"),
            jobs: 1,
            model: LoadParams::default(),
            scenario: VoltageScenario::default(),
            data: DataConfig::default(),
            estimator: EstimatorConfig::default(),
            prior: PriorConfig::default(),
            sampler: SamplerSection::default(),
            scan: ScanConfig::default(),
            variance: VarianceConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Values given on the command line, each replacing one config key.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub scenario_file: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub estimator: Option<EstimatorKind>,
    pub particles: Option<usize>,
    pub trajectories: Option<usize>,
    pub walkers: Option<usize>,
    pub steps: Option<usize>,
    pub scan_param: Option<ParamName>,
    pub dips: Option<Vec<f64>>,
    pub points: Option<usize>,
}

fn bad(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

/// Keys accepted in the `[model]` table. The flattened parameter structs
/// cannot reject unknown keys themselves.
fn model_keys() -> BTreeSet<String> {
    let text = LoadParams::default().to_toml();
    let table: toml::Table = toml::from_str(&text).expect("serialized parameters parse");
    let mut keys: BTreeSet<String> = table.keys().cloned().collect();
    keys.insert("negative_stator_coupling".into());
    keys.insert("theta_mask".into());
    keys
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| bad("config", e.message()))?;
        if let Some(model) = raw.get("model").and_then(|m| m.as_table()) {
            let known = model_keys();
            if let Some(k) = model.keys().find(|k| !known.contains(*k)) {
                return Err(bad(&format!("model.{k}"), "unknown key"));
            }
        }
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(|| "config".to_string(), |s| locate(text, s.start));
            bad(&field, e.message())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(path) = &o.scenario_file {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            self.scenario = VoltageScenario::from_toml(&text)
                .map_err(|e| bad(&format!("scenario file {}", path.display()), e))?;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.data_path {
            self.data.path = Some(v.clone());
        }
        if let Some(v) = o.estimator {
            self.estimator.kind = v;
        }
        if let Some(v) = o.particles {
            self.estimator.particles = v;
        }
        if let Some(v) = o.trajectories {
            self.estimator.trajectories = v;
        }
        if let Some(v) = o.walkers {
            self.sampler.walkers = v;
        }
        if let Some(v) = o.steps {
            self.sampler.steps = v;
        }
        if let Some(v) = o.scan_param {
            self.scan.param = v;
        }
        if let Some(v) = &o.dips {
            self.scan.dips = v.clone();
        }
        if let Some(v) = o.points {
            self.scan.points = v;
        }
        Ok(())
    }

    /// Checks every section, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| bad("model", e))?;
        self.scenario.validate().map_err(|e| bad("scenario", e))?;
        let d = &self.data;
        if !(d.h > 0.0 && d.h.is_finite()) {
            return Err(bad("data.h", format!("must be positive, got {}", d.h)));
        }
        if d.h >= self.model.tripping.t_d {
            return Err(bad(
                "data.h",
                format!("must be below t_d = {}", self.model.tripping.t_d),
            ));
        }
        if !(d.obs_interval >= d.h) {
            return Err(bad("data.obs_interval", "must be at least data.h"));
        }
        let ratio = d.obs_interval / d.h;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(bad(
                "data.obs_interval",
                "must be an integer multiple of data.h",
            ));
        }
        if !(d.noise_var > 0.0 && d.noise_var.is_finite()) {
            return Err(bad(
                "data.noise_var",
                format!("must be positive, got {}", d.noise_var),
            ));
        }
        if let Some(p) = &d.path {
            if !p.is_file() {
                return Err(bad("data.path", format!("{} does not exist", p.display())));
            }
        }
        let e = &self.estimator;
        if e.trajectories < 1 {
            return Err(bad("estimator.trajectories", "must be at least 1"));
        }
        if e.particles < 1 {
            return Err(bad("estimator.particles", "must be at least 1"));
        }
        let dim = self.model.theta_mask.len();
        let prior = self.prior_box()?;
        if prior.dim() != dim {
            return Err(bad(
                "prior",
                format!("{} bounds for {dim} inferred parameters", prior.dim()),
            ));
        }
        let s = &self.sampler;
        if s.walkers == 0 {
            return Err(bad("sampler.walkers", "must be positive"));
        }
        if s.kind == SamplerKind::Ensemble && s.walkers < 2 * dim {
            return Err(bad(
                "sampler.walkers",
                format!("need at least {} for {dim} parameters", 2 * dim),
            ));
        }
        if !(s.stretch > 1.0) {
            return Err(bad("sampler.stretch", "must exceed 1"));
        }
        if !(0.0..1.0).contains(&s.burn_in_fraction) {
            return Err(bad("sampler.burn_in_fraction", "must lie in [0, 1)"));
        }
        if !(s.init_jitter >= 0.0) {
            return Err(bad("sampler.init_jitter", "must be nonnegative"));
        }
        if let Some(c) = &s.init_center {
            if !prior.contains(c) {
                return Err(bad("sampler.init_center", "must lie inside the prior box"));
            }
        }
        if let Some(p) = &s.proposal_scale {
            if p.len() != dim || p.iter().any(|x| !(*x > 0.0)) {
                return Err(bad(
                    "sampler.proposal_scale",
                    format!("need {dim} positive entries"),
                ));
            }
        }
        let (lo, hi) = self.scan_bounds()?;
        if !(lo < hi) {
            return Err(bad("scan", format!("lower {lo} must be below upper {hi}")));
        }
        if let Some(i) = self.model.theta_mask.position(self.scan.param) {
            if lo < prior.lower[i] || hi > prior.upper[i] {
                return Err(bad(
                    "scan",
                    format!(
                        "grid [{lo}, {hi}] leaves the prior bounds [{}, {}] of {}",
                        prior.lower[i], prior.upper[i], self.scan.param
                    ),
                ));
            }
        }
        if self.scan.points < 2 {
            return Err(bad("scan.points", "need at least 2"));
        }
        for (i, &a) in self.scan.dips.iter().enumerate() {
            VoltageScenario { a, ..self.scenario }
                .validate()
                .map_err(|e| bad(&format!("scan.dips[{i}]"), e))?;
        }
        if self.variance.counts.is_empty() || self.variance.counts.contains(&0) {
            return Err(bad("variance.counts", "need positive sample counts"));
        }
        if self.variance.replications < 20 {
            return Err(bad("variance.replications", "must be at least 20"));
        }
        if let Some(t) = &self.variance.theta {
            if t.len() != dim {
                return Err(bad("variance.theta", format!("need {dim} entries")));
            }
            self.model
                .with_theta(t)
                .map_err(|e| bad("variance.theta", e))?;
        }
        if self.analysis.bins == 0 {
            return Err(bad("analysis.bins", "must be positive"));
        }
        if !(self.analysis.level > 0.0 && self.analysis.level < 1.0) {
            return Err(bad("analysis.level", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn prior_box(&self) -> Result<PriorBox> {
        PriorBox::new(self.prior.lower.clone(), self.prior.upper.clone())
            .map_err(|e| bad("prior", e))
    }

    pub fn scan_bounds(&self) -> Result<(f64, f64)> {
        let prior_bound = |upper: bool| {
            self.model.theta_mask.position(self.scan.param).map(|i| {
                if upper {
                    self.prior.upper[i]
                } else {
                    self.prior.lower[i]
                }
            })
        };
        let lo = self.scan.lower.or_else(|| prior_bound(false));
        let hi = self.scan.upper.or_else(|| prior_bound(true));
        match (lo, hi) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(bad(
                "scan",
                format!(
                    "{} is not inferred, so scan.lower and scan.upper are required",
                    self.scan.param
                ),
            )),
        }
    }

    pub fn synthesis(&self) -> SynthesisSettings {
        SynthesisSettings {
            h: self.data.h,
            obs_interval: self.data.obs_interval,
            noise_var: self.data.noise_var,
            seed: self.data.seed.unwrap_or(self.seed),
            mode: self.data.mode,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            kind: s.kind,
            walkers: s.walkers,
            steps: s.steps,
            stretch: s.stretch,
            proposal_scale: s.proposal_scale.clone(),
            init: InitSpec {
                center: s.init_center.clone(),
                jitter: s.init_jitter,
                max_attempts: s.init_attempts,
            },
            seed,
            burn_in_fraction: s.burn_in_fraction,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.model
            .theta_mask
            .names()
            .iter()
            .map(|n| n.to_string())
            .collect()
    }
}

/// Dotted key path of the TOML entry containing byte `offset`.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let section = before
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            l.strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .map(str::to_string)
        })
        .last();
    let line = text[before.rfind('\n').map_or(0, |i| i + 1)..]
        .lines()
        .next()
        .unwrap_or("");
    let key = line
        .split('=')
        .next()
        .map(str::trim)
        .filter(|k| !k.is_empty() && !k.starts_with('['));
    match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (Some(s), None) => s,
        (None, Some(k)) => k.to_string(),
        (None, None) => "config".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.tripping.sigma_w = 0.1;
        cfg.data.seed = Some(7);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_model_section_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_toml("[model]\nH = 1.0\nsigma_w = 0.1\n").unwrap();
        assert_eq!(cfg.model.motor.inertia, 1.0);
        assert_eq!(cfg.model.tripping.sigma_w, 0.1);
        assert_eq!(cfg.model.motor.x_m, 3.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml("[model]\nv1off = 0.8\n").unwrap_err();
        assert!(err.to_string().contains("model.v1off"), "{err}");
        let err = ExperimentConfig::from_toml("[sampler]\nwalker = 3\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("sampler"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let cases = [
            ("[model]\nv_1off = 0.1\n", "model"),
            ("[scenario]\na = 1.5\n", "scenario"),
            ("[data]\nh = 0.2\n", "data.h"),
            ("[prior]\nlower = [0.5]\nupper = [0.9]\n", "prior"),
            ("[scan]\nlower = 0.3\n", "scan"),
            ("[variance]\nreplications = 5\n", "variance.replications"),
            ("[sampler]\nwalkers = 4\n", "sampler.walkers"),
            ("[data]\npath = \"/nonexistent/data.csv\"\n", "data.path"),
        ];
        for (text, field) in cases {
            let cfg = ExperimentConfig::from_toml(text).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(err.is_config());
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_replace_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            estimator: Some(EstimatorKind::Pf),
            particles: Some(50),
            walkers: Some(10),
            steps: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(
            cfg.estimator.estimator(),
            Estimator::ParticleFilter { particles: 50 }
        );
        assert_eq!((cfg.sampler.walkers, cfg.sampler.steps), (10, 3));
    }

    #[test]
    fn missing_scenario_file_is_an_error() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg
            .apply(&Overrides {
                scenario_file: Some(PathBuf::from("/nonexistent/scenario.toml")),
                ..Default::default()
            })
            .unwrap_err();
        assert!(err.is_config());
    }
}
