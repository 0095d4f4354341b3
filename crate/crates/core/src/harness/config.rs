//! Experiment configuration: a sectioned TOML file with defaults for every
//! key. The resolved configuration is echoed into each output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub kl: KlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Pendulum(PendulumConfig),
    Epidemic(EpidemicConfig),
    Ou(OuConfig),
    IntegratedOu(IntegratedOuConfig),
    CondGauss(CondGaussConfig),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Pendulum(_) => "pendulum",
            ModelConfig::Epidemic(_) => "epidemic",
            ModelConfig::Ou(_) => "ou",
            ModelConfig::IntegratedOu(_) => "integrated_ou",
            ModelConfig::CondGauss(_) => "cond_gauss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub a: f64,
    pub q: f64,
    pub m0: Vec<f64>,
    pub p0: Vec<f64>,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            q: 0.01,
            m0: vec![1.5, 0.0],
            p0: vec![0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpidemicConfig {
    pub g: f64,
    pub q: f64,
    pub y0_alpha: f64,
    pub y0_beta: f64,
    pub lambda_mean: f64,
    pub lambda_var: f64,
}

impl Default for EpidemicConfig {
    fn default() -> Self {
        Self {
            g: 1.0,
            q: 0.001,
            y0_alpha: 1.0,
            y0_beta: 100.0,
            lambda_mean: 5.0_f64.ln(),
            lambda_var: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuConfig {
    pub lambda: f64,
    pub q: f64,
    pub m0: f64,
    pub p0: f64,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            q: 0.5,
            m0: 0.0,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratedOuConfig {
    pub q: f64,
    pub m0: Vec<f64>,
    pub p0: Vec<f64>,
}

impl Default for IntegratedOuConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            m0: vec![0.0, 0.0],
            p0: vec![1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondGaussConfig {
    pub q_eta: f64,
    pub q_beta: f64,
    pub p0: f64,
}

impl Default for CondGaussConfig {
    fn default() -> Self {
        Self {
            q_eta: 0.2,
            q_beta: 1.0,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_meas: usize,
    /// Measurement interval; the epidemic is always measured weekly.
    pub dt: f64,
    pub substeps: usize,
    /// Measurement noise variance of the Gaussian models.
    pub sigma2: f64,
    /// Initial state; drawn from the model's initial distribution when empty.
    pub x0: Vec<f64>,
    pub n_true: f64,
    pub sigma_true: f64,
    pub constant_contact: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_meas: 100,
            dt: 0.1,
            substeps: 100,
            sigma2: 0.25,
            x0: Vec::new(),
            n_true: 1e5,
            sigma_true: 1.6,
            constant_contact: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Auto,
    CdSir,
    CdSirSingular,
    CdrbGauss,
    CdrbParam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Auto,
    Prior,
    Ekf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub kind: FilterKind,
    pub proposal: ProposalKind,
    pub particles: usize,
    pub n_steps: usize,
    pub ess_threshold: f64,
    pub max_condition: f64,
    /// Measurement file; `<out_dir>/measurements.csv` when empty.
    pub measurements: String,
    /// Known measurement variance for filters without a variance parameter.
    pub sigma2: f64,
    pub prior_nu: f64,
    pub prior_s2: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub quantiles: bool,
    pub dump_steps: Vec<usize>,
    pub forecast_horizon: usize,
    pub forecast_sims: usize,
    pub forecast_substeps: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            kind: FilterKind::Auto,
            proposal: ProposalKind::Auto,
            particles: 1000,
            n_steps: 10,
            ess_threshold: 0.5,
            max_condition: 1e12,
            measurements: String::new(),
            sigma2: 0.25,
            prior_nu: 2.0,
            prior_s2: 0.2,
            prior_alpha: 10.0,
            prior_beta: 0.001,
            quantiles: true,
            dump_steps: Vec::new(),
            forecast_horizon: 0,
            forecast_sims: 1000,
            forecast_substeps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlKind {
    Constant,
    Ou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    pub kind: KlKind,
    pub a: f64,
    pub b: f64,
    pub sigma2: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub paths: usize,
    pub x0: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            kind: KlKind::Constant,
            a: 1.0,
            b: 0.0,
            sigma2: 1.0,
            horizon: 2.0,
            n_steps: 100,
            paths: 1000,
            x0: 1.0,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub out: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn check_positive(field: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{field} must be positive and finite, got {v}")))
    }
}

fn check_len(field: &str, v: &[f64], n: usize) -> Result<(), HarnessError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(bad(format!("{field} must have {n} entries, got {}", v.len())))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Apply overrides, fill model-dependent defaults and validate.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, HarnessError> {
        if let Some(seed) = overrides.seed {
            self.run.seed = seed;
        }
        if let Some(n) = overrides.particles {
            self.filter.particles = n;
        }
        if let Some(out) = &overrides.out {
            self.run.out_dir = out.to_string_lossy().into_owned();
        }
        let f = &mut self.filter;
        if f.kind == FilterKind::Auto {
            f.kind = match self.model {
                ModelConfig::Pendulum(_) | ModelConfig::Epidemic(_) => FilterKind::CdrbParam,
                ModelConfig::Ou(_) => FilterKind::CdSir,
                ModelConfig::IntegratedOu(_) => FilterKind::CdSirSingular,
                ModelConfig::CondGauss(_) => FilterKind::CdrbGauss,
            };
        }
        if f.proposal == ProposalKind::Auto {
            f.proposal = match self.model {
                ModelConfig::Pendulum(_) | ModelConfig::Epidemic(_) => ProposalKind::Ekf,
                _ => ProposalKind::Prior,
            };
        }
        if f.measurements.is_empty() {
            f.measurements = Path::new(&self.run.out_dir)
                .join("measurements.csv")
                .to_string_lossy()
                .into_owned();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match &self.model {
            ModelConfig::Pendulum(p) => {
                check_positive("model.a", p.a)?;
                check_positive("model.q", p.q)?;
                check_len("model.m0", &p.m0, 2)?;
                check_len("model.p0", &p.p0, 2)?;
            }
            ModelConfig::Epidemic(e) => {
                check_positive("model.g", e.g)?;
                check_positive("model.q", e.q)?;
                check_positive("model.y0_alpha", e.y0_alpha)?;
                check_positive("model.y0_beta", e.y0_beta)?;
                if !(e.lambda_var >= 0.0) {
                    return Err(bad("model.lambda_var must be nonnegative"));
                }
            }
            ModelConfig::Ou(o) => {
                check_positive("model.q", o.q)?;
                if !(o.p0 >= 0.0) {
                    return Err(bad("model.p0 must be nonnegative"));
                }
            }
            ModelConfig::IntegratedOu(o) => {
                check_positive("model.q", o.q)?;
                check_len("model.m0", &o.m0, 2)?;
                check_len("model.p0", &o.p0, 2)?;
            }
            ModelConfig::CondGauss(c) => {
                check_positive("model.q_eta", c.q_eta)?;
                check_positive("model.q_beta", c.q_beta)?;
                check_positive("model.p0", c.p0)?;
            }
        }
        let s = &self.simulate;
        if s.substeps == 0 {
            return Err(bad("simulate.substeps must be at least 1"));
        }
        check_positive("simulate.dt", s.dt)?;
        check_positive("simulate.sigma2", s.sigma2)?;
        check_positive("simulate.n_true", s.n_true)?;
        check_positive("simulate.sigma_true", s.sigma_true)?;

        let f = &self.filter;
        if f.particles == 0 {
            return Err(bad("filter.particles must be at least 1"));
        }
        if f.n_steps == 0 {
            return Err(bad("filter.n_steps must be at least 1"));
        }
        if !(f.ess_threshold > 0.0 && f.ess_threshold <= 1.0) {
            return Err(bad(format!("filter.ess_threshold must lie in (0, 1], got {}", f.ess_threshold)));
        }
        if !(f.max_condition > 1.0) {
            return Err(bad("filter.max_condition must exceed 1"));
        }
        check_positive("filter.sigma2", f.sigma2)?;
        check_positive("filter.prior_nu", f.prior_nu)?;
        check_positive("filter.prior_s2", f.prior_s2)?;
        check_positive("filter.prior_alpha", f.prior_alpha)?;
        check_positive("filter.prior_beta", f.prior_beta)?;
        if f.forecast_sims == 0 || f.forecast_substeps == 0 {
            return Err(bad("filter.forecast_sims and filter.forecast_substeps must be at least 1"));
        }
        let compatible = matches!(
            (&self.model, f.kind),
            (ModelConfig::Pendulum(_), FilterKind::CdrbParam | FilterKind::CdSirSingular)
                | (ModelConfig::Epidemic(_), FilterKind::CdrbParam)
                | (ModelConfig::Ou(_), FilterKind::CdSir)
                | (ModelConfig::IntegratedOu(_), FilterKind::CdSirSingular)
                | (ModelConfig::CondGauss(_), FilterKind::CdrbGauss | FilterKind::CdSir)
        );
        if !compatible {
            return Err(bad(format!(
                "filter.kind {:?} is not available for model.kind {}",
                f.kind,
                self.model.name()
            )));
        }
        if f.proposal == ProposalKind::Ekf && !matches!(self.model, ModelConfig::Pendulum(_) | ModelConfig::Epidemic(_)) {
            return Err(bad("filter.proposal = \"ekf\" is available for the pendulum and epidemic models"));
        }

        let k = &self.kl;
        check_positive("kl.sigma2", k.sigma2)?;
        check_positive("kl.horizon", k.horizon)?;
        if k.n_steps == 0 || k.paths == 0 {
            return Err(bad("kl.n_steps and kl.paths must be at least 1"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out_dir)
    }

    /// The resolved configuration as `#`-prefixed lines.
    pub fn header(&self) -> String {
        let text = toml::to_string(self).unwrap_or_else(|e| format!("unserializable configuration: {e}"));
        let mut out = String::from("# cdpf resolved configuration\n");
        for line in text.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml("[model]\nkind = \"pendulum\"\n")
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap();
        assert_eq!(cfg.filter.kind, FilterKind::CdrbParam);
        assert_eq!(cfg.filter.proposal, ProposalKind::Ekf);
        assert_eq!(cfg.filter.particles, 1000);
        assert!(cfg.header().contains("# a = 1.0"));
        assert!(cfg.header().lines().all(|l| l.starts_with('#')));
    }

    #[test]
    fn header_round_trips() {
        let cfg = ExperimentConfig::from_toml("[model]\nkind = \"epidemic\"\n[run]\nseed = 7\n")
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap();
        let text: String = cfg.header().lines().skip(1).map(|l| format!("{}\n", &l[2..])).collect();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            seed: Some(9),
            particles: Some(12),
            out: Some(PathBuf::from("/tmp/x")),
        };
        let cfg = ExperimentConfig::from_toml("[model]\nkind = \"ou\"\n").unwrap().resolve(&o).unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.filter.particles, 12);
        assert_eq!(cfg.filter.measurements, "/tmp/x/measurements.csv");
    }

    #[test]
    fn field_level_errors() {
        let e = ExperimentConfig::from_toml("[model]\nkind = \"pendulum\"\nq = -1.0\n")
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap_err();
        assert!(e.to_string().contains("model.q"));
        let e = ExperimentConfig::from_toml("[model]\nkind = \"pendulum\"\nqq = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("qq"));
        let e = ExperimentConfig::from_toml("[model]\nkind = \"ou\"\n[filter]\nkind = \"cdrb_param\"\n")
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap_err();
        assert!(e.to_string().contains("filter.kind"));
        assert_eq!(e.exit_code(), 2);
    }
}
