//! Sectioned key-value experiment configs (TOML syntax, unknown keys rejected).

use std::path::Path;

use cwgf_core::prompt::{PromptWeighting, DEFAULT_RADIUS};
use cwgf_core::schedule::{PlanMode, StepWeights, TimestepPlan, VpSchedule, DEFAULT_BASE_SET};
use cwgf_core::solver::{InitMode, SolverConfig};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Gaussian,
    GmmInpaint,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingName {
    InverseSnr,
    StepWeight,
    HalfBeta,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Prior,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub iterations: usize,
    pub particles: usize,
    pub eta_r: f64,
    pub scale_prior_step: bool,
    pub eta_l: f64,
    pub eta_c: f64,
    pub sigma_y: f64,
    pub sigma_dec: f64,
    pub lambda: f64,
    pub radius: f64,
    pub plan: String,
    pub base_set: Vec<u32>,
    pub w_floor: f64,
    pub w_slope: f64,
    pub weighting: WeightingName,
    pub weighting_constant: f64,
    pub init: InitName,
}

impl Default for SolverSection {
    fn default() -> Self {
        let w = StepWeights::default();
        SolverSection {
            iterations: 16,
            particles: 8,
            eta_r: 1.0,
            scale_prior_step: false,
            eta_l: 1.0,
            eta_c: 0.1,
            sigma_y: 0.01,
            sigma_dec: 0.1,
            lambda: 1e-4,
            radius: DEFAULT_RADIUS,
            plan: "cyclic".into(),
            base_set: DEFAULT_BASE_SET.to_vec(),
            w_floor: w.w_floor,
            w_slope: w.w_slope,
            weighting: WeightingName::InverseSnr,
            weighting_constant: 1.0,
            init: InitName::Prior,
        }
    }
}

impl SolverSection {
    /// Core solver config with the given seed and tracing flag.
    pub fn to_solver_config(&self, seed: u64, trace: bool) -> Result<SolverConfig, CliError> {
        let mode: PlanMode = self
            .plan
            .parse()
            .map_err(|e| CliError::Config(format!("solver.plan: {e}")))?;
        let weights = StepWeights {
            w_floor: self.w_floor,
            w_slope: self.w_slope,
        };
        let weighting = match self.weighting {
            WeightingName::InverseSnr => PromptWeighting::InverseSnr,
            WeightingName::StepWeight => PromptWeighting::StepWeight(weights),
            WeightingName::HalfBeta => PromptWeighting::HalfBeta,
            WeightingName::Constant => PromptWeighting::Constant(self.weighting_constant),
        };
        let cfg = SolverConfig {
            iterations: self.iterations,
            particles: self.particles,
            eta_r: self.eta_r,
            scale_prior_step: self.scale_prior_step,
            eta_l: self.eta_l,
            eta_c: self.eta_c,
            sigma_y: self.sigma_y,
            plan: TimestepPlan::new(mode, self.base_set.clone(), self.iterations, seed),
            weights,
            schedule: VpSchedule::default(),
            weighting,
            radius: self.radius,
            init: match self.init {
                InitName::Prior => InitMode::Prior,
                InitName::Standard => InitMode::Standard,
            },
            seed,
            trace,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(format!("[solver] {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorName {
    Identity,
    Blur,
    RandomWalk,
    Mask,
    Downsample,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSection {
    pub latent_dim: usize,
    /// Pixel grid `[rows, cols]`.
    pub image: [usize; 2],
    pub prior_eig_min: f64,
    pub prior_eig_max: f64,
    pub decoder_scale: f64,
    pub decoder_offset: f64,
    pub operator: OperatorName,
    pub kernel_width: usize,
    pub walk_steps: usize,
    pub keep_fraction: f64,
    pub factor: usize,
    /// Distance of the initial prompt from the true one.
    pub prompt_offset: f64,
}

impl Default for GaussianSection {
    fn default() -> Self {
        GaussianSection {
            latent_dim: 4,
            image: [8, 8],
            prior_eig_min: 0.5,
            prior_eig_max: 2.0,
            decoder_scale: 0.15,
            decoder_offset: 0.5,
            operator: OperatorName::Blur,
            kernel_width: 3,
            walk_steps: 8,
            keep_fraction: 0.5,
            factor: 2,
            prompt_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmMode {
    Joint,
    Independent,
    Both,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    /// Components sit at `(±offset, 0)`.
    pub offset: f64,
    pub std: f64,
    /// Value of the observed second coordinate; the first is hidden.
    pub observed_value: f64,
    pub mode: GmmMode,
    pub runs: usize,
    pub flow_steps: usize,
}

impl Default for GmmSection {
    fn default() -> Self {
        GmmSection {
            offset: 2.0,
            std: 0.3,
            observed_value: 0.0,
            mode: GmmMode::Both,
            runs: 256,
            flow_steps: cwgf_core::gmm_world::DEFAULT_FLOW_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Experiment swept over.
    pub base: ExperimentKind,
    /// Dotted key such as `solver.plan`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub gaussian: GaussianSection,
    #[serde(default)]
    pub gmm: GmmSection,
    pub ablation: Option<AblationSection>,
}

/// Parsed document kept as a table so sweeps can override single keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    pub table: toml::Table,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        // typed parse of the source text so diagnostics point at lines
        toml::from_str::<ExperimentConfig>(text).map_err(|e| CliError::Config(e.to_string()))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Ok(RawConfig { table })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn typed(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::deserialize(toml::Value::Table(self.table.clone()))
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Copy with `section.key` set to `value`.
    pub fn with_override(&self, key: &str, value: &toml::Value) -> Result<Self, CliError> {
        let (section, field) = key.split_once('.').ok_or_else(|| {
            CliError::Config(format!("override key '{key}' must look like section.key"))
        })?;
        let mut table = self.table.clone();
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let sec = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{section}' is not a section")))?;
        sec.insert(field.to_string(), value.clone());
        let out = RawConfig { table };
        out.typed()
            .map_err(|e| CliError::Config(format!("override {key}={value}: {e}")))?;
        Ok(out)
    }
}

/// Parse one command-line sweep value: a TOML literal, or a bare string otherwise.
pub fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Split `key=v1,v2,...` into the key and its values.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<toml::Value>), CliError> {
    let (key, values) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("sweep '{arg}' must look like key=v1,v2")))?;
    let values: Vec<toml::Value> = values
        .split(',')
        .filter(|v| !v.is_empty())
        .map(|v| parse_value(v.trim()))
        .collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("sweep '{arg}' has no values")));
    }
    Ok((key.trim().to_string(), values))
}

/// Short file-name-safe rendering of a sweep value.
pub fn value_label(v: &toml::Value) -> String {
    let s = match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
