//! Run configuration: one JSON document naming the mesh and target files
//! and carrying every option of every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use modal_tune::fixture;
use modal_tune::optimizer::{BaselineOptions, TrustRegionOptions};
use modal_tune::sensitivity::JacobianOptions;
use modal_tune::{ConstrainedSystem, ModalTarget, Model, ParamSpace, Parameter, WeightSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_SCHEMA: &str = "modal-tune/config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Midpoint,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Relative data noise used for the trust flags.
    pub noise_level: f64,
    /// Evaluate here instead of at the optimum of a fresh update.
    pub at: Option<Vec<f64>>,
    /// Optional data perturbation `db` (length `2q`) to propagate.
    pub perturbation: Option<Vec<f64>>,
    pub fd_step: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            noise_level: 1e-3,
            at: None,
            perturbation: None,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    /// Seeds `0..seeds`, each mixed with the run seed.
    pub seeds: u64,
    pub mode_noise: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            levels: vec![1e-4, 1e-3, 1e-2, 1e-1],
            seeds: 10,
            mode_noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Each method is timed this many times; the fastest run is reported.
    pub repeats: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { repeats: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub mesh: PathBuf,
    #[serde(default)]
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub parameters: Vec<Parameter>,
    #[serde(default = "default_start")]
    pub start: StartMode,
    /// Overrides the weights stored in the target file.
    #[serde(default)]
    pub weights: Option<WeightSpec>,
    #[serde(default)]
    pub optimizer: TrustRegionOptions,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub noise_sweep: SweepConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    /// Pairs computed by `forward`.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_start() -> StartMode {
    StartMode::Midpoint
}

fn default_modes() -> usize {
    5
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Configuration matching the files written by `make-mesh arch`.
    pub fn arch() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            mesh: "mesh.json".into(),
            target: Some("target.json".into()),
            parameters: fixture::arch_parameters(),
            start: StartMode::Midpoint,
            weights: None,
            optimizer: fixture::round_trip_options(),
            baseline: fixture::round_trip_baseline_options(),
            sensitivity: SensitivityConfig::default(),
            noise_sweep: SweepConfig::default(),
            benchmark: BenchmarkConfig::default(),
            modes: fixture::ARCH_MODES,
            seed: 0,
            output_dir: default_output(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(CliError::Validation(format!(
                "config schema {:?} is not supported (expected {CONFIG_SCHEMA:?})",
                cfg.schema
            )));
        }
        cfg.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable config");
        s.push('\n');
        s
    }

    pub fn jacobian_options(&self) -> JacobianOptions {
        JacobianOptions {
            fd_step: self.sensitivity.fd_step,
            pairing: self.optimizer.pairing,
            m_max: self.optimizer.m_max,
            eigen: self.optimizer.eigen(),
        }
    }
}

/// A configuration with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub model: Model,
    pub space: ParamSpace,
    pub system: ConstrainedSystem,
    pub target: Option<ModalTarget>,
    pub output_dir: PathBuf,
}

impl Run {
    pub fn target(&self) -> Result<&ModalTarget, CliError> {
        self.target
            .as_ref()
            .ok_or_else(|| CliError::Validation("this command needs a target file".into()))
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Loads the config at `path`; relative paths inside it are resolved
/// against the config's directory.
pub fn load(path: &Path) -> Result<Run, CliError> {
    let config = RunConfig::from_json(&read(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(config, base)
}

pub fn resolve(config: RunConfig, base: &Path) -> Result<Run, CliError> {
    let model = Model::from_json(&read(&base.join(&config.mesh))?)?;
    let start = match &config.start {
        StartMode::Midpoint => None,
        StartMode::Explicit(x) => Some(x.clone()),
    };
    let space = ParamSpace::new(config.parameters.clone(), start)?;
    let system = ConstrainedSystem::new(&model, &space)?;
    let target = match &config.target {
        Some(t) => {
            let mut target = ModalTarget::from_json(&read(&base.join(t))?, &model)?;
            if let Some(w) = &config.weights {
                let mut file = target.to_file();
                file.weights = w.clone();
                target = file.into_target(&model)?;
            }
            if 2 * target.q() < space.dim() {
                log::warn!(
                    "{} parameters but only {} weighted data; the problem is underdetermined",
                    space.dim(),
                    2 * target.q()
                );
            }
            Some(target)
        }
        None => None,
    };
    Ok(Run {
        output_dir: base.join(&config.output_dir),
        config,
        model,
        space,
        system,
        target,
    })
}
