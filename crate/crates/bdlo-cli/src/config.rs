//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use bdlo_sim::constraints::{ConstraintClasses, EnforceOptions, PerClassKappa};
use bdlo_sim::dynamics::StepConfig;
use bdlo_sim::io::{self, BranchParamEntry, MotionScript};
use bdlo_sim::rod::{MaterialParams, ThetaOptions};
use bdlo_sim::BdloTopology;
use nalgebra::Vector3;

/// One run described as a TOML file. Relative paths are resolved against
/// the directory containing the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    /// Topology description file.
    pub topology: PathBuf,
    /// Material parameter file; engine defaults when omitted.
    pub parameters: Option<PathBuf>,
    /// Motion script driving the grasp; required by commands that
    /// simulate or roll out the model.
    pub motion: Option<PathBuf>,
    /// Steps to simulate / evaluate over.
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    /// Seed for synthetic measurement noise.
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of synthetic measurement noise (m).
    #[serde(default)]
    pub noise_sigma: f64,
    /// Vertex spacing of the canonical rest shape (m).
    #[serde(default = "defaults::rest_spacing")]
    pub rest_spacing: f64,
    /// Fraction of steps tagged for training when writing datasets.
    #[serde(default = "defaults::train_split")]
    pub train_split: f64,
    /// Output path for the simulated trajectory.
    pub trajectory_out: Option<PathBuf>,
    /// Output path for the simulated inputs.
    pub inputs_out: Option<PathBuf>,
    #[serde(default)]
    pub step: StepSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct StepSection {
    pub dt: f64,
    pub gravity: [f64; 3],
    pub damping: f64,
    pub use_residual: bool,
    /// Step-size limit on constraint corrections.
    pub kappa: f64,
    /// Junction orientation slack (radians).
    pub epsilon: f64,
    pub max_sweeps: usize,
}

mod defaults {
    pub fn horizon() -> usize {
        100
    }
    pub fn rest_spacing() -> f64 {
        0.1
    }
    pub fn train_split() -> f64 {
        0.75
    }
}

impl Default for StepSection {
    fn default() -> Self {
        let step = StepConfig::default();
        let enforce = EnforceOptions::default();
        StepSection {
            dt: step.dt,
            gravity: [step.gravity.x, step.gravity.y, step.gravity.z],
            damping: step.damping,
            use_residual: false,
            kappa: enforce.kappa.inextensibility,
            epsilon: enforce.epsilon,
            max_sweeps: enforce.max_sweeps,
        }
    }
}

impl StepSection {
    pub fn to_step_config(&self) -> StepConfig {
        StepConfig {
            dt: self.dt,
            gravity: Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2]),
            damping: self.damping,
            use_residual: self.use_residual,
            constraints: EnforceOptions {
                kappa: PerClassKappa::uniform(self.kappa),
                epsilon: self.epsilon,
                max_sweeps: self.max_sweeps,
                enabled: ConstraintClasses::all(),
            },
            theta: ThetaOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if config.horizon == 0 {
            bail!("{}: horizon must be at least 1", path.display());
        }
        if !(0.0..=1.0).contains(&config.train_split) {
            bail!("{}: train-split must lie in [0, 1]", path.display());
        }
        if config.noise_sigma < 0.0 || !config.noise_sigma.is_finite() {
            bail!("{}: noise-sigma must be non-negative and finite", path.display());
        }
        if config.rest_spacing <= 0.0 || !config.rest_spacing.is_finite() {
            bail!("{}: rest-spacing must be positive", path.display());
        }
        let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((config, dir))
    }

    pub fn resolve(&self, dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    }
}

/// Everything a subcommand needs, loaded and validated.
pub struct Workspace {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub topo: BdloTopology,
    pub rest: Vec<Vec<Vector3<f64>>>,
    pub entries: Vec<BranchParamEntry>,
    pub params: MaterialParams,
    pub step: StepConfig,
    pub motion: Option<MotionScript>,
}

impl Workspace {
    pub fn load(config_path: &Path) -> Result<Workspace> {
        let (config, dir) = RunConfig::load(config_path)?;
        let topo = io::load_topology(&config.resolve(&dir, &config.topology))?;
        let rest = io::canonical_rest(&topo, config.rest_spacing);
        let entries = match &config.parameters {
            Some(p) => io::load_params(&config.resolve(&dir, p))?,
            None => topo
                .branches()
                .iter()
                .map(|b| BranchParamEntry::default_for(&b.id))
                .collect(),
        };
        let params = io::material_from_entries(&topo, &rest, &entries)?;
        let motion = match &config.motion {
            Some(p) => Some(MotionScript::load(&config.resolve(&dir, p))?),
            None => None,
        };
        let step = config.step.to_step_config();
        Ok(Workspace {
            config,
            dir,
            topo,
            rest,
            entries,
            params,
            step,
            motion,
        })
    }

    /// The motion script, required by commands that roll the model out.
    pub fn motion(&self) -> Result<&MotionScript> {
        self.motion
            .as_ref()
            .context("this command needs a 'motion' script in the config")
    }
}
