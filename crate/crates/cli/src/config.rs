//! Experiment configuration files.

use std::path::{Path, PathBuf};

use bodycal::biomech::{BodyModel, ResolvedModel, WorldConfig};
use bodycal::sim::SensorNoise;
use bodycal::solver::TermMask;
use bodycal::window::EstimatorConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Simulate,
    CalibrateFromFile,
    Sweep,
    Ablation,
}

/// Synthetic study data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub num_steps: usize,
    /// Clip bound of the hinge DoF, degrees.
    pub hinge_max_deg: f64,
    /// Additive sensor noise; `None` for noiseless signals.
    pub sensor_noise: Option<SensorNoise>,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { num_steps: 629, hinge_max_deg: 162.0, sensor_noise: None, seed: 0 }
    }
}

/// `(β, γ)` offset applied to one IMU of the target calibration, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub imu: usize,
    pub beta_deg: f64,
    pub gamma_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    /// IMU stream; simulated from `simulation` when absent.
    pub imu_csv: Option<PathBuf>,
    /// Calibration JSON used as the starting point.
    pub initial_calibration: Option<PathBuf>,
    /// Applied to the target calibration when no file is given.
    pub offset: Option<Offset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// IMUs that receive the offsets, one full grid each.
    pub imus: Vec<usize>,
    /// Offset values used for both β and γ, degrees.
    pub values_deg: Vec<f64>,
    /// Mean angular error separating correct from incorrect runs, degrees.
    pub error_threshold_deg: f64,
    /// Per target IMU: for runs without detection, errors are averaged over
    /// the steps after this one.
    pub undetected_error_from: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            imus: vec![0, 1],
            values_deg: vec![-50.0, -25.0, 0.0, 25.0, 50.0],
            error_threshold_deg: 10.0,
            undetected_error_from: vec![308, 353],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub offset: Offset,
    pub masks: Vec<TermMask>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mask = |hinge, velocity, shape| TermMask { connected: true, hinge, velocity, shape };
        Self {
            offset: Offset { imu: 1, beta_deg: -45.0, gamma_deg: 45.0 },
            masks: vec![mask(false, false, false), mask(true, false, false), mask(true, true, false), mask(true, true, true)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Body model JSON; the built-in two-segment model when absent.
    pub body_model: Option<PathBuf>,
    /// Replaces the body model's world settings.
    pub world: Option<WorldConfig>,
    pub estimator: EstimatorConfig,
    pub scenario: Scenario,
    pub simulation: SimulationConfig,
    pub calibrate: CalibrateConfig,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Json { path: path.into(), source: e })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        rebase(&mut cfg.body_model);
        rebase(&mut cfg.calibrate.imu_csv);
        rebase(&mut cfg.calibrate.initial_calibration);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let files = [&self.body_model, &self.calibrate.imu_csv, &self.calibrate.initial_calibration];
        for p in files.into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if self.scenario == Scenario::Sweep && (self.sweep.imus.is_empty() || self.sweep.values_deg.is_empty()) {
            return Err(CliError::Config("sweep grid is empty".into()));
        }
        if self.scenario == Scenario::Ablation && self.ablation.masks.is_empty() {
            return Err(CliError::Config("no ablation masks listed".into()));
        }
        if self.simulation.num_steps < 2 {
            return Err(CliError::Config("simulation needs at least 2 steps".into()));
        }
        self.estimator.window.validate()?;
        self.estimator.solver.validate().map_err(bodycal::window::WindowError::from)?;
        Ok(())
    }

    pub fn model(&self) -> Result<ResolvedModel, CliError> {
        let mut body = match &self.body_model {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str::<BodyModel>(&text).map_err(|e| CliError::Json { path: p.clone(), source: e })?
            }
            None => BodyModel::two_segment_study(),
        };
        if let Some(w) = &self.world {
            body.world = w.clone();
        }
        Ok(ResolvedModel::new(body)?)
    }
}
