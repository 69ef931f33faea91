//! Declarative scenario files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stride_core::contact::FrictionModel;
use stride_core::cost::WeightConfig;
use stride_core::gait::{CyclicPattern, GaitPhase, PhaseConfig};
use stride_core::locomotion::{ProblemSettings, DEFAULT_REACH_HEIGHT};
use stride_core::model::RobotParams;
use stride_core::nominal::TaskGoal;
use stride_core::slq::SolverSettings;
use stride_core::swing::DEFAULT_APEX_FLAT;
use stride_core::terrain::Terrain;
use thiserror::Error;

use crate::tracker::TrackerGains;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    /// Base position; the feet start below it in the nominal stance.
    pub base: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitConfig {
    /// Node spacing of the plans (s).
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub swing: f64,
    pub short_stance: f64,
    pub long_stance: f64,
    /// Four-feet stance before the first swing.
    pub initial_stance: f64,
    /// Phases after the leading stance; two per footstep.
    #[serde(default = "default_horizon")]
    pub horizon_phases: usize,
    /// Swing apex above the higher of lift-off and touchdown (m).
    #[serde(default = "default_apex")]
    pub apex: f64,
    /// Overrides the lateral walk with an explicit cyclic pattern.
    #[serde(default)]
    pub pattern: Option<Vec<GaitPhase>>,
}

fn default_dt() -> f64 {
    0.02
}

fn default_horizon() -> usize {
    4
}

fn default_apex() -> f64 {
    DEFAULT_APEX_FLAT
}

impl GaitConfig {
    pub fn pattern(&self) -> Result<CyclicPattern, ConfigError> {
        match &self.pattern {
            Some(phases) => CyclicPattern::new(phases.clone()).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(CyclicPattern::lateral_walk(self.swing, self.short_stance, self.long_stance)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub friction: Option<FrictionModel>,
    /// Lowered base height of the reachability model (m).
    pub reach_height: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            friction: None,
            reach_height: DEFAULT_REACH_HEIGHT,
        }
    }
}

/// Standard deviations of the state-estimate perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub position: f64,
    pub orientation: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position: 0.005,
            orientation: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    Halt,
    /// Keep tracking the previous plan.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Emulated solve time per SLQ iteration (s).
    pub latency_per_iteration: f64,
    /// Use the measured solve time instead; runs are then not reproducible.
    pub wall_clock_latency: bool,
    pub on_failure: FailurePolicy,
    /// Record per-iteration wall times in the log.
    pub record_timings: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            latency_per_iteration: 0.0183,
            wall_clock_latency: false,
            on_failure: FailurePolicy::Halt,
            record_timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventAction {
    Relocate { id: String, pose: [f64; 3] },
    Heading { heading: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub time: f64,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Simulated time limit (s).
    pub duration: f64,
    /// Stop after this many touchdowns.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default)]
    pub robot: RobotParams,
    pub start: StartConfig,
    pub terrain: Terrain,
    pub gait: GaitConfig,
    pub goal: TaskGoal,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub tracker: TrackerGains,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub events: Vec<ScriptedEvent>,
}

fn default_control_dt() -> f64 {
    0.0025
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn problem_settings(&self) -> ProblemSettings {
        ProblemSettings {
            weights: self.weights.expand(),
            friction: self.problem.friction,
            reach_height: (self.problem.reach_height > 0.0).then_some(self.problem.reach_height),
        }
    }

    pub fn friction(&self) -> FrictionModel {
        self.problem
            .friction
            .unwrap_or_else(|| FrictionModel::for_mass(self.robot.mass, self.robot.gravity_vector().norm()))
    }

    /// Control ticks per plan node.
    pub fn ticks_per_node(&self) -> usize {
        (self.gait.dt / self.control_dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.version != SCENARIO_VERSION {
            return invalid(format!("unsupported scenario version {} (expected {SCENARIO_VERSION})", self.version));
        }
        if !(self.duration > 0.0) {
            return invalid("duration must be positive".into());
        }
        if self.steps == Some(0) {
            return invalid("steps must be positive".into());
        }
        if !(self.control_dt > 0.0) || !(self.gait.dt > 0.0) {
            return invalid("time steps must be positive".into());
        }
        let ratio = self.gait.dt / self.control_dt;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return invalid("plan spacing must be a whole multiple of the control step".into());
        }
        for d in [self.gait.swing, self.gait.short_stance, self.gait.long_stance, self.gait.initial_stance] {
            if !(d > 0.0) {
                return invalid("gait durations must be positive".into());
            }
        }
        if self.gait.horizon_phases < 2 {
            return invalid("the horizon needs at least one footstep".into());
        }
        if !(self.gait.apex >= 0.0) {
            return invalid("swing apex must be non-negative".into());
        }
        let pattern = self.gait.pattern()?;
        if !pattern.phases.iter().any(|p| p.config != PhaseConfig::F) {
            return invalid("gait pattern has no swing phase".into());
        }
        self.robot.validate().map_err(ConfigError::Invalid)?;
        self.terrain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.goal.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights
            .expand()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.friction()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tracker.validate().map_err(ConfigError::Invalid)?;
        if !(self.noise.position >= 0.0 && self.noise.orientation >= 0.0) {
            return invalid("noise levels must be non-negative".into());
        }
        if !(self.planner.latency_per_iteration >= 0.0) {
            return invalid("planner latency must be non-negative".into());
        }
        for e in &self.events {
            if !(e.time >= 0.0) {
                return invalid("event times must be non-negative".into());
            }
            match &e.action {
                EventAction::Relocate { id, .. } => {
                    let known = self.terrain.planes.iter().any(|p| &p.id == id)
                        || self.terrain.gaps.iter().any(|g| &g.id == id)
                        || self.terrain.spheres.iter().any(|s| &s.id == id);
                    if !known {
                        return invalid(format!("event refers to unknown terrain object `{id}`"));
                    }
                }
                EventAction::Heading { heading } => {
                    if !(heading[0].hypot(heading[1]) > 1e-9) {
                        return invalid("heading must be non-zero".into());
                    }
                }
            }
        }
        Ok(())
    }
}
