//! JSON-lines simulation log. Every line is one record typed by `kind`;
//! times are in seconds and all quantities in SI units.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use stride_core::gait::GaitSchedule;
use stride_core::nominal::TaskGoal;
use stride_core::terrain::{ContactPlane, Terrain};

use crate::config::ScenarioConfig;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub t: f64,
    pub base: [f64; 3],
    pub orientation: [f64; 3],
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub feet: [[f64; 3]; 4],
    /// Applied contact forces.
    pub forces: [[f64; 3]; 4],
    /// Vertical contact forces of the tracked plan.
    pub planned_forces_z: [f64; 4],
    pub contact: [bool; 4],
    /// Plan being tracked.
    pub plan: usize,
}

/// Everything needed to rebuild the optimal control problem of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSnapshot {
    pub x0: Vec<f64>,
    pub planes0: [ContactPlane; 4],
    pub schedule: GaitSchedule,
    pub goal: TaskGoal,
    pub terrain: Terrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchdownTarget {
    pub leg: usize,
    pub node: usize,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: f64,
    pub plan: usize,
    /// Whether the plan was handed to the tracker.
    pub issued: bool,
    /// Simulation time at which the tracker switches to this plan.
    pub effective_at: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Last node of the first and second footstep; the base motion up to
    /// `first_step_end` is tracked, the remainder is discarded at the next
    /// touchdown.
    pub first_step_end: usize,
    pub second_step_end: Option<usize>,
    pub touchdowns: Vec<TouchdownTarget>,
    pub problem: ProblemSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanStatus {
    Converged,
    MaxIterations,
    Stalled,
    Failed,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub t: f64,
    /// Plan record produced by this replan, absent when the solver failed.
    pub plan: Option<usize>,
    /// Leg whose touchdown triggered the replan; `None` for the first plan.
    pub leg: Option<usize>,
    pub status: ReplanStatus,
    pub issued: bool,
    pub iterations: usize,
    /// Emulated solve time (s).
    pub latency: f64,
    /// Solution figures; NaN (`null` in JSON) when the solver failed.
    #[serde(deserialize_with = "null_as_nan")]
    pub cost: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub max_equality: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub max_inequality: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub max_defect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub cost: f64,
    pub merit: f64,
    pub step_length: f64,
    pub max_equality: f64,
    pub max_inequality: f64,
    pub max_defect: f64,
    pub ipm_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub plan: usize,
    pub iterations: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Start {
        version: u32,
        seed: u64,
        scenario: Box<ScenarioConfig>,
    },
    Liftoff {
        leg: usize,
        position: [f64; 3],
    },
    Touchdown {
        leg: usize,
        position: [f64; 3],
        /// Terrain plane the foot landed on.
        surface: Option<String>,
    },
    PlanApplied {
        plan: usize,
    },
    Relocate {
        id: String,
        pose: [f64; 3],
    },
    Heading {
        heading: [f64; 2],
    },
    Halt {
        reason: String,
    },
    End {
        steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    State(StateRecord),
    Plan(Box<PlanRecord>),
    Replan(ReplanRecord),
    Event(EventRecord),
    Diagnostics(DiagnosticsRecord),
}

impl LogRecord {
    pub fn time(&self) -> f64 {
        match self {
            LogRecord::State(r) => r.t,
            LogRecord::Plan(r) => r.t,
            LogRecord::Replan(r) => r.t,
            LogRecord::Event(r) => r.t,
            LogRecord::Diagnostics(r) => r.t,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

/// Touchdown as it happened in the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Touchdown {
    pub t: f64,
    pub leg: usize,
    pub position: [f64; 3],
    pub surface: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationLog {
    pub records: Vec<LogRecord>,
}

impl SimulationLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, String> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LogRecord = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn plans(&self) -> impl Iterator<Item = &PlanRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Plan(p) => Some(p.as_ref()),
            _ => None,
        })
    }

    pub fn replans(&self) -> impl Iterator<Item = &ReplanRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Replan(p) => Some(p),
            _ => None,
        })
    }

    pub fn states(&self) -> impl Iterator<Item = &StateRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::State(s) => Some(s),
            _ => None,
        })
    }

    pub fn touchdowns(&self) -> Vec<Touchdown> {
        self.events()
            .filter_map(|e| match &e.event {
                Event::Touchdown { leg, position, surface } => Some(Touchdown {
                    t: e.t,
                    leg: *leg,
                    position: *position,
                    surface: surface.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    /// Scenario and seed recorded at the start of the run.
    pub fn start(&self) -> Option<(&ScenarioConfig, u64)> {
        self.events().find_map(|e| match &e.event {
            Event::Start { scenario, seed, .. } => Some((scenario.as_ref(), *seed)),
            _ => None,
        })
    }

    pub fn halted(&self) -> Option<&str> {
        self.events().find_map(|e| match &e.event {
            Event::Halt { reason } => Some(reason.as_str()),
            _ => None,
        })
    }

    pub fn timestamps_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].time() >= w[0].time())
    }
}
