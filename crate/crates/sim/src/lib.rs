//! Scenario simulator for the stride planner: a reduced-model plant driven
//! by a task-space tracker, replanning at every touchdown, with a JSON-lines
//! log, a log audit and a websocket API.

pub mod audit;
pub mod config;
pub mod harness;
pub mod log;
pub mod planner;
pub mod server;
pub mod tracker;

pub use config::ScenarioConfig;
pub use harness::{run_scenario, Simulation};
pub use log::SimulationLog;
