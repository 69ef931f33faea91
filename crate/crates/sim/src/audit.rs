//! Log audit: re-evaluates every logged plan against the problem it was
//! solved for, checks touchdowns against the terrain, and replays runs.

use nalgebra::{DVector, Vector3};
use stride_core::model::RigidBodyModel;
use stride_core::slq::{evaluate, Iterate};

use crate::config::{EventAction, ScenarioConfig, ScriptedEvent};
use crate::harness::{run_scenario, SimError};
use crate::log::*;
use crate::planner::{PlanRequest, PlannerSetup};

/// Tolerance on touchdown heights against the plane they landed on (m).
pub const TOUCHDOWN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanAudit {
    pub plan: usize,
    pub issued: bool,
    pub max_equality: f64,
    pub max_inequality: f64,
    pub max_defect: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub plans: Vec<PlanAudit>,
    pub failed_replans: usize,
    pub touchdowns: usize,
    /// Smallest distance of a touchdown to a sphere surface (negative
    /// inside); `None` without spheres.
    pub sphere_clearance: Option<f64>,
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn issued(&self) -> impl Iterator<Item = &PlanAudit> {
        self.plans.iter().filter(|p| p.issued)
    }

    /// Every issued plan is feasible, no replan failed and the log is
    /// consistent.
    pub fn passed(&self) -> bool {
        self.problems.is_empty() && self.failed_replans == 0 && self.issued().all(|p| p.feasible)
    }

    pub fn summary(&self) -> String {
        let issued = self.issued().count();
        let feasible = self.issued().filter(|p| p.feasible).count();
        let worst = |f: fn(&PlanAudit) -> f64| self.issued().map(f).fold(0.0, f64::max);
        format!(
            "{feasible}/{issued} issued plans feasible (eq {:.1e}, ineq {:.1e}, defect {:.1e}); {} failed replans; {} touchdowns; {} problems",
            worst(|p| p.max_equality),
            worst(|p| p.max_inequality),
            worst(|p| p.max_defect),
            self.failed_replans,
            self.touchdowns,
            self.problems.len()
        )
    }
}

/// Checks a log against the scenario recorded in its start event.
pub fn audit_log(log: &SimulationLog) -> AuditReport {
    let mut report = AuditReport::default();
    let Some((config, _)) = log.start() else {
        report.problems.push("log has no start event".into());
        return report;
    };
    if !log.timestamps_monotone() {
        report.problems.push("timestamps are not monotone".into());
    }
    let setup = PlannerSetup {
        model: RigidBodyModel::new(config.robot.clone()),
        problem: config.problem_settings(),
        solver: config.solver.clone(),
    };
    let tol_c = config.solver.constraint_tolerance;
    let tol_d = config.solver.defect_tolerance;

    for replan in log.replans() {
        if replan.status == ReplanStatus::Failed || !replan.issued {
            report.failed_replans += 1;
        }
        if let Some(id) = replan.plan {
            if !log.plans().any(|p| p.plan == id) {
                report.problems.push(format!("replan at t = {} refers to missing plan {id}", replan.t));
            }
        }
    }

    for plan in log.plans() {
        let snap = &plan.problem;
        let request = PlanRequest {
            id: plan.plan,
            x0: DVector::from_vec(snap.x0.clone()),
            planes0: snap.planes0,
            schedule: snap.schedule.clone(),
            goal: snap.goal.clone(),
            terrain: snap.terrain.clone(),
        };
        let iterate = Iterate {
            states: plan.states.iter().map(|x| DVector::from_vec(x.clone())).collect(),
            inputs: plan.inputs.iter().map(|u| DVector::from_vec(u.clone())).collect(),
        };
        let eval = setup
            .problem(&request)
            .map_err(|e| e.to_string())
            .and_then(|p| evaluate(&p, &iterate).map_err(|e| e.to_string()));
        match eval {
            Ok(e) => {
                let (eq, ineq, defect) = (e.max_equality(), e.max_inequality(), e.max_defect());
                report.plans.push(PlanAudit {
                    plan: plan.plan,
                    issued: plan.issued,
                    max_equality: eq,
                    max_inequality: ineq,
                    max_defect: defect,
                    feasible: eq <= tol_c && ineq <= tol_c && defect <= tol_d,
                });
            }
            Err(e) => report.problems.push(format!("plan {} cannot be re-evaluated: {e}", plan.plan)),
        }
    }

    for td in log.touchdowns() {
        report.touchdowns += 1;
        let r = Vector3::from(td.position);
        let terrain = terrain_at(log, td.t, config);
        if terrain.gaps.iter().any(|g| g.gap.contains(&r)) {
            report.problems.push(format!("leg {} touched down inside a gap at t = {}", td.leg, td.t));
        }
        for s in &terrain.spheres {
            let d = (r - s.sphere.center_vector()).norm() - s.sphere.radius;
            report.sphere_clearance = Some(report.sphere_clearance.map_or(d, |m| m.min(d)));
        }
        let plane = td
            .surface
            .as_ref()
            .and_then(|id| terrain.planes.iter().find(|p| &p.id == id));
        match plane {
            Some(p) if p.plane.covers(r.x, r.y) && p.plane.residual(&r).abs() <= TOUCHDOWN_TOLERANCE => {}
            _ => report
                .problems
                .push(format!("leg {} touchdown at t = {} is not on a contact plane", td.leg, td.t)),
        }
    }
    report
}

/// Terrain in effect at time `t`: the scenario terrain with every logged
/// relocation up to `t` applied.
pub fn terrain_at(log: &SimulationLog, t: f64, config: &ScenarioConfig) -> stride_core::terrain::Terrain {
    let mut terrain = config.terrain.clone();
    for e in log.events().take_while(|e| e.t <= t) {
        if let Event::Relocate { id, pose } = &e.event {
            let _ = terrain.relocate(id, *pose);
        }
    }
    terrain
}

/// Scenario of a logged run with its scripted events replaced by the
/// commands that were actually applied, including live ones.
pub fn replay_config(log: &SimulationLog) -> Option<(ScenarioConfig, u64)> {
    let (config, seed) = log.start()?;
    let mut config = config.clone();
    config.events = log
        .events()
        .filter_map(|e| {
            let action = match &e.event {
                Event::Relocate { id, pose } => EventAction::Relocate {
                    id: id.clone(),
                    pose: *pose,
                },
                Event::Heading { heading } => EventAction::Heading { heading: *heading },
                _ => return None,
            };
            Some(ScriptedEvent { time: e.t, action })
        })
        .collect();
    Some((config, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub records: usize,
    /// Index of the first record that differs, if any.
    pub first_mismatch: Option<usize>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

fn comparable(r: &LogRecord) -> bool {
    !matches!(r, LogRecord::Event(EventRecord { event: Event::Start { .. }, .. }))
}

/// Re-runs a logged scenario and compares the records one by one.
pub fn replay(log: &SimulationLog) -> Result<ReplayOutcome, SimError> {
    let (config, seed) = replay_config(log).ok_or_else(|| SimError::Setup("log has no start event".into()))?;
    let rerun = run_scenario(&config, seed)?;
    let a: Vec<String> = log.records.iter().filter(|r| comparable(r)).map(|r| r.to_line()).collect();
    let b: Vec<String> = rerun.records.iter().filter(|r| comparable(r)).map(|r| r.to_line()).collect();
    let first_mismatch = a
        .iter()
        .zip(&b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then_some(a.len().min(b.len())));
    Ok(ReplayOutcome {
        records: a.len(),
        first_mismatch,
    })
}
