//! Planner worker: owns the solver and answers plan requests in order.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;
use std::time::Instant;

use nalgebra::DVector;
use stride_core::gait::GaitSchedule;
use stride_core::locomotion::{LocomotionError, LocomotionProblem, ProblemSettings};
use stride_core::model::{RigidBodyModel, LEG_COUNT};
use stride_core::nominal::TaskGoal;
use stride_core::slq::{solve, SolverSettings, TrajectorySolution};
use stride_core::terrain::{ContactPlane, Terrain};

#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub id: usize,
    pub x0: DVector<f64>,
    pub planes0: [ContactPlane; LEG_COUNT],
    pub schedule: GaitSchedule,
    pub goal: TaskGoal,
    pub terrain: Terrain,
}

#[derive(Debug, Clone)]
pub struct PlanResponse {
    pub id: usize,
    pub result: Result<TrajectorySolution, String>,
    pub wall_seconds: f64,
}

/// Solver configuration shared by every request of a run.
#[derive(Debug, Clone)]
pub struct PlannerSetup {
    pub model: RigidBodyModel,
    pub problem: ProblemSettings,
    pub solver: SolverSettings,
}

impl PlannerSetup {
    pub fn problem(&self, req: &PlanRequest) -> Result<LocomotionProblem, LocomotionError> {
        LocomotionProblem::new(
            self.model.clone(),
            req.x0.clone(),
            req.planes0,
            &req.schedule,
            &req.goal,
            &req.terrain,
            &self.problem,
        )
    }

    pub fn plan(&self, req: &PlanRequest) -> PlanResponse {
        let started = Instant::now();
        let result = self
            .problem(req)
            .map_err(|e| e.to_string())
            .and_then(|p| solve(&p, &self.solver, None).map_err(|e| e.to_string()));
        PlanResponse {
            id: req.id,
            result,
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

pub struct PlannerWorker {
    requests: Option<Sender<PlanRequest>>,
    responses: Receiver<PlanResponse>,
    handle: Option<JoinHandle<()>>,
}

impl PlannerWorker {
    pub fn spawn(setup: PlannerSetup) -> Self {
        let (req_tx, req_rx) = channel::<PlanRequest>();
        let (resp_tx, resp_rx) = channel();
        let handle = std::thread::Builder::new()
            .name("planner".into())
            .spawn(move || {
                for req in req_rx {
                    if resp_tx.send(setup.plan(&req)).is_err() {
                        break;
                    }
                }
            })
            .expect("spawning the planner thread");
        Self {
            requests: Some(req_tx),
            responses: resp_rx,
            handle: Some(handle),
        }
    }

    /// Sends a request and waits for its answer.
    pub fn solve(&self, req: PlanRequest) -> PlanResponse {
        let id = req.id;
        let lost = |id| PlanResponse {
            id,
            result: Err("planner worker stopped".into()),
            wall_seconds: 0.0,
        };
        match self.requests.as_ref().map(|tx| tx.send(req)) {
            Some(Ok(())) => self.responses.recv().unwrap_or_else(|_| lost(id)),
            _ => lost(id),
        }
    }
}

impl Drop for PlannerWorker {
    fn drop(&mut self) {
        self.requests.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
