//! The locomotion optimal control problem: reduced dynamics on the node
//! grid of a gait schedule, contact constraints from the nominal footholds
//! and quadratic tracking of the nominal sequence.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{ContactError, FrictionModel, LegConstraint, PhaseConstraintSet};
use crate::cost::{build_reachability, CostError, CostModel, CostWeights, ReachabilityParams};
use crate::gait::{GaitError, GaitSchedule, NodeGrid};
use crate::model::{foot_index, ModelError, RigidBodyModel, RobotState, LEG_COUNT, STATE_DIM};
use crate::nominal::{generate_nominal_sequence, NominalError, NominalSequence, TaskGoal};
use crate::slq::{
    NodeConstraints, OptimalControlProblem, SolverError, StageQuadratic,
};
use crate::terrain::{ContactPlane, Terrain};

pub const DEFAULT_REACH_HEIGHT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LocomotionError {
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error(transparent)]
    Nominal(#[from] NominalError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

fn default_reach_height() -> Option<f64> {
    Some(DEFAULT_REACH_HEIGHT)
}

/// Weights and constraint parameters shared by every plan of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSettings {
    pub weights: CostWeights,
    /// Defaults to `μ = 0.7`, four faces and twice the robot weight.
    #[serde(default)]
    pub friction: Option<FrictionModel>,
    /// Lowered base height of the reachability model; `None` disables the
    /// reachability cost.
    #[serde(default = "default_reach_height")]
    pub reach_height: Option<f64>,
}

impl Default for ProblemSettings {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            friction: None,
            reach_height: default_reach_height(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocomotionProblem {
    model: RigidBodyModel,
    x0: DVector<f64>,
    grid: NodeGrid,
    nominal: NominalSequence,
    planes0: [ContactPlane; LEG_COUNT],
    x_d: DVector<f64>,
    x_df: DVector<f64>,
    cost: CostModel,
    sets: Vec<PhaseConstraintSet>,
}

impl LocomotionProblem {
    pub fn new(
        model: RigidBodyModel,
        x0: DVector<f64>,
        planes0: [ContactPlane; LEG_COUNT],
        schedule: &GaitSchedule,
        goal: &TaskGoal,
        terrain: &Terrain,
        settings: &ProblemSettings,
    ) -> Result<Self, LocomotionError> {
        let state = RobotState::from_slice(x0.as_slice())?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(LocomotionError::Invalid("initial state is not finite".into()));
        }
        let grid = schedule.build_node_grid()?;
        let nominal = generate_nominal_sequence(&state, &planes0, goal, schedule, terrain)?;
        let friction = settings
            .friction
            .clone()
            .unwrap_or_else(|| FrictionModel::for_mass(model.mass(), model.gravity().norm()));
        friction.validate()?;
        let reach = match settings.reach_height {
            Some(h_c) => {
                let (w_x, w_y) = model.params.stance_spacing();
                Some(build_reachability(ReachabilityParams::new(goal.base_height, h_c, w_x, w_y)?))
            }
            None => None,
        };
        let cost = CostModel::new(&settings.weights, reach)?;
        let x_df = nominal.final_state();
        let obstacles = terrain.obstacles();
        let margin = goal.edge_margin;

        let n_nodes = grid.len();
        let mut sets = Vec::with_capacity(n_nodes);
        for n in 0..n_nodes {
            let phase = &nominal.phases[grid.nodes[n].phase];
            let stage = grid.stage_contact(n);
            let legs = std::array::from_fn(|i| {
                let mut leg = if n + 1 < n_nodes && stage[i] {
                    LegConstraint::stance(phase.planes[i])
                } else {
                    LegConstraint::swing()
                };
                leg.plane = grid.grounded(n, i).then(|| if n == 0 { planes0[i] } else { phase.planes[i] });
                leg.avoid_obstacles = grid.after_swing(n, i);
                let touchdown = grid.is_touchdown(n, i);
                leg.plane_implied = !touchdown;
                if touchdown {
                    leg.region = phase.planes[i].bounds.map(|b| b.inset(0.5 * margin));
                }
                leg
            });
            sets.push(PhaseConstraintSet {
                legs,
                friction: friction.clone(),
                obstacles: obstacles.clone(),
            });
        }

        Ok(Self {
            model,
            x0,
            grid,
            nominal,
            planes0,
            x_d: x_df.clone(),
            x_df,
            cost,
            sets,
        })
    }

    pub fn grid(&self) -> &NodeGrid {
        &self.grid
    }

    pub fn nominal(&self) -> &NominalSequence {
        &self.nominal
    }

    pub fn model(&self) -> &RigidBodyModel {
        &self.model
    }

    pub fn constraint_set(&self, node: usize) -> &PhaseConstraintSet {
        &self.sets[node]
    }

    pub fn running_reference(&self) -> &DVector<f64> {
        &self.x_d
    }

    pub fn final_reference(&self) -> &DVector<f64> {
        &self.x_df
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    /// Nominal foothold of `leg` at node `n`; swing feet move linearly
    /// between their lift-off and touchdown footholds.
    fn nominal_foot(&self, n: usize, leg: usize) -> Vector3<f64> {
        let k = self.grid.nodes[n].phase;
        let here = self.nominal.phases[k].feet[leg];
        if self.grid.grounded(n, leg) {
            return if n == 0 { foot_of(&self.x0, leg) } else { here };
        }
        let before = if k == 0 {
            foot_of(&self.x0, leg)
        } else {
            self.nominal.phases[k - 1].feet[leg]
        };
        let start = self.grid.phase_start(k);
        let end = self.grid.phase_end[k];
        let s = (n - start) as f64 / (end - start).max(1) as f64;
        before + (here - before) * s
    }
}

fn foot_of(x: &DVector<f64>, leg: usize) -> Vector3<f64> {
    x.fixed_rows::<3>(foot_index(leg)).into_owned()
}

impl OptimalControlProblem for LocomotionProblem {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        crate::model::INPUT_DIM
    }

    fn node_count(&self) -> usize {
        self.grid.len()
    }

    fn node_time(&self, node: usize) -> f64 {
        self.grid.nodes[node].time
    }

    fn initial_state(&self) -> &DVector<f64> {
        &self.x0
    }

    fn step(&self, _node: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        Ok(self.model.integrate_step(x.as_slice(), u.as_slice(), self.grid.dt)?)
    }

    fn step_with_jacobians(
        &self,
        _node: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), SolverError> {
        Ok(self
            .model
            .integrate_step_with_jacobians(x.as_slice(), u.as_slice(), self.grid.dt)?)
    }

    fn stage_cost(&self, _node: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.grid.dt * self.cost.running_cost(x, u, &self.x_d)
    }

    fn stage_quadratic(&self, _node: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic {
        let q = self.cost.running_quadratic(x, u, &self.x_d);
        let dt = self.grid.dt;
        StageQuadratic {
            hxx: q.hxx * dt,
            hux: q.hux * dt,
            huu: q.huu * dt,
            gx: q.gx * dt,
            gu: q.gu * dt,
        }
    }

    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        self.cost.final_cost(x, &self.x_df)
    }

    fn final_quadratic(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        self.cost.final_quadratic(x, &self.x_df)
    }

    fn constraints(
        &self,
        node: usize,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Result<NodeConstraints, SolverError> {
        crate::contact::evaluate_node_constraints(x.as_slice(), u.map(|u| u.as_slice()), &self.sets[node])
            .map_err(|e| SolverError::Problem(e.to_string()))
    }

    /// Base interpolated from `x₀` to the final nominal state, feet on their
    /// nominal footholds, weight shared by the stance legs.
    fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = self.grid.len();
        let states = (0..n)
            .map(|k| {
                let s = k as f64 / (n - 1) as f64;
                let mut x = &self.x0 * (1.0 - s) + &self.x_df * s;
                for leg in 0..LEG_COUNT {
                    x.fixed_rows_mut::<3>(foot_index(leg)).copy_from(&self.nominal_foot(k, leg));
                }
                x
            })
            .collect();
        let inputs = (0..n - 1)
            .map(|k| self.model.gravity_compensation(&self.grid.stage_contact(k)))
            .collect();
        (states, inputs)
    }
}

impl LocomotionProblem {
    /// Initial contact planes the problem was built with.
    pub fn initial_planes(&self) -> &[ContactPlane; LEG_COUNT] {
        &self.planes0
    }
}
