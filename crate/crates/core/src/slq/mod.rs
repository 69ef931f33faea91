//! Constrained sequential linear-quadratic solver with multiple shooting.
//!
//! Every iteration linearises the dynamics and constraints around the
//! current node states and inputs, solves the resulting stage-wise QP with a
//! primal-dual interior-point method whose Newton systems are factorised by
//! a Riccati recursion, and globalises with a backtracking line search on an
//! ℓ1 merit function.

mod ipm;
mod lq;
mod problem;
mod riccati;

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use ipm::{solve_lq, IpmSettings, LqSolution};
pub use lq::{LqInterval, LqProblem, LqStage};
pub use problem::{
    ConstraintBlock, ConstraintRows, NodeConstraints, OptimalControlProblem, StageQuadratic,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible subproblem at stage {stage}: {reason}")]
    InfeasibleSubproblem { stage: usize, reason: String },
    #[error("interior point method did not converge in {iterations} iterations (mu = {mu:e})")]
    IpmNotConverged { iterations: usize, mu: f64 },
    #[error("Riccati factorisation failed at stage {stage} after regularisation {regularization:e}")]
    Factorization { stage: usize, regularization: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("line search step fell below the minimum ({alpha:e})")]
    StepBelowMinimum { alpha: f64 },
    #[error("problem error: {0}")]
    Problem(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Relative cost change below which the iteration may stop.
    pub cost_tolerance: f64,
    pub constraint_tolerance: f64,
    pub defect_tolerance: f64,
    pub backtracking_factor: f64,
    pub min_step: f64,
    pub armijo: f64,
    /// Lower bound on the ℓ1 merit penalty.
    pub initial_penalty: f64,
    pub ipm: IpmSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            cost_tolerance: 1e-6,
            constraint_tolerance: 1e-6,
            defect_tolerance: 1e-6,
            backtracking_factor: 0.5,
            min_step: 1e-4,
            armijo: 1e-4,
            initial_penalty: 1.0,
            ipm: IpmSettings::default(),
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            self.cost_tolerance,
            self.constraint_tolerance,
            self.defect_tolerance,
            self.min_step,
            self.initial_penalty,
            self.ipm.tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(SolverError::Problem("solver tolerances must be positive".into()));
        }
        if !(self.backtracking_factor > 0.0 && self.backtracking_factor < 1.0) {
            return Err(SolverError::Problem("backtracking factor must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 || self.ipm.max_iterations == 0 {
            return Err(SolverError::Problem("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Stalled,
}

/// Diagnostics of one SLQ iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cost: f64,
    pub merit: f64,
    pub step_length: f64,
    pub max_equality: f64,
    pub max_inequality: f64,
    pub max_defect: f64,
    pub ipm_iterations: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySolution {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Largest equality residual per node.
    pub equality_residuals: Vec<f64>,
    /// Largest inequality violation per node.
    pub inequality_violations: Vec<f64>,
    /// ∞-norm of the shooting defect per interval.
    pub defects: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub status: SolverStatus,
}

impl TrajectorySolution {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }

    pub fn max_equality_residual(&self) -> f64 {
        self.equality_residuals.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn max_inequality_violation(&self) -> f64 {
        self.inequality_violations.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn mean_iteration_ms(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|r| r.elapsed_ms).sum::<f64>() / self.history.len() as f64
    }
}

/// Node states and inputs of a candidate trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Cost and constraint residuals of an iterate.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    pub defects: Vec<DVector<f64>>,
    pub constraints: Vec<NodeConstraints>,
}

impl Evaluation {
    /// ℓ1 norm of all defects, equality residuals and inequality violations.
    pub fn infeasibility(&self) -> f64 {
        let d: f64 = self.defects.iter().map(|d| d.lp_norm(1)).sum();
        let c: f64 = self
            .constraints
            .iter()
            .map(|c| c.equality.l1_abs() + c.inequality.l1_violation())
            .sum();
        d + c
    }

    pub fn merit(&self, penalty: f64) -> f64 {
        self.cost + penalty * self.infeasibility()
    }

    pub fn max_equality(&self) -> f64 {
        self.constraints.iter().fold(0.0, |m, c| m.max(c.equality.max_abs()))
    }

    pub fn max_inequality(&self) -> f64 {
        self.constraints.iter().fold(0.0, |m, c| m.max(c.inequality.max_violation()))
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().fold(0.0, |m, d| m.max(d.amax()))
    }
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<(), SolverError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFinite(what.to_string()))
    }
}

/// Shooting defects `step(x_n, u_n) − x_{n+1}` for every interval.
pub fn compute_defects<P: OptimalControlProblem + ?Sized>(
    problem: &P,
    iterate: &Iterate,
) -> Result<Vec<DVector<f64>>, SolverError> {
    check_shape(problem, iterate)?;
    (0..iterate.inputs.len())
        .map(|n| {
            let next = problem.step(n, &iterate.states[n], &iterate.inputs[n])?;
            Ok(next - &iterate.states[n + 1])
        })
        .collect()
}

fn check_shape<P: OptimalControlProblem + ?Sized>(problem: &P, it: &Iterate) -> Result<(), SolverError> {
    let n = problem.node_count();
    if n < 2 {
        return Err(SolverError::Problem("node count must be at least 2".into()));
    }
    if it.states.len() != n || it.inputs.len() != n - 1 {
        return Err(SolverError::Dimension(format!(
            "expected {} states and {} inputs, got {} and {}",
            n,
            n - 1,
            it.states.len(),
            it.inputs.len()
        )));
    }
    let (nx, nu) = (problem.state_dim(), problem.input_dim());
    if it.states.iter().any(|x| x.len() != nx) || it.inputs.iter().any(|u| u.len() != nu) {
        return Err(SolverError::Dimension(format!(
            "states must have length {nx} and inputs length {nu}"
        )));
    }
    Ok(())
}

/// Cost, defects and constraint residuals of an iterate.
pub fn evaluate<P: OptimalControlProblem + ?Sized>(
    problem: &P,
    iterate: &Iterate,
) -> Result<Evaluation, SolverError> {
    let defects = compute_defects(problem, iterate)?;
    let n = problem.node_count();
    let mut cost = 0.0;
    let mut constraints = Vec::with_capacity(n);
    for k in 0..n - 1 {
        cost += problem.stage_cost(k, &iterate.states[k], &iterate.inputs[k]);
        constraints.push(problem.constraints(k, &iterate.states[k], Some(&iterate.inputs[k]))?);
    }
    cost += problem.final_cost(&iterate.states[n - 1]);
    constraints.push(problem.constraints(n - 1, &iterate.states[n - 1], None)?);
    Ok(Evaluation {
        cost,
        defects,
        constraints,
    })
}

/// Outcome of [`line_search`].
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub iterate: Iterate,
    pub evaluation: Evaluation,
    pub merit: f64,
}

/// Backtracking search on the ℓ1 merit `J + ν·infeasibility`.
///
/// Starts from the full step and shrinks by the backtracking factor until
/// the merit satisfies the Armijo condition with the supplied directional
/// derivative (pass `0.0` to require plain non-increase). Trial points
/// where the dynamics cannot be evaluated count as rejected.
pub fn line_search<P: OptimalControlProblem + ?Sized>(
    problem: &P,
    current: &Iterate,
    current_merit: f64,
    direction: &Iterate,
    penalty: f64,
    directional_derivative: f64,
    settings: &SolverSettings,
) -> Result<LineSearchOutcome, SolverError> {
    let zero_step = direction.states.iter().chain(direction.inputs.iter()).all(|v| v.amax() == 0.0);
    let slope = directional_derivative.min(0.0);
    let tolerance = 1e-13 * current_merit.abs().max(1.0);
    let mut alpha = 1.0;
    while alpha >= settings.min_step {
        let trial = Iterate {
            states: current
                .states
                .iter()
                .zip(&direction.states)
                .map(|(x, d)| x + d * alpha)
                .collect(),
            inputs: current
                .inputs
                .iter()
                .zip(&direction.inputs)
                .map(|(u, d)| u + d * alpha)
                .collect(),
        };
        match evaluate(problem, &trial) {
            Ok(eval) => {
                let merit = eval.merit(penalty);
                let accepted = merit.is_finite()
                    && (zero_step
                        || merit <= current_merit + settings.armijo * alpha * slope + tolerance);
                if accepted {
                    return Ok(LineSearchOutcome {
                        alpha,
                        iterate: trial,
                        evaluation: eval,
                        merit,
                    });
                }
            }
            Err(SolverError::Model(_)) | Err(SolverError::NonFinite(_)) => {}
            Err(e) => return Err(e),
        }
        alpha *= settings.backtracking_factor;
    }
    Err(SolverError::StepBelowMinimum { alpha })
}

/// Linear-quadratic model of `problem` around `iterate`.
pub fn approximate<P: OptimalControlProblem + ?Sized>(
    problem: &P,
    iterate: &Iterate,
) -> Result<LqProblem, SolverError> {
    check_shape(problem, iterate)?;
    let n = problem.node_count();
    let (nx, nu) = (problem.state_dim(), problem.input_dim());
    let mut stages = Vec::with_capacity(n);
    let mut intervals = Vec::with_capacity(n - 1);
    for k in 0..n {
        let x = &iterate.states[k];
        let (mut stage, cons) = if k + 1 < n {
            let u = &iterate.inputs[k];
            let (next, a, b) = problem.step_with_jacobians(k, x, u)?;
            intervals.push(LqInterval {
                a,
                b,
                c: next - &iterate.states[k + 1],
            });
            let quad = problem.stage_quadratic(k, x, u);
            let mut stage = LqStage::new(nx, nu);
            stage.q = quad.hxx;
            stage.s = quad.hux;
            stage.r = quad.huu;
            stage.qv = quad.gx;
            stage.rv = quad.gu;
            (stage, problem.constraints(k, x, Some(u))?)
        } else {
            let (h, g) = problem.final_quadratic(x);
            let mut stage = LqStage::new(nx, 0);
            stage.q = h;
            stage.qv = g;
            (stage, problem.constraints(k, x, None)?)
        };
        let keep: Vec<usize> = (0..cons.equality.len()).filter(|&i| !cons.equality.implied[i]).collect();
        let stage_nu = stage.r.nrows();
        stage.eq_x = cons.equality.jac_x.select_rows(keep.iter());
        stage.eq_u = cons.equality.jac_u.select_rows(keep.iter()).columns(0, stage_nu).into_owned();
        stage.eq_e = cons.equality.values.select_rows(keep.iter());
        stage.ineq_x = cons.inequality.jac_x.clone();
        stage.ineq_u = cons.inequality.jac_u.columns(0, stage_nu).into_owned();
        stage.ineq_h = cons.inequality.values.clone();
        stages.push(stage);
    }
    let x0 = problem.initial_state() - &iterate.states[0];
    Ok(LqProblem {
        x0,
        stages,
        intervals,
    })
}

/// First-order change of the cost along `direction`.
fn cost_slope(lq: &LqProblem, direction: &Iterate) -> f64 {
    lq.stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let mut v = st.qv.dot(&direction.states[k]);
            if k < direction.inputs.len() {
                v += st.rv.dot(&direction.inputs[k]);
            }
            v
        })
        .sum()
}

fn max_multiplier(sol: &LqSolution) -> f64 {
    sol.costates
        .iter()
        .chain(sol.eq_multipliers.iter())
        .chain(sol.ineq_multipliers.iter())
        .fold(0.0, |m, v| m.max(v.amax()))
}

/// Solves `problem` from `initial_guess`, or from the problem's own cold
/// start when none is given.
pub fn solve<P: OptimalControlProblem + ?Sized>(
    problem: &P,
    settings: &SolverSettings,
    initial_guess: Option<Iterate>,
) -> Result<TrajectorySolution, SolverError> {
    settings.validate()?;
    let mut iterate = match initial_guess {
        Some(g) => g,
        None => {
            let (states, inputs) = problem.initial_guess();
            Iterate { states, inputs }
        }
    };
    check_shape(problem, &iterate)?;
    iterate.states[0] = problem.initial_state().clone();
    for v in iterate.states.iter().chain(iterate.inputs.iter()) {
        check_finite(v, "initial guess")?;
    }

    let mut eval = evaluate(problem, &iterate)?;
    let mut penalty = settings.initial_penalty;
    let mut history = Vec::new();
    let mut status = SolverStatus::MaxIterations;

    for _ in 0..settings.max_iterations {
        let started = Instant::now();
        let lq = approximate(problem, &iterate)?;
        let sol = solve_lq(&lq, &settings.ipm)?;
        let direction = Iterate {
            states: sol.x.clone(),
            inputs: sol.u.clone(),
        };
        for v in direction.states.iter().chain(direction.inputs.iter()) {
            check_finite(v, "search direction")?;
        }
        penalty = penalty.max(1.5 * max_multiplier(&sol));
        let merit0 = eval.merit(penalty);
        let slope = cost_slope(&lq, &direction) - penalty * eval.infeasibility();
        let previous_cost = eval.cost;

        let outcome = match line_search(problem, &iterate, merit0, &direction, penalty, slope, settings) {
            Ok(o) => o,
            Err(SolverError::StepBelowMinimum { .. }) => {
                status = SolverStatus::Stalled;
                history.push(IterationRecord {
                    cost: eval.cost,
                    merit: merit0,
                    step_length: 0.0,
                    max_equality: eval.max_equality(),
                    max_inequality: eval.max_inequality(),
                    max_defect: eval.max_defect(),
                    ipm_iterations: sol.iterations,
                    elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        iterate = outcome.iterate;
        eval = outcome.evaluation;
        history.push(IterationRecord {
            cost: eval.cost,
            merit: outcome.merit,
            step_length: outcome.alpha,
            max_equality: eval.max_equality(),
            max_inequality: eval.max_inequality(),
            max_defect: eval.max_defect(),
            ipm_iterations: sol.iterations,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let relative_change = (previous_cost - eval.cost).abs() / previous_cost.abs().max(1.0);
        if relative_change < settings.cost_tolerance
            && eval.max_equality() <= settings.constraint_tolerance
            && eval.max_inequality() <= settings.constraint_tolerance
            && eval.max_defect() <= settings.defect_tolerance
        {
            status = SolverStatus::Converged;
            break;
        }
    }

    let n = problem.node_count();
    Ok(TrajectorySolution {
        times: (0..n).map(|k| problem.node_time(k)).collect(),
        equality_residuals: eval.constraints.iter().map(|c| c.equality.max_abs()).collect(),
        inequality_violations: eval.constraints.iter().map(|c| c.inequality.max_violation()).collect(),
        defects: eval.defects.iter().map(|d| d.amax()).collect(),
        cost: eval.cost,
        iterations: history.len(),
        history,
        status,
        states: iterate.states,
        inputs: iterate.inputs,
    })
}
