//! Closed-loop scenario simulation: the reduced model as plant, the tracker
//! at the control rate and a replan at every touchdown.

use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stride_core::contact::FrictionModel;
use stride_core::gait::{CyclicPattern, GaitSchedule, NodeGrid};
use stride_core::model::*;
use stride_core::nominal::TaskGoal;
use stride_core::slq::{SolverStatus, TrajectorySolution};
use stride_core::swing::build_swing;
use stride_core::terrain::{ContactPlane, Terrain};
use thiserror::Error;

use crate::config::{ConfigError, EventAction, FailurePolicy, ScenarioConfig};
use crate::log::*;
use crate::planner::{PlanRequest, PlanResponse, PlannerSetup, PlannerWorker};
use crate::tracker::{track_interval, Reference, SwingTrack, TrackerContext};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown terrain object `{0}`")]
    UnknownId(String),
    #[error("{0}")]
    Setup(String),
}

/// A plan as the tracker sees it, anchored at the tick it was requested.
#[derive(Debug, Clone)]
pub struct Plan {
    pub id: usize,
    pub tick0: u64,
    pub ticks_per_node: usize,
    pub grid: NodeGrid,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Plan {
    fn node_at(&self, tick: u64) -> Option<(usize, f64)> {
        let rel = tick.checked_sub(self.tick0)? as usize;
        let n = rel / self.ticks_per_node;
        let frac = (rel % self.ticks_per_node) as f64 / self.ticks_per_node as f64;
        (n + 1 < self.grid.len()).then_some((n, frac))
    }

    /// Interpolated state, held input and contact flags at `tick`; `None`
    /// past the horizon.
    pub fn reference(&self, tick: u64) -> Option<Reference> {
        let (n, frac) = self.node_at(tick)?;
        Some(Reference {
            state: &self.states[n] * (1.0 - frac) + &self.states[n + 1] * frac,
            input: self.inputs[n].clone(),
            contact: self.grid.stage_contact(n),
        })
    }

    /// Planned touchdown position and tick of the swing of `leg` that is
    /// under way at `tick`.
    pub fn swing_target(&self, tick: u64, leg: usize) -> Option<(Vector3<f64>, u64)> {
        let (n, _) = self.node_at(tick)?;
        let last = self.grid.len() - 1;
        let m = (n + 1..=last).find(|&m| m == last || self.grid.stage_contact(m)[leg])?;
        let target = self.states[m].fixed_rows::<3>(foot_index(leg)).into_owned();
        Some((target, self.tick0 + (m * self.ticks_per_node) as u64))
    }
}

fn to3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn slice3(x: &DVector<f64>, i: usize) -> [f64; 3] {
    [x[i], x[i + 1], x[i + 2]]
}

/// Highest named terrain plane under `foot`, or `None` over a gap or
/// outside every plane.
pub fn surface_under(terrain: &Terrain, foot: &Vector3<f64>) -> Option<(String, ContactPlane)> {
    if terrain.gap_at(foot.x, foot.y).is_some() {
        return None;
    }
    terrain
        .planes
        .iter()
        .filter(|p| p.plane.covers(foot.x, foot.y))
        .max_by(|a, b| {
            a.plane
                .height_at(foot.x, foot.y)
                .total_cmp(&b.plane.height_at(foot.x, foot.y))
        })
        .map(|p| (p.id.clone(), p.plane))
}

/// Swing phases of a plan grid as (leg, touchdown node).
fn swing_ends(schedule: &GaitSchedule, grid: &NodeGrid) -> Vec<(usize, usize)> {
    schedule
        .phases
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.config.swing_leg().map(|leg| (leg, grid.phase_end[k])))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Finish {
    Completed,
    Halted(String),
}

pub struct Simulation {
    config: ScenarioConfig,
    model: RigidBodyModel,
    friction: FrictionModel,
    terrain: Terrain,
    goal: TaskGoal,
    pattern: CyclicPattern,
    schedule: GaitSchedule,
    planner: PlannerWorker,
    rng: ChaCha8Rng,
    noise: (Normal<f64>, Normal<f64>),
    tick: u64,
    end_tick: u64,
    x: DVector<f64>,
    planes: [ContactPlane; LEG_COUNT],
    swings: [Option<SwingTrack>; LEG_COUNT],
    contact: [bool; LEG_COUNT],
    active: Plan,
    pending: Option<(Plan, u64)>,
    plans_made: usize,
    steps: usize,
    scripted: Vec<(u64, EventAction)>,
    queued: Vec<EventAction>,
    finish: Option<Finish>,
    out: Vec<LogRecord>,
}

impl Simulation {
    /// Sets the robot up in its nominal stance and computes the first plan.
    pub fn new(config: ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let model = RigidBodyModel::new(config.robot.clone());
        let friction = config.friction();
        let terrain = config.terrain.clone();
        let dt_c = config.control_dt;
        let x = RobotState::standing(&config.robot, Vector3::from(config.start.base)).to_vector();
        let mut planes = [ContactPlane::horizontal(0.0); LEG_COUNT];
        for (leg, plane) in planes.iter_mut().enumerate() {
            let foot = x.fixed_rows::<3>(foot_index(leg)).into_owned();
            let (_, p) = surface_under(&terrain, &foot)
                .ok_or_else(|| SimError::Setup(format!("initial foot {leg} has no support plane")))?;
            if p.residual(&foot).abs() > 1e-9 {
                return Err(SimError::Setup(format!("initial foot {leg} is not on the terrain")));
            }
            *plane = p;
        }
        let mut pattern = config.gait.pattern()?;
        let schedule = GaitSchedule::initial(
            &mut pattern,
            config.gait.initial_stance,
            config.gait.horizon_phases,
            config.gait.dt,
        )
        .map_err(|e| SimError::Setup(e.to_string()))?;
        let planner = PlannerWorker::spawn(PlannerSetup {
            model: model.clone(),
            problem: config.problem_settings(),
            solver: config.solver.clone(),
        });
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| SimError::Setup(e.to_string()));
        let noise = (normal(config.noise.position)?, normal(config.noise.orientation)?);
        let mut scripted: Vec<(u64, EventAction)> = config
            .events
            .iter()
            .map(|e| ((e.time / dt_c).round() as u64, e.action.clone()))
            .collect();
        scripted.sort_by_key(|(tick, _)| *tick);

        let mut sim = Self {
            end_tick: (config.duration / dt_c).round() as u64,
            goal: config.goal.clone(),
            config,
            model,
            friction,
            terrain,
            pattern,
            schedule,
            planner,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            tick: 0,
            x,
            planes,
            swings: Default::default(),
            contact: [true; LEG_COUNT],
            active: Plan {
                id: 0,
                tick0: 0,
                ticks_per_node: 1,
                grid: NodeGrid {
                    dt: 0.0,
                    nodes: Vec::new(),
                    phase_end: Vec::new(),
                },
                states: Vec::new(),
                inputs: Vec::new(),
            },
            pending: None,
            plans_made: 0,
            steps: 0,
            scripted,
            queued: Vec::new(),
            finish: None,
            out: Vec::new(),
        };
        sim.emit_event(Event::Start {
            version: LOG_VERSION,
            seed,
            scenario: Box::new(sim.config.clone()),
        });
        sim.apply_due_events();
        match sim.replan(None) {
            Some((plan, _)) => {
                sim.active = plan;
                sim.emit_event(Event::PlanApplied { plan: sim.active.id });
            }
            None => {
                if sim.finish.is_none() {
                    sim.halt("the first plan failed".into());
                }
            }
        }
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.control_dt
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Plan the tracker is following.
    pub fn active_plan(&self) -> &Plan {
        &self.active
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn finished(&self) -> Option<&Finish> {
        self.finish.as_ref()
    }

    /// Records produced since the last call.
    pub fn drain(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.out)
    }

    /// Queues an operator command; it takes effect at the start of the next
    /// control tick, exactly like a scripted event at that time.
    pub fn command(&mut self, action: EventAction) -> Result<(), SimError> {
        if let EventAction::Relocate { id, .. } = &action {
            let mut probe = self.terrain.clone();
            probe.relocate(id, [0.0; 3]).map_err(|_| SimError::UnknownId(id.clone()))?;
        }
        self.queued.push(action);
        Ok(())
    }

    fn emit_event(&mut self, event: Event) {
        let t = self.time();
        self.out.push(LogRecord::Event(EventRecord { t, event }));
    }

    fn halt(&mut self, reason: String) {
        self.emit_event(Event::Halt { reason: reason.clone() });
        self.finish = Some(Finish::Halted(reason));
    }

    fn apply_due_events(&mut self) {
        let mut due: Vec<EventAction> = Vec::new();
        while self.scripted.first().is_some_and(|(tick, _)| *tick <= self.tick) {
            due.push(self.scripted.remove(0).1);
        }
        due.append(&mut self.queued);
        for action in due {
            match action {
                EventAction::Relocate { id, pose } => {
                    if self.terrain.relocate(&id, pose).is_ok() {
                        self.emit_event(Event::Relocate { id, pose });
                    }
                }
                EventAction::Heading { heading } => {
                    self.goal.heading = heading;
                    self.emit_event(Event::Heading { heading });
                }
            }
        }
    }

    /// State handed to the planner: base pose perturbed by the estimate noise.
    fn measured_state(&mut self) -> DVector<f64> {
        let mut x = self.x.clone();
        for i in 0..3 {
            x[IDX_POS + i] += self.noise.0.sample(&mut self.rng);
        }
        for i in 0..3 {
            x[IDX_ORI + i] += self.noise.1.sample(&mut self.rng);
        }
        x
    }

    /// Solves for a new plan anchored at the current tick and logs the
    /// outcome. Returns the plan and the tick at which it takes effect when
    /// it may be issued.
    fn replan(&mut self, leg: Option<usize>) -> Option<(Plan, u64)> {
        let id = self.plans_made;
        self.plans_made += 1;
        let request = PlanRequest {
            id,
            x0: self.measured_state(),
            planes0: self.planes,
            schedule: self.schedule.clone(),
            goal: self.goal.clone(),
            terrain: self.terrain.clone(),
        };
        let response = self.planner.solve(request.clone());
        self.record_plan(leg, &request, response)
    }

    fn record_plan(&mut self, leg: Option<usize>, req: &PlanRequest, resp: PlanResponse) -> Option<(Plan, u64)> {
        let t = self.time();
        let dt_c = self.config.control_dt;
        let sol: TrajectorySolution = match resp.result {
            Ok(sol) => sol,
            Err(error) => {
                self.out.push(LogRecord::Replan(ReplanRecord {
                    t,
                    plan: None,
                    leg,
                    status: ReplanStatus::Failed,
                    issued: false,
                    iterations: 0,
                    latency: 0.0,
                    cost: f64::NAN,
                    max_equality: f64::NAN,
                    max_inequality: f64::NAN,
                    max_defect: f64::NAN,
                    error: Some(error.clone()),
                }));
                self.on_failure(format!("plan {} failed: {error}", req.id));
                return None;
            }
        };
        let latency = if self.config.planner.wall_clock_latency {
            resp.wall_seconds
        } else {
            sol.iterations as f64 * self.config.planner.latency_per_iteration
        };
        let latency_ticks = if leg.is_none() { 0 } else { (latency / dt_c - 1e-9).ceil().max(0.0) as u64 };
        let effective = self.tick + latency_ticks;
        let status = match sol.status {
            SolverStatus::Converged => ReplanStatus::Converged,
            SolverStatus::MaxIterations => ReplanStatus::MaxIterations,
            SolverStatus::Stalled => ReplanStatus::Stalled,
        };
        let issued = status == ReplanStatus::Converged;
        let grid = self
            .schedule
            .build_node_grid()
            .expect("the schedule was validated when the problem was built");
        let ends = swing_ends(&self.schedule, &grid);
        let touchdowns = ends
            .iter()
            .map(|&(leg, node)| TouchdownTarget {
                leg,
                node,
                position: slice3(&sol.states[node], foot_index(leg)),
            })
            .collect();
        let record_timings = self.config.planner.record_timings;
        self.out.push(LogRecord::Replan(ReplanRecord {
            t,
            plan: Some(req.id),
            leg,
            status,
            issued,
            iterations: sol.iterations,
            latency: latency_ticks as f64 * dt_c,
            cost: sol.cost,
            max_equality: sol.max_equality_residual(),
            max_inequality: sol.max_inequality_violation(),
            max_defect: sol.max_defect(),
            error: None,
        }));
        self.out.push(LogRecord::Plan(Box::new(PlanRecord {
            t,
            plan: req.id,
            issued,
            effective_at: effective as f64 * dt_c,
            times: sol.times.iter().map(|s| t + s).collect(),
            states: sol.states.iter().map(|x| x.as_slice().to_vec()).collect(),
            inputs: sol.inputs.iter().map(|u| u.as_slice().to_vec()).collect(),
            first_step_end: ends.first().map_or(grid.len() - 1, |e| e.1),
            second_step_end: ends.get(1).map(|e| e.1),
            touchdowns,
            problem: ProblemSnapshot {
                x0: req.x0.as_slice().to_vec(),
                planes0: req.planes0,
                schedule: req.schedule.clone(),
                goal: req.goal.clone(),
                terrain: req.terrain.clone(),
            },
        })));
        self.out.push(LogRecord::Diagnostics(DiagnosticsRecord {
            t,
            plan: req.id,
            iterations: sol
                .history
                .iter()
                .map(|h| IterationDiagnostics {
                    cost: h.cost,
                    merit: h.merit,
                    step_length: h.step_length,
                    max_equality: h.max_equality,
                    max_inequality: h.max_inequality,
                    max_defect: h.max_defect,
                    ipm_iterations: h.ipm_iterations,
                    elapsed_ms: record_timings.then_some(h.elapsed_ms),
                })
                .collect(),
        }));
        if !issued {
            self.on_failure(format!("plan {} did not converge ({status:?})", req.id));
            return None;
        }
        let plan = Plan {
            id: req.id,
            tick0: self.tick,
            ticks_per_node: self.config.ticks_per_node(),
            grid,
            states: sol.states,
            inputs: sol.inputs,
        };
        Some((plan, effective))
    }

    fn on_failure(&mut self, reason: String) {
        if self.config.planner.on_failure == FailurePolicy::Halt {
            self.halt(reason);
        }
    }

    /// Advances the simulation by one control tick.
    pub fn step(&mut self) {
        if self.finish.is_some() {
            return;
        }
        self.apply_due_events();
        if let Some((_, at)) = &self.pending {
            if *at <= self.tick {
                let (plan, _) = self.pending.take().expect("checked above");
                self.active = plan;
                self.emit_event(Event::PlanApplied { plan: self.active.id });
            }
        }
        let Some(reference) = self.active.reference(self.tick) else {
            self.halt(format!("plan {} ran out before the next plan arrived", self.active.id));
            return;
        };

        let mut touched = None;
        for leg in 0..LEG_COUNT {
            let foot = self.x.fixed_rows::<3>(foot_index(leg)).into_owned();
            match (self.contact[leg], reference.contact[leg]) {
                (true, false) => {
                    let Some((target, td_tick)) = self.active.swing_target(self.tick, leg) else {
                        self.halt(format!("no touchdown target for leg {leg}"));
                        return;
                    };
                    let duration = (td_tick - self.tick) as f64 * self.config.control_dt;
                    match build_swing(&foot, &target, duration, self.config.gait.apex) {
                        Ok(spline) => self.swings[leg] = Some(SwingTrack { spline, elapsed: 0.0 }),
                        Err(e) => {
                            self.halt(format!("swing of leg {leg}: {e}"));
                            return;
                        }
                    }
                    self.emit_event(Event::Liftoff {
                        leg,
                        position: to3(&foot),
                    });
                }
                (false, true) => {
                    self.swings[leg] = None;
                    let surface = surface_under(&self.terrain, &foot);
                    let mut landed = foot;
                    if let Some((_, plane)) = &surface {
                        landed -= plane.normal_vector() * plane.residual(&foot);
                        self.planes[leg] = *plane;
                        self.x.fixed_rows_mut::<3>(foot_index(leg)).copy_from(&landed);
                    }
                    self.emit_event(Event::Touchdown {
                        leg,
                        position: to3(&landed),
                        surface: surface.as_ref().map(|s| s.0.clone()),
                    });
                    self.steps += 1;
                    if surface.is_none() {
                        self.halt(format!("leg {leg} landed outside every contact plane"));
                        return;
                    }
                    touched = Some(leg);
                }
                _ => {}
            }
        }
        self.contact = reference.contact;

        if let Some(leg) = touched {
            if self.config.steps.is_some_and(|s| self.steps >= s) {
                self.emit_event(Event::End { steps: self.steps });
                self.finish = Some(Finish::Completed);
                return;
            }
            self.schedule = self.schedule.advance_horizon(&mut self.pattern);
            if let Some(next) = self.replan(Some(leg)) {
                if next.1 <= self.tick {
                    self.active = next.0;
                    self.emit_event(Event::PlanApplied { plan: self.active.id });
                } else {
                    self.pending = Some(next);
                }
            }
            if self.finish.is_some() {
                return;
            }
        }
        // The plan may have been replaced at this very tick.
        let reference = self.active.reference(self.tick).unwrap_or(reference);

        let ctx = TrackerContext {
            model: &self.model,
            gains: &self.config.tracker,
            friction: &self.friction,
            planes: &self.planes,
            swings: &self.swings,
            dt: self.config.control_dt,
        };
        let (next, u) = match track_interval(&reference, &self.x, &ctx) {
            Ok(v) => v,
            Err(e) => {
                self.halt(format!("plant integration failed: {e}"));
                return;
            }
        };
        if self.tick % self.config.ticks_per_node() as u64 == 0 {
            let record = self.state_record(&u, &reference);
            self.out.push(LogRecord::State(record));
        }
        self.x = next;
        for track in self.swings.iter_mut().flatten() {
            track.elapsed += self.config.control_dt;
        }
        self.tick += 1;
        if self.tick >= self.end_tick {
            self.emit_event(Event::End { steps: self.steps });
            self.finish = Some(Finish::Completed);
        }
    }

    fn state_record(&self, u: &DVector<f64>, reference: &Reference) -> StateRecord {
        let x = &self.x;
        StateRecord {
            t: self.time(),
            base: slice3(x, IDX_POS),
            orientation: slice3(x, IDX_ORI),
            linear_velocity: slice3(x, IDX_LIN_VEL),
            angular_velocity: slice3(x, IDX_ANG_VEL),
            feet: std::array::from_fn(|i| slice3(x, foot_index(i))),
            forces: std::array::from_fn(|i| slice3(u, force_index(i))),
            planned_forces_z: std::array::from_fn(|i| reference.input[force_index(i) + 2]),
            contact: self.contact,
            plan: self.active.id,
        }
    }

    /// Runs until the scenario completes or halts.
    pub fn run_to_end(&mut self) -> Vec<LogRecord> {
        let mut records = self.drain();
        while self.finish.is_none() {
            self.step();
            records.append(&mut self.drain());
        }
        records
    }
}

/// Runs a scenario headless and returns its log.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<SimulationLog, SimError> {
    let mut sim = Simulation::new(config.clone(), seed)?;
    Ok(SimulationLog {
        records: sim.run_to_end(),
    })
}
