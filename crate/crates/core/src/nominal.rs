//! Nominal base and foothold sequence: geometric waypoints that act as
//! attractors for the optimiser.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::{GaitSchedule, PhaseConfig};
use crate::model::{foot_index, RobotState, IDX_POS, LEG_COUNT, STATE_DIM};
use crate::terrain::{Bounds, ContactPlane, GapVolume, Terrain};

pub const DEFAULT_EDGE_MARGIN: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NominalError {
    #[error("no valid plane for a foothold near ({0:.3}, {1:.3})")]
    NoValidPlane(f64, f64),
    #[error("invalid task goal: {0}")]
    InvalidGoal(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    InGap(GapVolume),
    NoPlane,
}

fn default_margin() -> f64 {
    DEFAULT_EDGE_MARGIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGoal {
    /// Walking direction in the xy plane; normalised on use.
    pub heading: [f64; 2],
    pub step_length: f64,
    /// Base height above the mean foothold height.
    pub base_height: f64,
    /// Extra base displacement along the heading, reached at the last swing
    /// of the horizon.
    #[serde(default)]
    pub base_lead: f64,
    #[serde(default = "default_margin")]
    pub edge_margin: f64,
}

impl TaskGoal {
    pub fn forward(step_length: f64, base_height: f64) -> Self {
        Self {
            heading: [1.0, 0.0],
            step_length,
            base_height,
            base_lead: 0.0,
            edge_margin: DEFAULT_EDGE_MARGIN,
        }
    }

    pub fn heading_unit(&self) -> Result<Vector2<f64>, NominalError> {
        let h = Vector2::from(self.heading);
        let n = h.norm();
        if !(n > 1e-9) {
            return Err(NominalError::InvalidGoal("heading must be non-zero".into()));
        }
        Ok(h / n)
    }

    pub fn validate(&self) -> Result<(), NominalError> {
        self.heading_unit()?;
        if !(self.step_length > 0.0) {
            return Err(NominalError::InvalidGoal("step length must be positive".into()));
        }
        if !(self.base_height > 0.0) || !(self.edge_margin >= 0.0) {
            return Err(NominalError::InvalidGoal("base height and margin must be positive".into()));
        }
        Ok(())
    }
}

/// Nominal configuration at the end of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalPhase {
    pub config: PhaseConfig,
    pub base: Vector3<f64>,
    pub feet: [Vector3<f64>; LEG_COUNT],
    pub planes: [ContactPlane; LEG_COUNT],
}

impl NominalPhase {
    /// Full state with zero orientation and velocities.
    pub fn state(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(IDX_POS).copy_from(&self.base);
        for (i, f) in self.feet.iter().enumerate() {
            x.fixed_rows_mut::<3>(foot_index(i)).copy_from(f);
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalSequence {
    pub phases: Vec<NominalPhase>,
}

impl NominalSequence {
    pub fn final_state(&self) -> DVector<f64> {
        self.phases.last().expect("sequence is never empty").state()
    }
}

/// Moves `(x, y)` to the nearest point outside `b`.
fn push_outside(x: f64, y: f64, b: &Bounds) -> (f64, f64) {
    let candidates = [
        (b.x[0] - x, (b.x[0], y)),
        (x - b.x[1], (b.x[1], y)),
        (b.y[0] - y, (x, b.y[0])),
        (y - b.y[1], (x, b.y[1])),
    ];
    // Distances to the edges are non-positive inside; the largest is the nearest edge.
    candidates
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|c| c.1)
        .unwrap_or((x, y))
}

/// Vertical projection onto the walkable surface under `foothold`, keeping
/// `margin` away from the edges of its plane and from the footprint of any
/// higher plane.
pub fn project_to_surface(
    foothold: &Vector3<f64>,
    terrain: &Terrain,
    margin: f64,
) -> Result<(Vector3<f64>, ContactPlane), Projection> {
    let (mut x, mut y) = (foothold.x, foothold.y);
    if let Some(gap) = terrain.gap_at(x, y) {
        return Err(Projection::InGap(*gap));
    }
    let plane = *terrain.support_plane(x, y).ok_or(Projection::NoPlane)?;
    if let Some(b) = plane.bounds {
        let inner = b.inset(margin);
        x = x.clamp(inner.x[0], inner.x[1]);
        y = y.clamp(inner.y[0], inner.y[1]);
    }
    let here = plane.height_at(x, y);
    for other in terrain.planes.iter().map(|p| &p.plane) {
        let Some(b) = other.bounds else { continue };
        if other == &plane || other.height_at(x, y) <= here + 1e-9 {
            continue;
        }
        let grown = b.inset(-margin);
        if grown.contains(x, y) {
            (x, y) = push_outside(x, y, &grown);
        }
    }
    if terrain.gap_at(x, y).is_some() {
        return Err(Projection::NoPlane);
    }
    Ok((Vector3::new(x, y, plane.height_at(x, y)), plane))
}

/// Shifts a foothold that lands in `gap` out of it along the dominant axis
/// of the step: beyond the far edge when the step covers more than half of
/// the gap, back before the near edge otherwise. Footholds outside the gap
/// are returned unchanged.
pub fn resolve_gap(
    foothold: &Vector3<f64>,
    step: &Vector2<f64>,
    gap: &GapVolume,
    margin: f64,
) -> Vector3<f64> {
    if !gap.contains_xy(foothold.x, foothold.y) {
        return *foothold;
    }
    let axis = if step.x.abs() >= step.y.abs() { 0 } else { 1 };
    let dir = if step[axis] < 0.0 { -1.0 } else { 1.0 };
    let range = if axis == 0 { gap.x } else { gap.y };
    let width = range[1] - range[0];
    let (near, far) = if dir > 0.0 { (range[0], range[1]) } else { (range[1], range[0]) };
    let pos = foothold[axis];
    let coverage = if width > 0.0 { dir * (pos - near) / width } else { 1.0 };
    let mut out = *foothold;
    out[axis] = if coverage > 0.5 + 1e-12 {
        far + dir * margin
    } else {
        near - dir * margin
    };
    out
}

/// Places a foothold aimed at `target`, resolving gaps and edges. Falls
/// back to the opposite side of a gap when the preferred side has no plane.
pub fn place_foothold(
    target: &Vector3<f64>,
    step: &Vector2<f64>,
    terrain: &Terrain,
    margin: f64,
) -> Result<(Vector3<f64>, ContactPlane), NominalError> {
    match project_to_surface(target, terrain, margin) {
        Ok(r) => Ok(r),
        Err(Projection::NoPlane) => Err(NominalError::NoValidPlane(target.x, target.y)),
        Err(Projection::InGap(gap)) => {
            let preferred = resolve_gap(target, step, &gap, margin);
            if let Ok(r) = project_to_surface(&preferred, terrain, margin) {
                return Ok(r);
            }
            let mut mirrored = *target;
            let axis = if step.x.abs() >= step.y.abs() { 0 } else { 1 };
            // Resolve as if the coverage were on the other side of one half.
            let range = if axis == 0 { gap.x } else { gap.y };
            mirrored[axis] = range[0] + range[1] - target[axis];
            let other = resolve_gap(&mirrored, step, &gap, margin);
            project_to_surface(&other, terrain, margin)
                .map_err(|_| NominalError::NoValidPlane(target.x, target.y))
        }
    }
}

/// Nominal configuration at the end of every phase of `schedule`.
///
/// Each swing moves its foot by one step length along the heading from its
/// previous nominal foothold. The base sits over the centroid of the
/// nominal footholds at the desired height above their mean height.
pub fn generate_nominal_sequence(
    x0: &RobotState,
    planes0: &[ContactPlane; LEG_COUNT],
    goal: &TaskGoal,
    schedule: &GaitSchedule,
    terrain: &Terrain,
) -> Result<NominalSequence, NominalError> {
    goal.validate()?;
    let heading = goal.heading_unit()?;
    let step = heading * goal.step_length;
    let mut feet = x0.foot_positions;
    let mut planes = *planes0;
    let swings = schedule.swing_count().max(1);
    let mut done = 0;
    let mut phases = Vec::with_capacity(schedule.phases.len());
    for phase in &schedule.phases {
        if let Some(leg) = phase.config.swing_leg() {
            let target = feet[leg] + Vector3::new(step.x, step.y, 0.0);
            let (foot, plane) = place_foothold(&target, &step, terrain, goal.edge_margin)?;
            feet[leg] = foot;
            planes[leg] = plane;
            done += 1;
        }
        let centroid = feet.iter().fold(Vector3::zeros(), |a, f| a + f) / LEG_COUNT as f64;
        let lead = heading * goal.base_lead * done as f64 / swings as f64;
        phases.push(NominalPhase {
            config: phase.config,
            base: Vector3::new(centroid.x + lead.x, centroid.y + lead.y, centroid.z + goal.base_height),
            feet,
            planes,
        });
    }
    Ok(NominalSequence { phases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::{CyclicPattern, GaitSchedule};
    use crate::model::RobotParams;
    use crate::terrain::{NamedGap, NamedPlane};

    fn box_terrain() -> Terrain {
        let mut t = Terrain::flat();
        t.planes.push(NamedPlane {
            id: "box".into(),
            plane: ContactPlane::horizontal(0.15).with_bounds(Bounds {
                x: [1.0, 1.6],
                y: [-0.5, 0.5],
            }),
        });
        t
    }

    pub(crate) fn gap_terrain() -> Terrain {
        Terrain {
            planes: vec![
                NamedPlane {
                    id: "near".into(),
                    plane: ContactPlane::horizontal(0.0).with_bounds(Bounds {
                        x: [-5.0, 1.0],
                        y: [-5.0, 5.0],
                    }),
                },
                NamedPlane {
                    id: "far".into(),
                    plane: ContactPlane::horizontal(0.1).with_bounds(Bounds {
                        x: [1.3, 8.0],
                        y: [-5.0, 5.0],
                    }),
                },
            ],
            gaps: vec![NamedGap {
                id: "gap".into(),
                gap: GapVolume {
                    x: [1.0, 1.3],
                    y: [-5.0, 5.0],
                    z: [-1.0, 1.0],
                },
            }],
            spheres: vec![],
        }
    }

    #[test]
    fn flat_projection_drops_to_ground() {
        let (p, plane) = project_to_surface(&Vector3::new(0.5, 0.1, 0.37), &Terrain::flat(), 0.03).unwrap();
        assert_eq!(p, Vector3::new(0.5, 0.1, 0.0));
        assert_eq!(plane, ContactPlane::horizontal(0.0));
    }

    #[test]
    fn box_edge_margin_shifts_inward() {
        let (p, _) = project_to_surface(&Vector3::new(1.01, 0.0, 0.0), &box_terrain(), 0.03).unwrap();
        assert!((p.x - 1.03).abs() < 1e-12, "{}", p.x);
        assert!((p.z - 0.15).abs() < 1e-12);
    }

    #[test]
    fn ground_foothold_keeps_clear_of_box() {
        let (p, _) = project_to_surface(&Vector3::new(0.99, 0.0, 0.0), &box_terrain(), 0.03).unwrap();
        assert!((p.x - 0.97).abs() < 1e-12);
        assert_eq!(p.z, 0.0);
    }

    #[test]
    fn gap_is_signalled() {
        assert!(matches!(
            project_to_surface(&Vector3::new(1.1, 0.0, 0.0), &gap_terrain(), 0.03),
            Err(Projection::InGap(_))
        ));
    }

    #[test]
    fn gap_coverage_rule() {
        let gap = gap_terrain().gaps[0].gap;
        let step = Vector2::new(0.3, 0.0);
        let fwd = resolve_gap(&Vector3::new(1.2, 0.0, 0.0), &step, &gap, 0.03);
        assert!((fwd.x - 1.33).abs() < 1e-12);
        let back = resolve_gap(&Vector3::new(1.1, 0.0, 0.0), &step, &gap, 0.03);
        assert!((back.x - 0.97).abs() < 1e-12);
        let tie = resolve_gap(&Vector3::new(1.15, 0.0, 0.0), &step, &gap, 0.03);
        assert!((tie.x - 0.97).abs() < 1e-12);
        assert_eq!(resolve_gap(&fwd, &step, &gap, 0.03), fwd);
        assert_eq!(resolve_gap(&back, &step, &gap, 0.03), back);
    }

    #[test]
    fn sixty_percent_coverage_lands_on_far_plane() {
        let (p, plane) = place_foothold(
            &Vector3::new(1.18, 0.0, 0.0),
            &Vector2::new(0.3, 0.0),
            &gap_terrain(),
            0.03,
        )
        .unwrap();
        assert!((p.z - 0.1).abs() < 1e-12);
        assert!(plane.residual(&p).abs() < 1e-12);
    }

    #[test]
    fn flat_sequence_moves_swing_feet_by_one_step() {
        let params = RobotParams::default();
        let x0 = RobotState {
            foot_positions: std::array::from_fn(|i| {
                let mut f = params.stance_offset(i);
                f.z = 0.0;
                f
            }),
            ..RobotState::standing(&params, Vector3::new(0.0, 0.0, 0.45))
        };
        let mut pattern = CyclicPattern::lateral_walk(0.3, 0.25, 0.3);
        let schedule = GaitSchedule::initial(&mut pattern, 0.3, 4, 0.02).unwrap();
        let seq = generate_nominal_sequence(
            &x0,
            &[ContactPlane::horizontal(0.0); 4],
            &TaskGoal::forward(0.15, 0.45),
            &schedule,
            &Terrain::flat(),
        )
        .unwrap();
        assert_eq!(seq.phases.len(), 5);
        let rh = seq.phases[1].feet[3] - x0.foot_positions[3];
        assert!((rh - Vector3::new(0.15, 0.0, 0.0)).amax() < 1e-12);
        assert!((seq.phases[4].base.x - 0.075).abs() < 1e-12);
        assert!((seq.phases[4].base.z - 0.45).abs() < 1e-12);
        for ph in &seq.phases {
            for (f, pl) in ph.feet.iter().zip(&ph.planes) {
                assert!(pl.residual(f).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_interior_foothold_lands_on_top() {
        let (p, _) = project_to_surface(&Vector3::new(1.3, 0.1, 0.0), &box_terrain(), 0.03).unwrap();
        assert!((p.z - 0.15).abs() < 1e-12);
    }
}
