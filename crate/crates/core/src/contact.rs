//! Phase-switched contact constraints.
//!
//! Stance legs: stationary foot, unilateral bounded normal force inside a
//! linearised friction pyramid, foot on its contact plane. Swing legs: zero
//! contact force and clearance from spherical obstacles.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    foot_index, force_index, foot_velocity_index, vec3, INPUT_DIM, LEG_COUNT, STATE_DIM,
};
use crate::slq::{ConstraintRows, NodeConstraints};
use crate::terrain::{Bounds, ContactPlane, SphereObstacle, Terrain};

/// Tolerance on the plane equation before a stance foot is re-anchored.
pub const REANCHOR_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionModel {
    pub mu: f64,
    #[serde(default = "default_faces")]
    pub face_count: usize,
    /// Upper bound on the vertical contact force (N).
    pub lambda_z_max: f64,
}

fn default_faces() -> usize {
    4
}

impl FrictionModel {
    /// μ = 0.7 and a bound of twice the robot weight.
    pub fn for_mass(mass: f64, gravity: f64) -> Self {
        Self {
            mu: 0.7,
            face_count: 4,
            lambda_z_max: 2.0 * mass * gravity.abs(),
        }
    }

    pub fn validate(&self) -> Result<(), ContactError> {
        if !(self.mu > 0.0) || !(self.lambda_z_max > 0.0) || self.face_count < 4 {
            return Err(ContactError::InvalidFriction(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContactError {
    #[error("foot at ({0:.3}, {1:.3}) projects into a gap")]
    InGap(f64, f64),
    #[error("no contact plane covers ({0:.3}, {1:.3})")]
    NoPlane(f64, f64),
    #[error("invalid friction model {0:?}")]
    InvalidFriction(FrictionModel),
    #[error("constraint set expects state length {STATE_DIM} and input length {INPUT_DIM}, got {0} and {1}")]
    Dimension(usize, usize),
}

/// Orthonormal tangent basis of a plane.
pub fn tangent_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = (seed - normal * normal.dot(&seed)).normalize();
    let t2 = normal.cross(&t1);
    (t1, t2)
}

/// Inscribed polyhedral friction cone `U` with `Uλ ≤ 0` on the feasible side.
///
/// Face `k` has outward direction `cos φ_k t1 + sin φ_k t2`, `φ_k = 2πk/F`,
/// and coefficient `μ cos(π/F)` so that every vertex of the polygon lies on
/// the exact cone.
pub fn friction_pyramid_matrix(model: &FrictionModel, plane: &ContactPlane) -> DMatrix<f64> {
    let n = plane.normal_vector();
    let (t1, t2) = tangent_basis(&n);
    let faces = model.face_count;
    let slope = model.mu * (std::f64::consts::PI / faces as f64).cos();
    let mut u = DMatrix::zeros(faces, 3);
    for k in 0..faces {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / faces as f64;
        let row = t1 * phi.cos() + t2 * phi.sin() - n * slope;
        u.row_mut(k).copy_from(&row.transpose());
    }
    u
}

/// Constraint role of one leg at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct LegConstraint {
    /// Stance (true) or swing (false) input constraints for the interval
    /// starting at this node.
    pub contact: bool,
    /// Surface the foot must lie on at this node.
    pub plane: Option<ContactPlane>,
    /// The surface row follows from earlier nodes (stationary stance foot).
    pub plane_implied: bool,
    /// Rectangle the foot must stay within at this node.
    pub region: Option<Bounds>,
    /// Keep the foot clear of the obstacle list at this node.
    pub avoid_obstacles: bool,
}

impl LegConstraint {
    pub fn stance(plane: ContactPlane) -> Self {
        Self {
            contact: true,
            plane: Some(plane),
            plane_implied: false,
            region: None,
            avoid_obstacles: false,
        }
    }

    pub fn swing() -> Self {
        Self {
            contact: false,
            plane: None,
            plane_implied: false,
            region: None,
            avoid_obstacles: true,
        }
    }
}

/// What a constraint row encodes, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "leg")]
pub enum ConstraintKind {
    StanceVelocity(usize),
    SwingForce(usize),
    Surface(usize),
    NormalForceLower(usize),
    NormalForceUpper(usize),
    FrictionFace(usize),
    Region(usize),
    Obstacle(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConstraintSet {
    pub legs: [LegConstraint; LEG_COUNT],
    pub friction: FrictionModel,
    pub obstacles: Vec<SphereObstacle>,
}

impl PhaseConstraintSet {
    /// Stance legs on their planes, swing legs avoiding the obstacles.
    pub fn from_contacts(
        contact: [bool; LEG_COUNT],
        planes: [ContactPlane; LEG_COUNT],
        friction: FrictionModel,
        obstacles: Vec<SphereObstacle>,
    ) -> Self {
        let legs = std::array::from_fn(|i| {
            if contact[i] {
                LegConstraint::stance(planes[i])
            } else {
                LegConstraint::swing()
            }
        });
        Self {
            legs,
            friction,
            obstacles,
        }
    }

    /// Row labels in evaluation order.
    pub fn labels(&self, with_input: bool) -> (Vec<ConstraintKind>, Vec<ConstraintKind>) {
        let mut eq = Vec::new();
        let mut ineq = Vec::new();
        for (i, leg) in self.legs.iter().enumerate() {
            if with_input {
                if leg.contact {
                    eq.extend([ConstraintKind::StanceVelocity(i); 3]);
                    ineq.push(ConstraintKind::NormalForceLower(i));
                    ineq.push(ConstraintKind::NormalForceUpper(i));
                    if leg.plane.is_some() {
                        ineq.extend(std::iter::repeat(ConstraintKind::FrictionFace(i)).take(self.friction.face_count));
                    }
                } else {
                    eq.extend([ConstraintKind::SwingForce(i); 3]);
                }
            }
            if leg.plane.is_some() {
                eq.push(ConstraintKind::Surface(i));
            }
            if leg.region.is_some() {
                ineq.extend([ConstraintKind::Region(i); 4]);
            }
            if leg.avoid_obstacles {
                ineq.extend(std::iter::repeat(ConstraintKind::Obstacle(i)).take(self.obstacles.len()));
            }
        }
        (eq, ineq)
    }
}

/// Residuals and Jacobians of the constraints active at one node.
///
/// With `u = None` (last node) only state constraints are produced. A stance
/// leg without an assigned plane falls back to a vertical-normal friction
/// pyramid.
pub fn evaluate_node_constraints(
    x: &[f64],
    u: Option<&[f64]>,
    set: &PhaseConstraintSet,
) -> Result<NodeConstraints, ContactError> {
    let ulen = u.map_or(INPUT_DIM, |u| u.len());
    if x.len() != STATE_DIM || ulen != INPUT_DIM {
        return Err(ContactError::Dimension(x.len(), ulen));
    }
    let mut eq = ConstraintRows::new(STATE_DIM, INPUT_DIM);
    let mut ineq = ConstraintRows::new(STATE_DIM, INPUT_DIM);
    let b_u = set.friction.lambda_z_max;

    for (i, leg) in set.legs.iter().enumerate() {
        let ri = foot_index(i);
        if let Some(u) = u {
            let fi = force_index(i);
            let vi = foot_velocity_index(i);
            if leg.contact {
                for a in 0..3 {
                    eq.push(u[vi + a], &[], &[(vi + a, 1.0)], false);
                }
                let lz = u[fi + 2];
                ineq.push(lz, &[], &[(fi + 2, 1.0)], false);
                ineq.push(b_u - lz, &[], &[(fi + 2, -1.0)], false);
                if let Some(plane) = &leg.plane {
                    let pyr = friction_pyramid_matrix(&set.friction, plane);
                    let lambda = vec3(u, fi);
                    for k in 0..pyr.nrows() {
                        let row = [pyr[(k, 0)], pyr[(k, 1)], pyr[(k, 2)]];
                        let value = -(row[0] * lambda.x + row[1] * lambda.y + row[2] * lambda.z);
                        ineq.push(
                            value,
                            &[],
                            &[(fi, -row[0]), (fi + 1, -row[1]), (fi + 2, -row[2])],
                            false,
                        );
                    }
                }
            } else {
                for a in 0..3 {
                    eq.push(u[fi + a], &[], &[(fi + a, 1.0)], false);
                }
            }
        }
        let r = vec3(x, ri);
        if let Some(plane) = &leg.plane {
            let n = plane.normal;
            eq.push(
                plane.residual(&r),
                &[(ri, n[0]), (ri + 1, n[1]), (ri + 2, n[2])],
                &[],
                leg.plane_implied,
            );
        }
        if let Some(b) = &leg.region {
            ineq.push(r.x - b.x[0], &[(ri, 1.0)], &[], false);
            ineq.push(b.x[1] - r.x, &[(ri, -1.0)], &[], false);
            ineq.push(r.y - b.y[0], &[(ri + 1, 1.0)], &[], false);
            ineq.push(b.y[1] - r.y, &[(ri + 1, -1.0)], &[], false);
        }
        if leg.avoid_obstacles {
            for obs in &set.obstacles {
                let d = r - obs.center_vector();
                ineq.push(
                    d.norm_squared() - obs.radius * obs.radius,
                    &[(ri, 2.0 * d.x), (ri + 1, 2.0 * d.y), (ri + 2, 2.0 * d.z)],
                    &[],
                    false,
                );
            }
        }
    }
    Ok(NodeConstraints {
        equality: eq.finish(),
        inequality: ineq.finish(),
    })
}

/// Contact plane for a stance foot at the start of an optimisation.
///
/// Keeps `previous` while the foot still satisfies it. Otherwise takes the
/// terrain plane under the foot; if the foot does not satisfy that plane
/// either, a plane with the same normal is anchored through the foot.
pub fn assign_contact_plane(
    foot: &Vector3<f64>,
    terrain: &Terrain,
    previous: Option<&ContactPlane>,
) -> Result<ContactPlane, ContactError> {
    if let Some(prev) = previous {
        if prev.residual(foot).abs() <= REANCHOR_TOLERANCE && prev.covers(foot.x, foot.y) {
            return Ok(*prev);
        }
    }
    if terrain.gap_at(foot.x, foot.y).is_some() {
        return Err(ContactError::InGap(foot.x, foot.y));
    }
    let plane = terrain
        .support_plane(foot.x, foot.y)
        .ok_or(ContactError::NoPlane(foot.x, foot.y))?;
    if plane.residual(foot).abs() <= REANCHOR_TOLERANCE {
        return Ok(*plane);
    }
    let template = previous.unwrap_or(plane);
    let mut anchored = template.reanchored(foot);
    anchored.bounds = plane.bounds;
    Ok(anchored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControlInput, RobotParams, RobotState};
    use crate::terrain::NamedPlane;

    fn friction() -> FrictionModel {
        FrictionModel {
            mu: 0.7,
            face_count: 4,
            lambda_z_max: 600.0,
        }
    }

    fn pyramid_residuals(lambda: Vector3<f64>) -> Vec<f64> {
        let u = friction_pyramid_matrix(&friction(), &ContactPlane::horizontal(0.0));
        (&u * lambda).iter().copied().collect()
    }

    #[test]
    fn axial_force_is_strictly_inside() {
        assert!(pyramid_residuals(Vector3::new(0.0, 0.0, 100.0)).iter().all(|r| *r < 0.0));
    }

    #[test]
    fn steep_force_is_outside() {
        // Tangential 71 N against 100 N normal exceeds even the exact cone (70 N).
        assert!(pyramid_residuals(Vector3::new(71.0, 0.0, 100.0)).iter().any(|r| *r > 0.0));
    }

    #[test]
    fn zero_force_is_on_the_boundary() {
        assert!(pyramid_residuals(Vector3::zeros()).iter().all(|r| *r == 0.0));
    }

    #[test]
    fn pyramid_never_accepts_forces_outside_the_exact_cone() {
        for faces in [4, 6, 8] {
            let model = FrictionModel { face_count: faces, ..friction() };
            let plane = ContactPlane::horizontal(0.0);
            let u = friction_pyramid_matrix(&model, &plane);
            for k in 0..360 {
                let phi = (k as f64).to_radians();
                // Just outside the exact cone.
                let lam = Vector3::new(phi.cos() * 70.01, phi.sin() * 70.01, 100.0);
                assert!((&u * lam).max() > 0.0, "faces {faces}, angle {k}");
            }
        }
    }

    #[test]
    fn stance_on_plane_is_feasible() {
        let params = RobotParams::default();
        let mut x = RobotState::standing(&params, Vector3::new(0.0, 0.0, 0.45));
        for f in &mut x.foot_positions {
            f.z = 0.0;
        }
        let mut u = ControlInput::zero();
        u.contact_forces = [Vector3::new(0.0, 0.0, 80.0); 4];
        let set = PhaseConstraintSet::from_contacts(
            [true; 4],
            [ContactPlane::horizontal(0.0); 4],
            friction(),
            vec![],
        );
        let c = evaluate_node_constraints(
            x.to_vector().as_slice(),
            Some(u.to_vector().as_slice()),
            &set,
        )
        .unwrap();
        assert_eq!(c.equality.max_abs(), 0.0);
        assert_eq!(c.inequality.max_violation(), 0.0);
        let (eq_labels, ineq_labels) = set.labels(true);
        assert_eq!(eq_labels.len(), c.equality.len());
        assert_eq!(ineq_labels.len(), c.inequality.len());
    }

    #[test]
    fn swing_force_shows_up_as_equality_residual() {
        let params = RobotParams::default();
        let x = RobotState::standing(&params, Vector3::new(0.0, 0.0, 0.45));
        let mut u = ControlInput::zero();
        u.contact_forces[3] = Vector3::new(1.0, 0.0, 0.0);
        let mut contact = [true; 4];
        contact[3] = false;
        let mut set = PhaseConstraintSet::from_contacts(
            contact,
            [ContactPlane::horizontal(-0.45); 4],
            friction(),
            vec![],
        );
        set.legs[3].avoid_obstacles = false;
        let c = evaluate_node_constraints(
            x.to_vector().as_slice(),
            Some(u.to_vector().as_slice()),
            &set,
        )
        .unwrap();
        let (labels, _) = set.labels(true);
        let swing: Vec<f64> = labels
            .iter()
            .zip(c.equality.values.iter())
            .filter(|(l, _)| **l == ConstraintKind::SwingForce(3))
            .map(|(_, v)| *v)
            .collect();
        assert_eq!(swing, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn obstacle_residual_is_squared_clearance() {
        let params = RobotParams::default();
        let x = RobotState::standing(&params, Vector3::new(0.0, 0.0, 0.45));
        let foot = x.foot_positions[0];
        let obstacle = SphereObstacle {
            center: [foot.x + 0.04, foot.y, foot.z],
            radius: 0.05,
        };
        let mut set = PhaseConstraintSet::from_contacts(
            [false, true, true, true],
            [ContactPlane::horizontal(0.0); 4],
            friction(),
            vec![obstacle],
        );
        for leg in set.legs.iter_mut().skip(1) {
            leg.plane = None;
        }
        let c = evaluate_node_constraints(x.to_vector().as_slice(), None, &set).unwrap();
        assert_eq!(c.inequality.len(), 1);
        assert!((c.inequality.values[0] - (0.04f64.powi(2) - 0.05f64.powi(2))).abs() < 1e-15);
        assert!((c.inequality.values[0] + 9e-4).abs() < 1e-15);
    }

    #[test]
    fn plane_assignment() {
        let mut terrain = Terrain::flat();
        terrain.planes.push(NamedPlane {
            id: "box".into(),
            plane: ContactPlane::horizontal(0.15).with_bounds(Bounds {
                x: [1.0, 1.6],
                y: [-0.5, 0.5],
            }),
        });
        let ground = assign_contact_plane(&Vector3::new(0.5, 0.1, 0.0), &terrain, None).unwrap();
        assert_eq!(ground, ContactPlane::horizontal(0.0));
        let top = assign_contact_plane(&Vector3::new(1.2, 0.1, 0.15), &terrain, None).unwrap();
        assert!((top.height_at(1.2, 0.1) - 0.15).abs() < 1e-15);
        assert!(top.bounds.is_some());
        let slipped = assign_contact_plane(
            &Vector3::new(0.5, 0.1, 0.003),
            &terrain,
            Some(&ContactPlane::horizontal(0.0)),
        )
        .unwrap();
        assert_eq!(slipped.normal, [0.0, 0.0, 1.0]);
        assert!((slipped.offset + 0.003).abs() < 1e-15);
    }

    #[test]
    fn plane_assignment_rejects_gaps() {
        let mut terrain = Terrain::flat();
        terrain.gaps.push(crate::terrain::NamedGap {
            id: "gap".into(),
            gap: crate::terrain::GapVolume {
                x: [1.0, 1.3],
                y: [-1.0, 1.0],
                z: [-1.0, 1.0],
            },
        });
        assert_eq!(
            assign_contact_plane(&Vector3::new(1.1, 0.0, 0.0), &terrain, None),
            Err(ContactError::InGap(1.1, 0.0))
        );
    }
}
