//! Task-space tracker on the reduced model: feedforward plan forces with a
//! PD wrench correction on the base, and swing feet on quintic splines.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use stride_core::contact::{tangent_basis, FrictionModel};
use stride_core::model::*;
use stride_core::swing::SwingSpline;
use stride_core::terrain::ContactPlane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerGains {
    /// Base position stiffness per unit mass (1/s²).
    pub position_stiffness: [f64; 3],
    pub position_damping: [f64; 3],
    /// Base orientation stiffness per unit inertia (1/s²).
    pub orientation_stiffness: [f64; 3],
    pub orientation_damping: [f64; 3],
    /// Swing-foot position gain (1/s); feet are velocity controlled.
    pub foot_stiffness: [f64; 3],
}

impl Default for TrackerGains {
    fn default() -> Self {
        Self {
            position_stiffness: [100.0; 3],
            position_damping: [20.0; 3],
            orientation_stiffness: [100.0; 3],
            orientation_damping: [20.0; 3],
            foot_stiffness: [50.0; 3],
        }
    }
}

impl TrackerGains {
    /// Pure feedforward playback.
    pub fn zero() -> Self {
        Self {
            position_stiffness: [0.0; 3],
            position_damping: [0.0; 3],
            orientation_stiffness: [0.0; 3],
            orientation_damping: [0.0; 3],
            foot_stiffness: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .position_stiffness
            .iter()
            .chain(&self.position_damping)
            .chain(&self.orientation_stiffness)
            .chain(&self.orientation_damping)
            .chain(&self.foot_stiffness);
        if all.clone().any(|g| !(*g >= 0.0)) {
            return Err("tracker gains must be non-negative".into());
        }
        Ok(())
    }
}

/// Plan sample at one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    pub contact: [bool; LEG_COUNT],
}

/// Swing foot in flight: its spline and the time since lift-off.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingTrack {
    pub spline: SwingSpline,
    pub elapsed: f64,
}

/// Everything the tracker needs besides the plan and the plant state.
pub struct TrackerContext<'a> {
    pub model: &'a RigidBodyModel,
    pub gains: &'a TrackerGains,
    pub friction: &'a FrictionModel,
    pub planes: &'a [ContactPlane; LEG_COUNT],
    pub swings: &'a [Option<SwingTrack>; LEG_COUNT],
    pub dt: f64,
}

/// Projects a contact force onto the friction pyramid of `plane` and the
/// vertical force bound.
pub fn project_force(lambda: &Vector3<f64>, plane: &ContactPlane, friction: &FrictionModel) -> Vector3<f64> {
    let n = plane.normal_vector();
    let (t1, t2) = tangent_basis(&n);
    let normal = lambda.dot(&n).max(0.0);
    let (mut a, mut b) = (lambda.dot(&t1), lambda.dot(&t2));
    let faces = friction.face_count;
    let slope = friction.mu * (std::f64::consts::PI / faces as f64).cos();
    let widest = (0..faces)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / faces as f64;
            a * phi.cos() + b * phi.sin()
        })
        .fold(0.0, f64::max);
    if lambda.dot(&n) >= 0.0 && widest <= slope * normal && (0.0..=friction.lambda_z_max).contains(&lambda.z) {
        return *lambda;
    }
    if widest > slope * normal {
        let s = if widest > 0.0 { slope * normal / widest } else { 0.0 };
        a *= s;
        b *= s;
    }
    let mut f = t1 * a + t2 * b + n * normal;
    if f.z < 0.0 {
        return Vector3::zeros();
    }
    if f.z > friction.lambda_z_max {
        f *= friction.lambda_z_max / f.z;
    }
    f
}

fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

fn vec3(v: &DVector<f64>, i: usize) -> Vector3<f64> {
    v.fixed_rows::<3>(i).into_owned()
}

/// Plant input for one control interval.
pub fn tracker_command(reference: &Reference, x: &DVector<f64>, ctx: &TrackerContext) -> DVector<f64> {
    let g = ctx.gains;
    let params = &ctx.model.params;
    let mut u = DVector::zeros(INPUT_DIM);

    let p = vec3(x, IDX_POS);
    let theta = vec3(x, IDX_ORI);
    let rot = euler_xyz_rotation(&theta);
    let rot_ref = euler_xyz_rotation(&vec3(&reference.state, IDX_ORI));
    let inertia = params.inertia_matrix();

    let e_p = vec3(&reference.state, IDX_POS) - p;
    let e_v = vec3(&reference.state, IDX_LIN_VEL) - vec3(x, IDX_LIN_VEL);
    let force = Vector3::from_fn(|i, _| params.mass * (g.position_stiffness[i] * e_p[i] + g.position_damping[i] * e_v[i]));
    // Attitude error in the base frame.
    let e_r = rot.transpose() * vee_skew(&(rot_ref * rot.transpose() - rot * rot_ref.transpose()));
    let e_w = vec3(&reference.state, IDX_ANG_VEL) - vec3(x, IDX_ANG_VEL);
    let accel = Vector3::from_fn(|i, _| g.orientation_stiffness[i] * e_r[i] + g.orientation_damping[i] * e_w[i]);
    let torque = rot * (inertia * accel);

    let stance: Vec<usize> = (0..LEG_COUNT).filter(|&i| reference.contact[i]).collect();
    let correction = if stance.is_empty() || (force.norm() + torque.norm()) == 0.0 {
        DVector::zeros(3 * stance.len())
    } else {
        let mut gmat = DMatrix::zeros(6, 3 * stance.len());
        for (k, &leg) in stance.iter().enumerate() {
            let arm = vec3(x, foot_index(leg)) - p;
            gmat.fixed_view_mut::<3, 3>(0, 3 * k).copy_from(&Matrix3::identity());
            gmat.fixed_view_mut::<3, 3>(3, 3 * k).copy_from(&skew(&arm));
        }
        let wrench = DVector::from_iterator(6, force.iter().chain(torque.iter()).copied());
        let pinv = gmat.pseudo_inverse(1e-9).expect("pseudo-inverse with positive tolerance");
        pinv * wrench
    };
    for (k, &leg) in stance.iter().enumerate() {
        let ff = vec3(&reference.input, force_index(leg));
        let lambda = ff + correction.fixed_rows::<3>(3 * k);
        let applied = project_force(&lambda, &ctx.planes[leg], ctx.friction);
        u.fixed_rows_mut::<3>(force_index(leg)).copy_from(&applied);
    }

    for leg in 0..LEG_COUNT {
        if reference.contact[leg] {
            continue;
        }
        if let Some(track) = &ctx.swings[leg] {
            let t = track.elapsed.min(track.spline.duration);
            let mid = (t + 0.5 * ctx.dt).min(track.spline.duration);
            let now = track.spline.evaluate(t).expect("clamped into the swing");
            let ahead = track.spline.evaluate(mid).expect("clamped into the swing");
            let r = vec3(x, foot_index(leg));
            let v = ahead.velocity
                + Vector3::from_fn(|i, _| g.foot_stiffness[i] * (now.position[i] - r[i]));
            u.fixed_rows_mut::<3>(foot_velocity_index(leg)).copy_from(&v);
        }
    }
    u
}

/// Advances the plant by one control interval under the tracker.
pub fn track_interval(
    reference: &Reference,
    x: &DVector<f64>,
    ctx: &TrackerContext,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    let u = tracker_command(reference, x, ctx);
    let next = ctx.model.integrate_step(x.as_slice(), u.as_slice(), ctx.dt)?;
    Ok((next, u))
}
