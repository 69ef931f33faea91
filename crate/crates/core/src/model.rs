//! Reduced momentum model of a quadruped: a single rigid body driven by
//! point contact forces, with feet modelled as first-order kinematic
//! points in Cartesian space.
//!
//! State layout (24 entries for four legs):
//!
//! ```text
//! x = [ p (3) | θ (3) | ṗ (3) | ω_b (3) | r_0 .. r_3 (12) ]
//! u = [ λ_0 .. λ_3 (12) | v_0 .. v_3 (12) ]
//! ```
//!
//! `p`, `ṗ`, `r_i`, `λ_i`, `v_i` are world-frame quantities; `θ` are
//! intrinsic X-Y-Z Euler angles and `ω_b` is the body-frame angular rate.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of legs. The model is written for quadrupeds only.
pub const LEG_COUNT: usize = 4;
/// Dimension of the state vector.
pub const STATE_DIM: usize = 12 + 3 * LEG_COUNT;
/// Dimension of the input vector.
pub const INPUT_DIM: usize = 6 * LEG_COUNT;

pub const IDX_POS: usize = 0;
pub const IDX_ORI: usize = 3;
pub const IDX_LIN_VEL: usize = 6;
pub const IDX_ANG_VEL: usize = 9;
pub const IDX_FEET: usize = 12;
pub const IDX_FORCES: usize = 0;
pub const IDX_FOOT_VEL: usize = 3 * LEG_COUNT;

/// Distance to the pitch singularity at which the Euler parametrisation is rejected.
pub const GIMBAL_MARGIN: f64 = 1e-4;

#[inline]
pub fn foot_index(leg: usize) -> usize {
    IDX_FEET + 3 * leg
}

#[inline]
pub fn force_index(leg: usize) -> usize {
    IDX_FORCES + 3 * leg
}

#[inline]
pub fn foot_velocity_index(leg: usize) -> usize {
    IDX_FOOT_VEL + 3 * leg
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ModelError {
    #[error("orientation too close to the Euler pitch singularity (pitch = {pitch} rad)")]
    SingularOrientation { pitch: f64 },
    #[error("state or input has wrong length: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("integration step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Leg identifiers in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Leg {
    LF,
    RF,
    LH,
    RH,
}

impl Leg {
    pub const ALL: [Leg; LEG_COUNT] = [Leg::LF, Leg::RF, Leg::LH, Leg::RH];

    pub fn index(self) -> usize {
        match self {
            Leg::LF => 0,
            Leg::RF => 1,
            Leg::LH => 2,
            Leg::RH => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Leg> {
        Leg::ALL.get(i).copied()
    }
}

/// Physical parameters of the rigid body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    /// Total mass (kg).
    pub mass: f64,
    /// Torso inertia in the base frame (kg·m²), row-major.
    pub inertia: [[f64; 3]; 3],
    /// Gravity vector (m/s²).
    pub gravity: [f64; 3],
    /// Nominal foot positions in the base frame (m), leg order LF, RF, LH, RH.
    pub nominal_stance: [[f64; 3]; LEG_COUNT],
    /// Nominal base height above the feet (m).
    pub nominal_height: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self::with_stance(0.3, 0.2, 0.45)
    }
}

impl RobotParams {
    /// A 30 kg body with a rectangular stance of the given half-length and
    /// half-width.
    pub fn with_stance(half_length: f64, half_width: f64, height: f64) -> Self {
        Self {
            mass: 30.0,
            inertia: [[0.88, 0.0, 0.0], [0.0, 1.42, 0.0], [0.0, 0.0, 1.57]],
            gravity: [0.0, 0.0, -9.81],
            nominal_stance: [
                [half_length, half_width, -height],
                [half_length, -half_width, -height],
                [-half_length, half_width, -height],
                [-half_length, -half_width, -height],
            ],
            nominal_height: height,
        }
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.inertia[r][c])
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn stance_offset(&self, leg: usize) -> Vector3<f64> {
        Vector3::from(self.nominal_stance[leg])
    }

    /// Nominal fore-aft and lateral distances between feet.
    pub fn stance_spacing(&self) -> (f64, f64) {
        let n = &self.nominal_stance;
        ((n[0][0] - n[2][0]).abs(), (n[0][1] - n[1][1]).abs())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        let i = self.inertia_matrix();
        if (i - i.transpose()).abs().max() > 1e-12 {
            return Err("inertia must be symmetric".into());
        }
        if i.cholesky().is_none() {
            return Err("inertia must be positive definite".into());
        }
        if !(self.nominal_height > 0.0) {
            return Err("nominal height must be positive".into());
        }
        let n = &self.nominal_stance;
        let sym = (n[0][0] - n[1][0]).abs()
            + (n[2][0] - n[3][0]).abs()
            + (n[0][1] + n[1][1]).abs()
            + (n[2][1] + n[3][1]).abs()
            + (n[0][0] + n[2][0]).abs()
            + (n[0][1] - n[2][1]).abs();
        if sym > 1e-9 {
            return Err("nominal stance must be symmetric about the base x and y axes".into());
        }
        Ok(())
    }
}

/// Structured view of the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub base_position: Vector3<f64>,
    pub base_orientation: Vector3<f64>,
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub foot_positions: [Vector3<f64>; LEG_COUNT],
}

impl RobotState {
    /// Standing still at the nominal posture with the base at `base`.
    pub fn standing(params: &RobotParams, base: Vector3<f64>) -> Self {
        let feet = std::array::from_fn(|i| base + params.stance_offset(i));
        Self {
            base_position: base,
            base_orientation: Vector3::zeros(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            foot_positions: feet,
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(IDX_POS).copy_from(&self.base_position);
        x.fixed_rows_mut::<3>(IDX_ORI).copy_from(&self.base_orientation);
        x.fixed_rows_mut::<3>(IDX_LIN_VEL).copy_from(&self.base_linear_velocity);
        x.fixed_rows_mut::<3>(IDX_ANG_VEL).copy_from(&self.base_angular_velocity);
        for (i, r) in self.foot_positions.iter().enumerate() {
            x.fixed_rows_mut::<3>(foot_index(i)).copy_from(r);
        }
        x
    }

    pub fn from_slice(x: &[f64]) -> Result<Self, ModelError> {
        check_len(x.len(), STATE_DIM)?;
        Ok(Self {
            base_position: vec3(x, IDX_POS),
            base_orientation: vec3(x, IDX_ORI),
            base_linear_velocity: vec3(x, IDX_LIN_VEL),
            base_angular_velocity: vec3(x, IDX_ANG_VEL),
            foot_positions: std::array::from_fn(|i| vec3(x, foot_index(i))),
        })
    }
}

/// Structured view of the input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub contact_forces: [Vector3<f64>; LEG_COUNT],
    pub foot_velocities: [Vector3<f64>; LEG_COUNT],
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            contact_forces: [Vector3::zeros(); LEG_COUNT],
            foot_velocities: [Vector3::zeros(); LEG_COUNT],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut u = DVector::zeros(INPUT_DIM);
        for i in 0..LEG_COUNT {
            u.fixed_rows_mut::<3>(force_index(i)).copy_from(&self.contact_forces[i]);
            u.fixed_rows_mut::<3>(foot_velocity_index(i)).copy_from(&self.foot_velocities[i]);
        }
        u
    }

    pub fn from_slice(u: &[f64]) -> Result<Self, ModelError> {
        check_len(u.len(), INPUT_DIM)?;
        Ok(Self {
            contact_forces: std::array::from_fn(|i| vec3(u, force_index(i))),
            foot_velocities: std::array::from_fn(|i| vec3(u, foot_velocity_index(i))),
        })
    }
}

#[inline]
pub(crate) fn vec3(v: &[f64], at: usize) -> Vector3<f64> {
    Vector3::new(v[at], v[at + 1], v[at + 2])
}

fn check_len(actual: usize, expected: usize) -> Result<(), ModelError> {
    if actual != expected {
        Err(ModelError::Dimension { expected, actual })
    } else {
        Ok(())
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Base-to-world rotation for intrinsic X-Y-Z Euler angles,
/// `R = R_x(θ_x) R_y(θ_y) R_z(θ_z)`.
pub fn euler_xyz_rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    rot_x(theta.x) * rot_y(theta.y) * rot_z(theta.z)
}

/// Partial derivatives of [`euler_xyz_rotation`] with respect to each angle.
pub fn euler_xyz_rotation_partials(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(theta.x), rot_y(theta.y), rot_z(theta.z));
    [
        drot_x(theta.x) * ry * rz,
        rx * drot_y(theta.y) * rz,
        rx * ry * drot_z(theta.z),
    ]
}

fn check_pitch(theta: &Vector3<f64>) -> Result<(f64, f64), ModelError> {
    let c = theta.y.cos();
    if c.abs() <= GIMBAL_MARGIN.sin() {
        return Err(ModelError::SingularOrientation { pitch: theta.y });
    }
    Ok((theta.y.sin(), c))
}

/// Map from body angular velocity to XYZ Euler angle rates.
pub fn euler_rate_matrix(theta: &Vector3<f64>) -> Result<Matrix3<f64>, ModelError> {
    let (sy, cy) = check_pitch(theta)?;
    let (sz, cz) = theta.z.sin_cos();
    let ty = sy / cy;
    Ok(Matrix3::new(
        cz / cy,
        -sz / cy,
        0.0,
        sz,
        cz,
        0.0,
        -ty * cz,
        ty * sz,
        1.0,
    ))
}

/// Partial derivatives of [`euler_rate_matrix`] with respect to `θ_y` and `θ_z`
/// (it does not depend on `θ_x`).
fn euler_rate_partials(theta: &Vector3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>), ModelError> {
    let (sy, cy) = check_pitch(theta)?;
    let (sz, cz) = theta.z.sin_cos();
    let c2 = cy * cy;
    let ty = sy / cy;
    let d_pitch = Matrix3::new(
        cz * sy / c2,
        -sz * sy / c2,
        0.0,
        0.0,
        0.0,
        0.0,
        -cz / c2,
        sz / c2,
        0.0,
    );
    let d_yaw = Matrix3::new(
        -sz / cy,
        -cz / cy,
        0.0,
        cz,
        -sz,
        0.0,
        ty * sz,
        ty * cz,
        0.0,
    );
    Ok((d_pitch, d_yaw))
}

/// Precomputed inverse inertia and gravity so the hot path avoids
/// re-deriving them per call.
#[derive(Debug, Clone)]
pub struct RigidBodyModel {
    pub params: RobotParams,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    gravity: Vector3<f64>,
}

impl RigidBodyModel {
    pub fn new(params: RobotParams) -> Self {
        let inertia = params.inertia_matrix();
        let inertia_inv = inertia.try_inverse().unwrap_or_else(Matrix3::zeros);
        let gravity = params.gravity_vector();
        Self {
            params,
            inertia,
            inertia_inv,
            gravity,
        }
    }

    pub fn mass(&self) -> f64 {
        self.params.mass
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    /// World-frame moment of the contact forces about the base position.
    fn contact_torque_world(&self, x: &[f64], u: &[f64]) -> Vector3<f64> {
        let p = vec3(x, IDX_POS);
        (0..LEG_COUNT).fold(Vector3::zeros(), |acc, i| {
            acc + (vec3(x, foot_index(i)) - p).cross(&vec3(u, force_index(i)))
        })
    }

    /// State derivative `ẋ = f(x, u)`.
    pub fn evaluate_dynamics(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>, ModelError> {
        check_len(x.len(), STATE_DIM)?;
        check_len(u.len(), INPUT_DIM)?;
        let theta = vec3(x, IDX_ORI);
        let omega = vec3(x, IDX_ANG_VEL);
        let e = euler_rate_matrix(&theta)?;
        let rot = euler_xyz_rotation(&theta);

        let total_force = (0..LEG_COUNT).fold(Vector3::zeros(), |acc, i| acc + vec3(u, force_index(i)));
        let torque_body = rot.transpose() * self.contact_torque_world(x, u);
        let omega_dot = self.inertia_inv * (torque_body - omega.cross(&(self.inertia * omega)));

        let mut dx = DVector::zeros(STATE_DIM);
        dx.fixed_rows_mut::<3>(IDX_POS).copy_from(&vec3(x, IDX_LIN_VEL));
        dx.fixed_rows_mut::<3>(IDX_ORI).copy_from(&(e * omega));
        dx.fixed_rows_mut::<3>(IDX_LIN_VEL)
            .copy_from(&(total_force / self.params.mass + self.gravity));
        dx.fixed_rows_mut::<3>(IDX_ANG_VEL).copy_from(&omega_dot);
        for i in 0..LEG_COUNT {
            dx.fixed_rows_mut::<3>(foot_index(i))
                .copy_from(&vec3(u, foot_velocity_index(i)));
        }
        Ok(dx)
    }

    /// Analytic Jacobians `(∂f/∂x, ∂f/∂u)`.
    pub fn linearize(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_len(x.len(), STATE_DIM)?;
        check_len(u.len(), INPUT_DIM)?;
        let p = vec3(x, IDX_POS);
        let theta = vec3(x, IDX_ORI);
        let omega = vec3(x, IDX_ANG_VEL);
        let e = euler_rate_matrix(&theta)?;
        let (de_pitch, de_yaw) = euler_rate_partials(&theta)?;
        let rot = euler_xyz_rotation(&theta);
        let drot = euler_xyz_rotation_partials(&theta);
        let rot_t = rot.transpose();
        let torque_world = self.contact_torque_world(x, u);
        let iinv = self.inertia_inv;

        let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);

        a.fixed_view_mut::<3, 3>(IDX_POS, IDX_LIN_VEL)
            .copy_from(&Matrix3::identity());

        // θ̇ = E(θ) ω
        a.fixed_view_mut::<3, 1>(IDX_ORI, IDX_ORI + 1)
            .copy_from(&(de_pitch * omega));
        a.fixed_view_mut::<3, 1>(IDX_ORI, IDX_ORI + 2)
            .copy_from(&(de_yaw * omega));
        a.fixed_view_mut::<3, 3>(IDX_ORI, IDX_ANG_VEL).copy_from(&e);

        // ω̇ = I⁻¹ (Rᵀ Σ (r_i − p) × λ_i − ω × I ω)
        let mut d_p = Matrix3::zeros();
        for i in 0..LEG_COUNT {
            let lambda = vec3(u, force_index(i));
            let arm = vec3(x, foot_index(i)) - p;
            let lam_x = skew(&lambda);
            d_p += lam_x;
            a.fixed_view_mut::<3, 3>(IDX_ANG_VEL, foot_index(i))
                .copy_from(&(-(iinv * rot_t * lam_x)));
            b.fixed_view_mut::<3, 3>(IDX_ANG_VEL, force_index(i))
                .copy_from(&(iinv * rot_t * skew(&arm)));
            b.fixed_view_mut::<3, 3>(IDX_LIN_VEL, force_index(i))
                .copy_from(&(Matrix3::identity() / self.params.mass));
            b.fixed_view_mut::<3, 3>(foot_index(i), foot_velocity_index(i))
                .copy_from(&Matrix3::identity());
        }
        a.fixed_view_mut::<3, 3>(IDX_ANG_VEL, IDX_POS)
            .copy_from(&(iinv * rot_t * d_p));
        for (j, dr) in drot.iter().enumerate() {
            a.fixed_view_mut::<3, 1>(IDX_ANG_VEL, IDX_ORI + j)
                .copy_from(&(iinv * dr.transpose() * torque_world));
        }
        let gyro = skew(&omega) * self.inertia - skew(&(self.inertia * omega));
        a.fixed_view_mut::<3, 3>(IDX_ANG_VEL, IDX_ANG_VEL)
            .copy_from(&(-(iinv * gyro)));
        Ok((a, b))
    }

    /// One explicit RK4 step with the input held constant.
    pub fn integrate_step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<DVector<f64>, ModelError> {
        if !(dt > 0.0) {
            return Err(ModelError::NonPositiveStep(dt));
        }
        let x0 = DVector::from_column_slice(x);
        let k1 = self.evaluate_dynamics(x, u)?;
        let x2 = &x0 + &k1 * (0.5 * dt);
        let k2 = self.evaluate_dynamics(x2.as_slice(), u)?;
        let x3 = &x0 + &k2 * (0.5 * dt);
        let k3 = self.evaluate_dynamics(x3.as_slice(), u)?;
        let x4 = &x0 + &k3 * dt;
        let k4 = self.evaluate_dynamics(x4.as_slice(), u)?;
        Ok(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
    }

    /// RK4 step together with its exact Jacobians with respect to the
    /// initial state and the held input.
    pub fn integrate_step_with_jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        dt: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), ModelError> {
        if !(dt > 0.0) {
            return Err(ModelError::NonPositiveStep(dt));
        }
        let n = STATE_DIM;
        let eye = DMatrix::<f64>::identity(n, n);
        let x0 = DVector::from_column_slice(x);

        let k1 = self.evaluate_dynamics(x, u)?;
        let (a1, b1) = self.linearize(x, u)?;
        let dk1x = a1;
        let dk1u = b1;

        let x2 = &x0 + &k1 * (0.5 * dt);
        let k2 = self.evaluate_dynamics(x2.as_slice(), u)?;
        let (a2, b2) = self.linearize(x2.as_slice(), u)?;
        let dk2x = &a2 * (&eye + &dk1x * (0.5 * dt));
        let dk2u = &a2 * &dk1u * (0.5 * dt) + b2;

        let x3 = &x0 + &k2 * (0.5 * dt);
        let k3 = self.evaluate_dynamics(x3.as_slice(), u)?;
        let (a3, b3) = self.linearize(x3.as_slice(), u)?;
        let dk3x = &a3 * (&eye + &dk2x * (0.5 * dt));
        let dk3u = &a3 * &dk2u * (0.5 * dt) + b3;

        let x4 = &x0 + &k3 * dt;
        let k4 = self.evaluate_dynamics(x4.as_slice(), u)?;
        let (a4, b4) = self.linearize(x4.as_slice(), u)?;
        let dk4x = &a4 * (&eye + &dk3x * dt);
        let dk4u = &a4 * &dk3u * dt + b4;

        let h6 = dt / 6.0;
        let next = &x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * h6;
        let ad = eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * h6;
        let bd = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * h6;
        Ok((next, ad, bd))
    }

    /// Input that holds the body still with weight shared equally among the
    /// given stance legs.
    pub fn gravity_compensation(&self, stance: &[bool; LEG_COUNT]) -> DVector<f64> {
        let count = stance.iter().filter(|s| **s).count();
        let mut u = DVector::zeros(INPUT_DIM);
        if count == 0 {
            return u;
        }
        let share = -self.gravity * self.params.mass / count as f64;
        for (i, _) in stance.iter().enumerate().filter(|(_, s)| **s) {
            u.fixed_rows_mut::<3>(force_index(i)).copy_from(&share);
        }
        u
    }
}
