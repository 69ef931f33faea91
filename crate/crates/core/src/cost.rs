//! Quadratic tracking costs and the least-squares reachability term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    foot_index, force_index, foot_velocity_index, RobotParams, IDX_ANG_VEL, IDX_LIN_VEL, IDX_ORI,
    IDX_POS, INPUT_DIM, LEG_COUNT, STATE_DIM,
};
use crate::slq::StageQuadratic;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("reachability geometry invalid: {0}")]
    InvalidGeometry(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

/// Diagonal weights of the running, final and input costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q_base: [f64; 12],
    pub q_footstep: [f64; 3 * LEG_COUNT],
    pub q_final: [f64; STATE_DIM],
    pub r_contact: [f64; 3 * LEG_COUNT],
    pub r_velocity: [f64; 3 * LEG_COUNT],
    pub w_reach: f64,
}

/// Scalar weight groups, expanded into [`CostWeights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub position: f64,
    pub orientation: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
    pub footstep: f64,
    pub contact_force: f64,
    pub foot_velocity: f64,
    /// Final weights as a multiple of the running state weights.
    pub final_scale: f64,
    pub reach: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            position: 10.0,
            orientation: 5.0,
            linear_velocity: 1.0,
            angular_velocity: 1.0,
            footstep: 50.0,
            contact_force: 1e-5,
            foot_velocity: 1e-2,
            final_scale: 10.0,
            reach: 1.0,
        }
    }
}

impl WeightConfig {
    pub fn expand(&self) -> CostWeights {
        let mut q_base = [0.0; 12];
        for i in 0..3 {
            q_base[IDX_POS + i] = self.position;
            q_base[IDX_ORI + i] = self.orientation;
            q_base[IDX_LIN_VEL + i] = self.linear_velocity;
            q_base[IDX_ANG_VEL + i] = self.angular_velocity;
        }
        let q_footstep = [self.footstep; 3 * LEG_COUNT];
        let mut q_final = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            let w = if i < 12 { q_base[i] } else { q_footstep[i - 12] };
            q_final[i] = self.final_scale * w;
        }
        CostWeights {
            q_base,
            q_footstep,
            q_final,
            r_contact: [self.contact_force; 3 * LEG_COUNT],
            r_velocity: [self.foot_velocity; 3 * LEG_COUNT],
            w_reach: self.reach,
        }
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        WeightConfig::default().expand()
    }
}

impl CostWeights {
    pub fn zero() -> Self {
        Self {
            q_base: [0.0; 12],
            q_footstep: [0.0; 3 * LEG_COUNT],
            q_final: [0.0; STATE_DIM],
            r_contact: [0.0; 3 * LEG_COUNT],
            r_velocity: [0.0; 3 * LEG_COUNT],
            w_reach: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let all = self
            .q_base
            .iter()
            .chain(&self.q_footstep)
            .chain(&self.q_final)
            .chain(&self.r_contact)
            .chain(&self.r_velocity)
            .chain(std::iter::once(&self.w_reach));
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CostError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if (0..3).any(|i| self.q_final[IDX_LIN_VEL + i] <= 0.0) {
            return Err(CostError::InvalidWeights(
                "final base velocity weights must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Running state weights `diag(Q_base, Q_footstep)`.
    pub fn running_state_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(STATE_DIM, self.q_base.iter().chain(&self.q_footstep).copied())
    }

    pub fn input_diagonal(&self) -> DVector<f64> {
        let mut r = DVector::zeros(INPUT_DIM);
        for i in 0..LEG_COUNT {
            for a in 0..3 {
                r[force_index(i) + a] = self.r_contact[3 * i + a];
                r[foot_velocity_index(i) + a] = self.r_velocity[3 * i + a];
            }
        }
        r
    }
}

/// Geometry of the nominal and altered postures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityParams {
    pub h_n: f64,
    pub h_c: f64,
    pub w_x: f64,
    pub w_y: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub q_x: f64,
    pub q_y: f64,
    /// Lever arms of the height-difference terms, taken as `w/2`.
    pub d_x: f64,
    pub d_y: f64,
    /// Derived but not used by the equation set.
    pub r_x: f64,
    pub r_y: f64,
}

impl ReachabilityParams {
    pub fn new(h_n: f64, h_c: f64, w_x: f64, w_y: f64) -> Result<Self, CostError> {
        if !(h_n > 0.0) || !(h_c > 0.0) {
            return Err(CostError::InvalidGeometry("heights must be positive".into()));
        }
        if !(h_c <= w_x) || !(h_c <= w_y) {
            return Err(CostError::InvalidGeometry(format!(
                "h_c = {h_c} exceeds a foot spacing ({w_x}, {w_y})"
            )));
        }
        let alpha_x = (h_c / w_x).asin();
        let alpha_y = (h_c / w_y).asin();
        Ok(Self {
            h_n,
            h_c,
            w_x,
            w_y,
            alpha_x,
            alpha_y,
            q_x: alpha_y.tan() * h_n / h_c,
            q_y: alpha_x.tan() * h_n / h_c,
            d_x: 0.5 * w_x,
            d_y: 0.5 * w_y,
            r_x: 0.5 * alpha_x / h_c,
            r_y: 0.5 * alpha_y / h_c,
        })
    }

    /// From the robot's nominal stance, with altered height `h_c`.
    pub fn from_robot(params: &RobotParams, h_c: f64) -> Result<Self, CostError> {
        let (w_x, w_y) = params.stance_spacing();
        Self::new(params.nominal_height, h_c, w_x, w_y)
    }
}

/// `Q_h = AᵀA` and `x_h = Q_h⁺Aᵀb` of the reachability least-squares system.
#[derive(Debug, Clone, PartialEq)]
pub struct Reachability {
    pub params: ReachabilityParams,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q_h: DMatrix<f64>,
    pub x_h: DVector<f64>,
}

/// Rows of the linear system relating base pose to foot positions.
pub fn reachability_system(p: &ReachabilityParams) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(6, STATE_DIM);
    let mut b = DVector::zeros(6);
    // Sign patterns of (r0 − r1 + r2 − r3) and (−r0 − r1 + r2 + r3).
    let lateral = [1.0, -1.0, 1.0, -1.0];
    let longitudinal = [-1.0, -1.0, 1.0, 1.0];
    for row in 0..3 {
        a[(row, IDX_POS + row)] = 1.0;
    }
    a[(3, IDX_ORI)] = 1.0;
    a[(4, IDX_ORI + 1)] = 1.0;
    a[(5, IDX_ORI + 2)] = 1.0;
    for i in 0..LEG_COUNT {
        let r = foot_index(i);
        a[(0, r)] = -0.25;
        a[(0, r + 2)] = -0.5 * p.d_x * longitudinal[i];
        a[(1, r + 1)] = -0.25;
        a[(1, r + 2)] = -0.5 * p.d_y * lateral[i];
        a[(2, r + 2)] = -0.25;
        a[(3, r + 2)] = -p.q_x * lateral[i];
        a[(4, r + 2)] = -p.q_y * longitudinal[i];
    }
    b[2] = p.h_n;
    (a, b)
}

pub fn build_reachability(params: ReachabilityParams) -> Reachability {
    let (a, b) = reachability_system(&params);
    let q_h = a.transpose() * &a;
    let svd = q_h.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let pinv = svd.pseudo_inverse(tol).expect("both factors were computed");
    let x_h = pinv * a.transpose() * &b;
    Reachability {
        params,
        a,
        b,
        q_h,
        x_h,
    }
}

/// Cost of the locomotion problem for one reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    q_running: DVector<f64>,
    q_final: DVector<f64>,
    r: DVector<f64>,
    reach: Option<(f64, Reachability)>,
}

impl CostModel {
    pub fn new(weights: &CostWeights, reachability: Option<Reachability>) -> Result<Self, CostError> {
        weights.validate()?;
        Ok(Self {
            q_running: weights.running_state_diagonal(),
            q_final: DVector::from_column_slice(&weights.q_final),
            r: weights.input_diagonal(),
            reach: reachability.map(|r| (weights.w_reach, r)),
        })
    }

    pub fn reachability(&self) -> Option<&Reachability> {
        self.reach.as_ref().map(|(_, r)| r)
    }

    fn reach_value(&self, x: &DVector<f64>) -> f64 {
        match &self.reach {
            Some((w, r)) if *w > 0.0 => {
                let d = x - &r.x_h;
                w * d.dot(&(&r.q_h * &d))
            }
            _ => 0.0,
        }
    }

    /// `x̃_dᵀQ_d x̃_d + w x̃_hᵀQ_h x̃_h + uᵀRu`.
    pub fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, x_d: &DVector<f64>) -> f64 {
        let d = x - x_d;
        let state: f64 = d.iter().zip(self.q_running.iter()).map(|(e, q)| q * e * e).sum();
        let input: f64 = u.iter().zip(self.r.iter()).map(|(e, r)| r * e * e).sum();
        state + self.reach_value(x) + input
    }

    pub fn final_cost(&self, x: &DVector<f64>, x_df: &DVector<f64>) -> f64 {
        let d = x - x_df;
        d.iter().zip(self.q_final.iter()).map(|(e, q)| q * e * e).sum()
    }

    /// Exact gradient and Hessian of the running cost.
    pub fn running_quadratic(&self, x: &DVector<f64>, u: &DVector<f64>, x_d: &DVector<f64>) -> StageQuadratic {
        let mut hxx = DMatrix::from_diagonal(&(&self.q_running * 2.0));
        let mut gx = (x - x_d).component_mul(&self.q_running) * 2.0;
        if let Some((w, r)) = &self.reach {
            if *w > 0.0 {
                hxx += &r.q_h * (2.0 * w);
                gx += &r.q_h * (x - &r.x_h) * (2.0 * w);
            }
        }
        StageQuadratic {
            hxx,
            hux: DMatrix::zeros(INPUT_DIM, STATE_DIM),
            huu: DMatrix::from_diagonal(&(&self.r * 2.0)),
            gx,
            gu: u.component_mul(&self.r) * 2.0,
        }
    }

    pub fn final_quadratic(&self, x: &DVector<f64>, x_df: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        (
            DMatrix::from_diagonal(&(&self.q_final * 2.0)),
            (x - x_df).component_mul(&self.q_final) * 2.0,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RobotState;
    use nalgebra::Vector3;

    fn reach() -> Reachability {
        build_reachability(ReachabilityParams::from_robot(&RobotParams::default(), 0.1).unwrap())
    }

    #[test]
    fn zero_at_reference() {
        let model = CostModel::new(&CostWeights::default(), None).unwrap();
        let x = RobotState::standing(&RobotParams::default(), Vector3::new(0.2, 0.0, 0.45)).to_vector();
        assert_eq!(model.running_cost(&x, &DVector::zeros(INPUT_DIM), &x), 0.0);
        assert_eq!(model.final_cost(&x, &x), 0.0);
    }

    #[test]
    fn unit_deviation_costs_its_weight() {
        let weights = CostWeights::default();
        let model = CostModel::new(&weights, None).unwrap();
        let x = DVector::zeros(STATE_DIM);
        let mut y = x.clone();
        y[foot_index(2) + 1] = 1.0;
        assert_eq!(model.final_cost(&y, &x), weights.q_final[foot_index(2) + 1]);
    }

    #[test]
    fn reachability_vanishes_at_nominal_posture() {
        let params = RobotParams::default();
        let r = reach();
        let x = RobotState::standing(&params, Vector3::new(0.4, -0.1, 0.45)).to_vector();
        let d = &x - &r.x_h;
        assert!(d.dot(&(&r.q_h * &d)).abs() < 1e-12);
        assert!((&r.a * &x - &r.b).amax() < 1e-14);
    }

    #[test]
    fn reachability_weight_is_a_gram_matrix() {
        let r = reach();
        assert!((&r.q_h - r.q_h.transpose()).amax() == 0.0);
        let eig = r.q_h.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);
        assert!((&r.q_h * &r.x_h - r.a.transpose() * &r.b).amax() < 1e-10);
    }

    #[test]
    fn rejects_impossible_tilt() {
        assert!(ReachabilityParams::new(0.45, 0.5, 0.6, 0.4).is_err());
        assert!(ReachabilityParams::new(0.45, 0.0, 0.6, 0.4).is_err());
    }

    #[test]
    fn hessians_are_twice_the_weights() {
        let weights = CostWeights::default();
        let model = CostModel::new(&weights, None).unwrap();
        let x = DVector::zeros(STATE_DIM);
        let q = model.running_quadratic(&x, &DVector::zeros(INPUT_DIM), &x);
        assert_eq!(q.huu, DMatrix::from_diagonal(&(weights.input_diagonal() * 2.0)));
        assert_eq!(q.gx.amax(), 0.0);
        assert_eq!(q.gu.amax(), 0.0);
    }

    #[test]
    fn final_velocity_weight_must_be_positive() {
        let mut w = CostWeights::default();
        w.q_final[IDX_LIN_VEL] = 0.0;
        assert!(w.validate().is_err());
        assert!(CostModel::new(&w, None).is_err());
    }
}
