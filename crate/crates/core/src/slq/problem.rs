use nalgebra::{DMatrix, DVector};

use super::SolverError;

/// Stacked constraint rows with their Jacobians.
///
/// Equality blocks are feasible at zero; inequality blocks are feasible when
/// non-negative. Rows flagged `implied` are consequences of constraints
/// imposed elsewhere in the horizon: they are reported in residuals but not
/// handed to the subproblem solver, which would otherwise see a rank
/// deficient constraint set.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub values: DVector<f64>,
    pub jac_x: DMatrix<f64>,
    pub jac_u: DMatrix<f64>,
    pub implied: Vec<bool>,
}

impl ConstraintBlock {
    pub fn empty(nx: usize, nu: usize) -> Self {
        Self {
            values: DVector::zeros(0),
            jac_x: DMatrix::zeros(0, nx),
            jac_u: DMatrix::zeros(0, nu),
            implied: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest absolute value, for equality rows.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest violation `max(0, -h)`, for inequality rows.
    pub fn max_violation(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(-v))
    }

    pub fn l1_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l1_violation(&self) -> f64 {
        self.values.iter().map(|v| (-v).max(0.0)).sum()
    }
}

/// Row-wise builder used by constraint producers.
#[derive(Debug, Clone)]
pub struct ConstraintRows {
    nx: usize,
    nu: usize,
    values: Vec<f64>,
    jx: Vec<Vec<(usize, f64)>>,
    ju: Vec<Vec<(usize, f64)>>,
    implied: Vec<bool>,
}

impl ConstraintRows {
    pub fn new(nx: usize, nu: usize) -> Self {
        Self {
            nx,
            nu,
            values: Vec::new(),
            jx: Vec::new(),
            ju: Vec::new(),
            implied: Vec::new(),
        }
    }

    /// Appends a row given its value and sparse Jacobian entries.
    pub fn push(&mut self, value: f64, jx: &[(usize, f64)], ju: &[(usize, f64)], implied: bool) {
        self.values.push(value);
        self.jx.push(jx.to_vec());
        self.ju.push(ju.to_vec());
        self.implied.push(implied);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn finish(self) -> ConstraintBlock {
        let m = self.values.len();
        let mut jac_x = DMatrix::zeros(m, self.nx);
        let mut jac_u = DMatrix::zeros(m, self.nu);
        for (row, entries) in self.jx.iter().enumerate() {
            for &(c, v) in entries {
                jac_x[(row, c)] += v;
            }
        }
        for (row, entries) in self.ju.iter().enumerate() {
            for &(c, v) in entries {
                jac_u[(row, c)] += v;
            }
        }
        ConstraintBlock {
            values: DVector::from_vec(self.values),
            jac_x,
            jac_u,
            implied: self.implied,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeConstraints {
    pub equality: ConstraintBlock,
    pub inequality: ConstraintBlock,
}

/// Quadratic model of a stage cost around `(x, u)`:
/// `ℓ(x+δx, u+δu) ≈ ℓ + gxᵀδx + guᵀδu + ½δxᵀHxxδx + δuᵀHuxδx + ½δuᵀHuuδu`.
#[derive(Debug, Clone)]
pub struct StageQuadratic {
    pub hxx: DMatrix<f64>,
    pub hux: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
}

/// A discrete-time optimal control problem on a fixed node grid, as seen by
/// the sequential linear-quadratic solver.
///
/// Nodes are numbered `0..node_count()`; inputs live on the first
/// `node_count() - 1` nodes and are held over the interval to the next node.
pub trait OptimalControlProblem {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn node_count(&self) -> usize;
    fn node_time(&self, node: usize) -> f64;
    fn initial_state(&self) -> &DVector<f64>;

    /// Propagates `x` across the interval starting at `node`.
    fn step(&self, node: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError>;

    /// Propagated state together with its Jacobians.
    fn step_with_jacobians(
        &self,
        node: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), SolverError>;

    fn stage_cost(&self, node: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn stage_quadratic(&self, node: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic;
    fn final_cost(&self, x: &DVector<f64>) -> f64;
    fn final_quadratic(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>);

    /// Constraints at `node`; `u` is `None` on the last node.
    fn constraints(
        &self,
        node: usize,
        x: &DVector<f64>,
        u: Option<&DVector<f64>>,
    ) -> Result<NodeConstraints, SolverError>;

    /// Starting trajectory when the caller provides none.
    fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>);
}
