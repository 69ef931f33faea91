//! Stage-wise linear-quadratic subproblem and the elimination of its
//! equality constraints.
//!
//! ```text
//! min  Σ_n ½xᵀQx + uᵀSx + ½uᵀRu + qᵀx + rᵀu
//! s.t. x_{n+1} = A x_n + B u_n + c,   x_0 given
//!      C x_n + D u_n + e = 0
//!      G x_n + F u_n + h ≥ 0
//! ```

use nalgebra::{DMatrix, DVector};

use super::SolverError;

#[derive(Debug, Clone, PartialEq)]
pub struct LqStage {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qv: DVector<f64>,
    pub rv: DVector<f64>,
    pub eq_x: DMatrix<f64>,
    pub eq_u: DMatrix<f64>,
    pub eq_e: DVector<f64>,
    pub ineq_x: DMatrix<f64>,
    pub ineq_u: DMatrix<f64>,
    pub ineq_h: DVector<f64>,
}

impl LqStage {
    /// Zero cost and no constraints.
    pub fn new(nx: usize, nu: usize) -> Self {
        Self {
            q: DMatrix::zeros(nx, nx),
            s: DMatrix::zeros(nu, nx),
            r: DMatrix::zeros(nu, nu),
            qv: DVector::zeros(nx),
            rv: DVector::zeros(nu),
            eq_x: DMatrix::zeros(0, nx),
            eq_u: DMatrix::zeros(0, nu),
            eq_e: DVector::zeros(0),
            ineq_x: DMatrix::zeros(0, nx),
            ineq_u: DMatrix::zeros(0, nu),
            ineq_h: DVector::zeros(0),
        }
    }

    pub fn nx(&self) -> usize {
        self.q.nrows()
    }

    pub fn nu(&self) -> usize {
        self.r.nrows()
    }

    fn check(&self, k: usize) -> Result<(), SolverError> {
        let (nx, nu) = (self.nx(), self.nu());
        let bad = self.q.ncols() != nx
            || self.s.shape() != (nu, nx)
            || self.r.ncols() != nu
            || self.qv.len() != nx
            || self.rv.len() != nu
            || self.eq_x.shape() != (self.eq_e.len(), nx)
            || self.eq_u.shape() != (self.eq_e.len(), nu)
            || self.ineq_x.shape() != (self.ineq_h.len(), nx)
            || self.ineq_u.shape() != (self.ineq_h.len(), nu);
        if bad {
            return Err(SolverError::Dimension(format!("inconsistent blocks in LQ stage {k}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqInterval {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub x0: DVector<f64>,
    pub stages: Vec<LqStage>,
    pub intervals: Vec<LqInterval>,
}

impl LqProblem {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.stages.is_empty() || self.intervals.len() + 1 != self.stages.len() {
            return Err(SolverError::Dimension(
                "an LQ problem needs one more stage than intervals".into(),
            ));
        }
        let nx = self.x0.len();
        for (k, st) in self.stages.iter().enumerate() {
            st.check(k)?;
            if st.nx() != nx {
                return Err(SolverError::Dimension(format!("stage {k} state dimension")));
            }
        }
        if self.stages.last().map_or(0, |s| s.nu()) != 0 {
            return Err(SolverError::Dimension("the last stage carries no input".into()));
        }
        for (k, iv) in self.intervals.iter().enumerate() {
            let nu = self.stages[k].nu();
            if iv.a.shape() != (nx, nx) || iv.b.shape() != (nx, nu) || iv.c.len() != nx {
                return Err(SolverError::Dimension(format!("interval {k} dynamics")));
            }
        }
        Ok(())
    }

    /// Objective value of a trajectory.
    pub fn objective(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                let xk = &x[k];
                let mut v = 0.5 * xk.dot(&(&st.q * xk)) + st.qv.dot(xk);
                if st.nu() > 0 {
                    let uk = &u[k];
                    v += uk.dot(&(&st.s * xk)) + 0.5 * uk.dot(&(&st.r * uk)) + st.rv.dot(uk);
                }
                v
            })
            .sum()
    }
}

/// Equality elimination `u = u_p + K x + Z w` of one stage.
#[derive(Debug, Clone)]
pub(crate) struct Elimination {
    pub u_p: DVector<f64>,
    pub k: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `(D⁺)ᵀ`, used to recover the equality multipliers.
    pub d_pinv_t: DMatrix<f64>,
}

/// Stage of the reduced problem with inequalities written `M [x; w] ≤ d`.
#[derive(Debug, Clone)]
pub(crate) struct ReducedStage {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qv: DVector<f64>,
    pub rv: DVector<f64>,
    pub mx: DMatrix<f64>,
    pub mw: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Original inequality row of each reduced row.
    pub rows: Vec<usize>,
}

impl ReducedStage {
    pub fn nw(&self) -> usize {
        self.r.nrows()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Reduced {
    pub x0: DVector<f64>,
    pub stages: Vec<ReducedStage>,
    pub intervals: Vec<LqInterval>,
    pub elim: Vec<Elimination>,
}

const RANK_TOL: f64 = 1e-10;

fn row_is_zero(m: &DMatrix<f64>, i: usize, scale: f64) -> bool {
    m.ncols() == 0 || m.row(i).amax() <= 1e-12 * scale.max(1.0)
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

/// Moves equality rows that do not involve the stage input onto the
/// previous stage through the dynamics. Rows on the first stage that only
/// involve the fixed initial state are dropped.
fn transfer_state_equalities(p: &LqProblem) -> Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = p.stages.len();
    let mut eqs: Vec<_> = p
        .stages
        .iter()
        .map(|s| (s.eq_x.clone(), s.eq_u.clone(), s.eq_e.clone()))
        .collect();
    for k in (0..n).rev() {
        let (cx, cu, e) = eqs[k].clone();
        let scale = cx.amax();
        let (keep, moved): (Vec<usize>, Vec<usize>) =
            (0..e.len()).partition(|&i| !row_is_zero(&cu, i, scale));
        if moved.is_empty() {
            continue;
        }
        eqs[k] = (
            cx.select_rows(keep.iter()),
            cu.select_rows(keep.iter()),
            e.select_rows(keep.iter()),
        );
        if k == 0 {
            continue;
        }
        let c_moved = cx.select_rows(moved.iter());
        let e_moved = e.select_rows(moved.iter());
        let iv = &p.intervals[k - 1];
        let (px, pu, pe) = &eqs[k - 1];
        eqs[k - 1] = (
            stack(px, &(&c_moved * &iv.a)),
            stack(pu, &(&c_moved * &iv.b)),
            stack_vec(pe, &(e_moved + &c_moved * &iv.c)),
        );
    }
    eqs
}

fn eliminate_stage(
    k: usize,
    cx: &DMatrix<f64>,
    cu: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<Elimination, SolverError> {
    let (m, nu, nx) = (cu.nrows(), cu.ncols(), cx.ncols());
    if m == 0 {
        return Ok(Elimination {
            u_p: DVector::zeros(nu),
            k: DMatrix::zeros(nu, nx),
            z: DMatrix::identity(nu, nu),
            d_pinv_t: DMatrix::zeros(0, nu),
        });
    }
    if nu == 0 {
        return Err(SolverError::InfeasibleSubproblem {
            stage: k,
            reason: "equality constraints on a stage without inputs".into(),
        });
    }
    // Pad with zero rows so that the decomposition yields a full basis of
    // the input space.
    let rows = m.max(nu);
    let mut padded = DMatrix::zeros(rows, nu);
    padded.rows_mut(0, m).copy_from(cu);
    let svd = padded.svd(true, true);
    let u_mat = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let sigma_max = svd.singular_values.max();
    let threshold = RANK_TOL * sigma_max.max(f64::MIN_POSITIVE);

    let mut pinv = DMatrix::zeros(nu, m);
    let mut null_cols = Vec::new();
    for j in 0..nu {
        let sj = svd.singular_values[j];
        let vj = v_t.row(j).transpose();
        if sigma_max > 0.0 && sj > threshold {
            let uj = u_mat.column(j).rows(0, m).into_owned();
            pinv += (vj * uj.transpose()) / sj;
        } else {
            null_cols.push(vj);
        }
    }
    let z = if null_cols.is_empty() {
        DMatrix::zeros(nu, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };

    // Rank-deficient rows must be consistent for every state.
    let proj = DMatrix::identity(m, m) - cu * &pinv;
    let scale = 1.0 + e.amax() + cx.amax();
    if (&proj * e).amax() > 1e-8 * scale || (&proj * cx).amax() > 1e-8 * scale {
        return Err(SolverError::InfeasibleSubproblem {
            stage: k,
            reason: "inconsistent equality constraints".into(),
        });
    }
    Ok(Elimination {
        u_p: -(&pinv * e),
        k: -(&pinv * cx),
        z,
        d_pinv_t: pinv.transpose(),
    })
}

pub(crate) fn reduce(p: &LqProblem) -> Result<Reduced, SolverError> {
    p.validate()?;
    let eqs = transfer_state_equalities(p);
    let n = p.stages.len();
    let mut stages = Vec::with_capacity(n);
    let mut elim = Vec::with_capacity(n);
    let mut intervals = Vec::with_capacity(n - 1);
    for (k, st) in p.stages.iter().enumerate() {
        let (cx, cu, e) = &eqs[k];
        let el = eliminate_stage(k, cx, cu, e)?;
        let (kk, z, up) = (&el.k, &el.z, &el.u_p);

        let r_k = &st.r * kk;
        let q = &st.q + kk.transpose() * &st.s + st.s.transpose() * kk + kk.transpose() * &r_k;
        let s = z.transpose() * (&st.s + &r_k);
        let r = z.transpose() * &st.r * z;
        let r_up = &st.rv + &st.r * up;
        let qv = &st.qv + st.s.transpose() * up + kk.transpose() * &r_up;
        let rv = z.transpose() * &r_up;

        // h + G x + F u ≥ 0  ⇔  −(G + F K) x − F Z w ≤ h + F u_p
        let mut mx = -(&st.ineq_x + &st.ineq_u * kk);
        let mut mw = -(&st.ineq_u * z);
        let mut d = &st.ineq_h + &st.ineq_u * up;
        let mut rows: Vec<usize> = (0..d.len()).collect();
        if k == 0 {
            // The initial state is fixed; rows that only see it are constant.
            let scale = mx.amax();
            rows.retain(|&i| !row_is_zero(&mw, i, scale));
            mx = mx.select_rows(rows.iter());
            mw = mw.select_rows(rows.iter());
            d = d.select_rows(rows.iter());
        }

        if k + 1 < n {
            let iv = &p.intervals[k];
            intervals.push(LqInterval {
                a: &iv.a + &iv.b * kk,
                b: &iv.b * z,
                c: &iv.c + &iv.b * up,
            });
        }
        stages.push(ReducedStage {
            q: 0.5 * (&q + q.transpose()),
            s,
            r: 0.5 * (&r + r.transpose()),
            qv,
            rv,
            mx,
            mw,
            d,
            rows,
        });
        elim.push(el);
    }
    Ok(Reduced {
        x0: p.x0.clone(),
        stages,
        intervals,
        elim,
    })
}
