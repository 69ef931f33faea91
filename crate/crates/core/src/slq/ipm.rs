//! Primal-dual interior-point method for the stage-wise QP.
//!
//! Equalities are eliminated stage by stage; the remaining inequalities
//! `M z ≤ d` get slacks `s` and multipliers `λ`. Each Newton system is itself
//! an equality-free stage-wise QP with Hessian `H + MᵀWM`, `W = Λ S⁻¹`, so one
//! Riccati factorisation per iteration serves both the affine predictor and
//! the Mehrotra corrector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lq::{self, Reduced};
use super::riccati::{self, Hessian};
use super::{LqInterval, LqProblem, SolverError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpmSettings {
    pub max_iterations: usize,
    /// Duality-measure and residual tolerance.
    pub tolerance: f64,
    /// Fraction of the distance to the boundary taken per step.
    pub step_fraction: f64,
    /// Upper bound on the centring parameter, i.e. the least reduction of
    /// the barrier targeted by a corrector step.
    pub barrier_reduction: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-10,
            step_fraction: 0.995,
            barrier_reduction: 0.8,
        }
    }
}

/// Primal-dual solution of an [`LqProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct LqSolution {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Multiplier of the dynamics on interval `n`.
    pub costates: Vec<DVector<f64>>,
    /// Multipliers of the stage equalities, after rows that only involve the
    /// state have been moved to the preceding stage.
    pub eq_multipliers: Vec<DVector<f64>>,
    /// Multipliers (≥ 0) of the inequality rows in their original order.
    pub ineq_multipliers: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Duality measure `sᵀλ / m` at the start of every iteration.
    pub mu_history: Vec<f64>,
}

fn mz(red: &Reduced, x: &[DVector<f64>], w: &[DVector<f64>]) -> Vec<DVector<f64>> {
    red.stages
        .iter()
        .enumerate()
        .map(|(t, st)| {
            let mut v = &st.mx * &x[t];
            if st.nw() > 0 {
                v += &st.mw * &w[t];
            }
            v
        })
        .collect()
}

/// Costates from the state stationarity conditions and the largest input
/// stationarity residual.
fn dual_residual(
    red: &Reduced,
    x: &[DVector<f64>],
    w: &[DVector<f64>],
    lam: &[DVector<f64>],
) -> (Vec<DVector<f64>>, f64) {
    let n = red.stages.len();
    let last = &red.stages[n - 1];
    let mut pi = &last.q * &x[n - 1] + &last.qv + last.mx.transpose() * &lam[n - 1];
    let mut costates = vec![DVector::zeros(0); n - 1];
    let mut worst = 0.0_f64;
    for t in (0..n - 1).rev() {
        let st = &red.stages[t];
        let iv = &red.intervals[t];
        if st.nw() > 0 {
            let rw = &st.s * &x[t] + &st.r * &w[t] + &st.rv + st.mw.transpose() * &lam[t] + iv.b.transpose() * &pi;
            worst = worst.max(rw.amax());
        }
        let mut next = &st.q * &x[t] + &st.qv + st.mx.transpose() * &lam[t] + iv.a.transpose() * &pi;
        if st.nw() > 0 {
            next += st.s.transpose() * &w[t];
        }
        costates[t] = std::mem::replace(&mut pi, next);
    }
    (costates, worst)
}

fn max_step(v: &[DVector<f64>], dv: &[DVector<f64>]) -> f64 {
    let mut alpha = 1.0_f64;
    for (a, b) in v.iter().zip(dv) {
        for (vi, di) in a.iter().zip(b.iter()) {
            if *di < 0.0 {
                alpha = alpha.min(-vi / di);
            }
        }
    }
    alpha
}

struct Direction {
    x: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    ds: Vec<DVector<f64>>,
    dl: Vec<DVector<f64>>,
}

/// Solves `problem` to the tolerance in `settings`.
pub fn solve_lq(problem: &LqProblem, settings: &IpmSettings) -> Result<LqSolution, SolverError> {
    let red = lq::reduce(problem)?;
    let n = red.stages.len();
    let qv: Vec<DVector<f64>> = red.stages.iter().map(|s| s.qv.clone()).collect();
    let rv: Vec<DVector<f64>> = red.stages.iter().map(|s| s.rv.clone()).collect();
    let rows: usize = red.stages.iter().map(|s| s.d.len()).sum();

    let base: Vec<Hessian<'_>> = red
        .stages
        .iter()
        .map(|s| Hessian {
            q: &s.q,
            s: &s.s,
            r: &s.r,
        })
        .collect();
    let f0 = riccati::factor(&base, &red.intervals)?;
    let (mut x, mut w) = riccati::solve(&f0, &qv, &rv, &red.intervals, &red.x0);
    let mut lam: Vec<DVector<f64>> = red.stages.iter().map(|s| DVector::from_element(s.d.len(), 1.0)).collect();
    let mut mu_history = Vec::new();
    let mut iterations = 0;

    if rows > 0 {
        let mut s: Vec<DVector<f64>> = mz(&red, &x, &w)
            .iter()
            .zip(&red.stages)
            .map(|(m, st)| (&st.d - m).map(|v| v.max(1.0)))
            .collect();
        let homogeneous: Vec<LqInterval> = red
            .intervals
            .iter()
            .map(|iv| LqInterval {
                a: iv.a.clone(),
                b: iv.b.clone(),
                c: DVector::zeros(iv.c.len()),
            })
            .collect();
        let zero = DVector::zeros(red.x0.len());
        let d_scale = 1.0 + red.stages.iter().fold(0.0_f64, |a, st| a.max(st.d.amax()));
        let g_scale = 1.0 + qv.iter().chain(rv.iter()).fold(0.0_f64, |a, g| a.max(g.amax()));

        loop {
            let mzv = mz(&red, &x, &w);
            let rp: Vec<DVector<f64>> = (0..n).map(|t| &mzv[t] + &s[t] - &red.stages[t].d).collect();
            let mu = s.iter().zip(&lam).map(|(a, b)| a.dot(b)).sum::<f64>() / rows as f64;
            let (_, rd) = dual_residual(&red, &x, &w, &lam);
            let rp_max = rp.iter().fold(0.0_f64, |a, v| a.max(v.amax()));
            if !(mu.is_finite() && rd.is_finite() && rp_max.is_finite()) {
                return Err(SolverError::NonFinite("interior point iterate".into()));
            }
            mu_history.push(mu);
            if mu <= settings.tolerance
                && rp_max <= settings.tolerance * d_scale
                && rd <= settings.tolerance * g_scale
            {
                break;
            }
            // Diverging complementarity with stagnant primal residual is the
            // usual signature of an empty feasible set.
            if mu > 1e10 * mu_history[0].max(1.0) {
                let stage = (0..n)
                    .max_by(|&a, &b| rp[a].amax().total_cmp(&rp[b].amax()))
                    .unwrap_or(0);
                return Err(SolverError::InfeasibleSubproblem {
                    stage,
                    reason: format!("duality measure diverged to {mu:e} with primal residual {rp_max:e}"),
                });
            }
            if iterations == settings.max_iterations {
                return Err(SolverError::IpmNotConverged { iterations, mu });
            }
            iterations += 1;

            let weight: Vec<DVector<f64>> = lam.iter().zip(&s).map(|(l, sl)| l.component_div(sl)).collect();
            let aug: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = red
                .stages
                .iter()
                .zip(&weight)
                .map(|(st, wt)| {
                    let wmx = DMatrix::from_fn(st.mx.nrows(), st.mx.ncols(), |i, j| wt[i] * st.mx[(i, j)]);
                    let wmw = DMatrix::from_fn(st.mw.nrows(), st.mw.ncols(), |i, j| wt[i] * st.mw[(i, j)]);
                    (
                        &st.q + st.mx.transpose() * &wmx,
                        &st.s + st.mw.transpose() * &wmx,
                        &st.r + st.mw.transpose() * &wmw,
                    )
                })
                .collect();
            let hess: Vec<Hessian<'_>> = aug.iter().map(|(q, s, r)| Hessian { q, s, r }).collect();
            let fact = riccati::factor(&hess, &red.intervals)?;

            // Newton step in increments; the weighted terms of the full
            // gradient cancel analytically, which keeps the multiplier update
            // accurate when slacks are tiny.
            let newton = |rc: &[DVector<f64>]| -> Direction {
                let mut gq = Vec::with_capacity(n);
                let mut gr = Vec::with_capacity(n);
                for t in 0..n {
                    let st = &red.stages[t];
                    let v = DVector::from_fn(st.d.len(), |i, _| lam[t][i] + (-rc[t][i] + lam[t][i] * rp[t][i]) / s[t][i]);
                    let mut gx = &st.q * &x[t] + &qv[t] + st.mx.transpose() * &v;
                    let mut gw = &rv[t] + st.mw.transpose() * &v;
                    if st.nw() > 0 {
                        gx += st.s.transpose() * &w[t];
                        gw += &st.s * &x[t] + &st.r * &w[t];
                    }
                    gq.push(gx);
                    gr.push(gw);
                }
                let (dx, dw) = riccati::solve(&fact, &gq, &gr, &homogeneous, &zero);
                let mut ds = Vec::with_capacity(n);
                let mut dl = Vec::with_capacity(n);
                for t in 0..n {
                    let st = &red.stages[t];
                    let mut mdz = &st.mx * &dx[t];
                    if st.nw() > 0 {
                        mdz += &st.mw * &dw[t];
                    }
                    let dst = -&rp[t] - mdz;
                    let dlt = DVector::from_fn(st.d.len(), |i, _| (-rc[t][i] - lam[t][i] * dst[i]) / s[t][i]);
                    ds.push(dst);
                    dl.push(dlt);
                }
                Direction { x: dx, w: dw, ds, dl }
            };

            let rc_aff: Vec<DVector<f64>> = s.iter().zip(&lam).map(|(a, b)| a.component_mul(b)).collect();
            let aff = newton(&rc_aff);
            let ap = max_step(&s, &aff.ds);
            let ad = max_step(&lam, &aff.dl);
            let mu_aff = (0..n)
                .map(|t| (&s[t] + &aff.ds[t] * ap).dot(&(&lam[t] + &aff.dl[t] * ad)))
                .sum::<f64>()
                / rows as f64;
            // Centring target, floored so the slacks of active rows do not
            // collapse far below the tolerance and swamp the weights.
            let target = ((mu_aff / mu).powi(3).min(settings.barrier_reduction) * mu).max(0.1 * settings.tolerance);
            let rc: Vec<DVector<f64>> = (0..n)
                .map(|t| {
                    &rc_aff[t] + aff.ds[t].component_mul(&aff.dl[t]) - DVector::from_element(s[t].len(), target)
                })
                .collect();
            let dir = newton(&rc);
            let alpha = (settings.step_fraction * max_step(&s, &dir.ds).min(max_step(&lam, &dir.dl))).min(1.0);
            for t in 0..n {
                x[t] += &dir.x[t] * alpha;
                if t + 1 < n {
                    w[t] += &dir.w[t] * alpha;
                }
                s[t] += &dir.ds[t] * alpha;
                lam[t] += &dir.dl[t] * alpha;
            }
        }
    }

    let (costates, _) = dual_residual(&red, &x, &w, &lam);
    let mut u = Vec::with_capacity(n - 1);
    let mut eq_multipliers = Vec::with_capacity(n);
    let mut ineq_multipliers = Vec::with_capacity(n);
    for t in 0..n {
        let orig = &problem.stages[t];
        let mut full = DVector::zeros(orig.ineq_h.len());
        for (i, &row) in red.stages[t].rows.iter().enumerate() {
            full[row] = lam[t][i];
        }
        let el = &red.elim[t];
        if t + 1 < n {
            let ut = &el.u_p + &el.k * &x[t] + &el.z * &w[t];
            let stationarity = &orig.r * &ut + &orig.s * &x[t] + &orig.rv
                + problem.intervals[t].b.transpose() * &costates[t]
                - orig.ineq_u.transpose() * &full;
            eq_multipliers.push(-(&el.d_pinv_t * stationarity));
            u.push(ut);
        } else {
            eq_multipliers.push(DVector::zeros(0));
        }
        ineq_multipliers.push(full);
    }
    if x.iter().chain(u.iter()).any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(SolverError::NonFinite("subproblem solution".into()));
    }
    Ok(LqSolution {
        x,
        u,
        costates,
        eq_multipliers,
        ineq_multipliers,
        iterations,
        mu_history,
    })
}
