//! Backward Riccati factorisation and forward solve of an equality-free
//! stage-wise QP with fixed initial state.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::lq::LqInterval;
use super::SolverError;

const INITIAL_REGULARIZATION: f64 = 1e-6;
const MAX_RETRIES: usize = 10;

pub(crate) struct Factor {
    /// Value-function Hessians `P_n`.
    pub p: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    hux: Vec<DMatrix<f64>>,
    huu: Vec<Option<Cholesky<f64, Dyn>>>,
}

/// Hessian blocks of one stage.
pub(crate) struct Hessian<'a> {
    pub q: &'a DMatrix<f64>,
    pub s: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
}

fn regularized_cholesky(h: DMatrix<f64>, stage: usize) -> Result<Cholesky<f64, Dyn>, SolverError> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(c);
    }
    let mut mu = INITIAL_REGULARIZATION;
    for _ in 0..MAX_RETRIES {
        let shifted = &h + DMatrix::identity(h.nrows(), h.ncols()) * mu;
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        mu *= 10.0;
    }
    Err(SolverError::Factorization {
        stage,
        regularization: mu,
    })
}

pub(crate) fn factor(hess: &[Hessian<'_>], intervals: &[LqInterval]) -> Result<Factor, SolverError> {
    let n = hess.len();
    let mut p = vec![DMatrix::zeros(0, 0); n];
    let mut k = vec![DMatrix::zeros(0, 0); n - 1];
    let mut hux = vec![DMatrix::zeros(0, 0); n - 1];
    let mut huu = Vec::with_capacity(n - 1);
    huu.resize_with(n - 1, || None);

    p[n - 1] = hess[n - 1].q.clone();
    for t in (0..n - 1).rev() {
        let iv = &intervals[t];
        let pa = &p[t + 1] * &iv.a;
        let hxx = hess[t].q + iv.a.transpose() * &pa;
        let nw = hess[t].r.nrows();
        if nw == 0 {
            p[t] = 0.5 * (&hxx + hxx.transpose());
            k[t] = DMatrix::zeros(0, hxx.nrows());
            hux[t] = DMatrix::zeros(0, hxx.nrows());
            continue;
        }
        let pb = &p[t + 1] * &iv.b;
        let h_ux = hess[t].s + iv.b.transpose() * &pa;
        let h_uu = hess[t].r + iv.b.transpose() * &pb;
        let chol = regularized_cholesky(0.5 * (&h_uu + h_uu.transpose()), t)?;
        let gain = -chol.solve(&h_ux);
        let pt = hxx + h_ux.transpose() * &gain;
        p[t] = 0.5 * (&pt + pt.transpose());
        k[t] = gain;
        hux[t] = h_ux;
        huu[t] = Some(chol);
    }
    Ok(Factor { p, k, hux, huu })
}

/// States and inputs solving the QP with the factorised Hessian and the
/// given gradients.
pub(crate) fn solve(
    f: &Factor,
    qv: &[DVector<f64>],
    rv: &[DVector<f64>],
    intervals: &[LqInterval],
    x0: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = qv.len();
    let mut pv = vec![DVector::zeros(0); n];
    let mut kv = vec![DVector::zeros(0); n - 1];
    pv[n - 1] = qv[n - 1].clone();
    for t in (0..n - 1).rev() {
        let iv = &intervals[t];
        let carried = &f.p[t + 1] * &iv.c + &pv[t + 1];
        let gx = &qv[t] + iv.a.transpose() * &carried;
        match &f.huu[t] {
            Some(chol) => {
                let gu = &rv[t] + iv.b.transpose() * &carried;
                let ff = -chol.solve(&gu);
                pv[t] = gx + f.hux[t].transpose() * &ff;
                kv[t] = ff;
            }
            None => {
                pv[t] = gx;
                kv[t] = DVector::zeros(0);
            }
        }
    }
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n - 1);
    xs.push(x0.clone());
    for t in 0..n - 1 {
        let u = &f.k[t] * &xs[t] + &kv[t];
        let iv = &intervals[t];
        let next = &iv.a * &xs[t] + &iv.b * &u + &iv.c;
        us.push(u);
        xs.push(next);
    }
    (xs, us)
}
