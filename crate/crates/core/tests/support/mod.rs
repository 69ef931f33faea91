//! Independent oracles shared by the core tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stride_core::cost::{build_reachability, ReachabilityParams};
use stride_core::model::*;
use stride_core::slq::*;

pub fn random_point(rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    let params = RobotParams::default();
    let base = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.3..0.6));
    let mut x = RobotState::standing(&params, base).to_vector();
    for i in 0..3 {
        x[IDX_ORI + i] = rng.random_range(-0.6..0.6);
        x[IDX_LIN_VEL + i] = rng.random_range(-1.0..1.0);
        x[IDX_ANG_VEL + i] = rng.random_range(-1.5..1.5);
    }
    for leg in 0..LEG_COUNT {
        for a in 0..3 {
            x[foot_index(leg) + a] += rng.random_range(-0.1..0.1);
        }
    }
    let u = DVector::from_fn(INPUT_DIM, |_, _| rng.random_range(-80.0..120.0));
    (x, u)
}

pub fn central_difference<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, at: &DVector<f64>, rows: usize, h: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows, at.len());
    for c in 0..at.len() {
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[c] += h;
        minus[c] -= h;
        j.set_column(c, &((f(&plus) - f(&minus)) / (2.0 * h)));
    }
    j
}

pub fn max_relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Stage with a positive definite joint Hessian over `(x, u)`.
pub fn random_stage(rng: &mut ChaCha8Rng, nx: usize, nu: usize) -> LqStage {
    let l = random_matrix(rng, nx + nu, nx + nu, 1.0);
    let h = l.transpose() * l + DMatrix::identity(nx + nu, nx + nu) * 0.1;
    let mut st = LqStage::new(nx, nu);
    st.q = h.view((0, 0), (nx, nx)).into_owned();
    st.s = h.view((nx, 0), (nu, nx)).into_owned();
    st.r = h.view((nx, nx), (nu, nu)).into_owned();
    st.qv = random_vector(rng, nx, 1.0);
    st.rv = random_vector(rng, nu, 1.0);
    st
}

pub fn random_problem(rng: &mut ChaCha8Rng, nodes: usize, nx: usize, nu: usize) -> LqProblem {
    let stages = (0..nodes)
        .map(|k| random_stage(rng, nx, if k + 1 < nodes { nu } else { 0 }))
        .collect();
    let intervals = (0..nodes - 1)
        .map(|_| LqInterval {
            a: DMatrix::identity(nx, nx) + random_matrix(rng, nx, nx, 0.3),
            b: random_matrix(rng, nx, nu, 1.0),
            c: random_vector(rng, nx, 0.2),
        })
        .collect();
    LqProblem {
        x0: random_vector(rng, nx, 1.0),
        stages,
        intervals,
    }
}

pub struct Dense {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub eq: Vec<DVector<f64>>,
    /// Multipliers of the rows in `active`, as `λ ≥ 0` for `G x + F u + h ≥ 0`.
    pub active_multipliers: Vec<f64>,
}

/// Solves the KKT system of the problem with the listed inequality rows
/// `(stage, row)` held at equality, using one dense LU factorisation.
pub fn dense_kkt(p: &LqProblem, active: &[(usize, usize)]) -> Option<Dense> {
    let n = p.stages.len();
    let nx = p.x0.len();
    let nus: Vec<usize> = p.stages.iter().map(|s| s.nu()).collect();
    let xoff = |k: usize| k * nx;
    let ubase = n * nx;
    let uoffs: Vec<usize> = (0..n).scan(ubase, |acc, k| {
        let o = *acc;
        *acc += nus[k];
        Some(o)
    }).collect();
    let nz = ubase + nus.iter().sum::<usize>();

    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    for (k, st) in p.stages.iter().enumerate() {
        let (xo, uo, nu) = (xoff(k), uoffs[k], nus[k]);
        h.view_mut((xo, xo), (nx, nx)).copy_from(&st.q);
        g.rows_mut(xo, nx).copy_from(&st.qv);
        if nu > 0 {
            h.view_mut((uo, xo), (nu, nx)).copy_from(&st.s);
            h.view_mut((xo, uo), (nx, nu)).copy_from(&st.s.transpose());
            h.view_mut((uo, uo), (nu, nu)).copy_from(&st.r);
            g.rows_mut(uo, nu).copy_from(&st.rv);
        }
    }

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..nx {
        let mut r = DVector::zeros(nz);
        r[xoff(0) + i] = 1.0;
        rows.push((r, p.x0[i]));
    }
    for (k, iv) in p.intervals.iter().enumerate() {
        for i in 0..nx {
            let mut r = DVector::zeros(nz);
            for j in 0..nx {
                r[xoff(k) + j] = iv.a[(i, j)];
            }
            for j in 0..nus[k] {
                r[uoffs[k] + j] = iv.b[(i, j)];
            }
            r[xoff(k + 1) + i] -= 1.0;
            rows.push((r, -iv.c[i]));
        }
    }
    let mut eq_rows = Vec::new();
    for (k, st) in p.stages.iter().enumerate() {
        let mut idx = Vec::new();
        for i in 0..st.eq_e.len() {
            let mut r = DVector::zeros(nz);
            for j in 0..nx {
                r[xoff(k) + j] = st.eq_x[(i, j)];
            }
            for j in 0..nus[k] {
                r[uoffs[k] + j] = st.eq_u[(i, j)];
            }
            idx.push(rows.len());
            rows.push((r, -st.eq_e[i]));
        }
        eq_rows.push(idx);
    }
    let mut act_rows = Vec::new();
    for &(k, i) in active {
        let st = &p.stages[k];
        let mut r = DVector::zeros(nz);
        for j in 0..nx {
            r[xoff(k) + j] = st.ineq_x[(i, j)];
        }
        for j in 0..nus[k] {
            r[uoffs[k] + j] = st.ineq_u[(i, j)];
        }
        act_rows.push(rows.len());
        rows.push((r, -st.ineq_h[i]));
    }

    let m = rows.len();
    let mut kkt = DMatrix::zeros(nz + m, nz + m);
    let mut rhs = DVector::zeros(nz + m);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
    rhs.rows_mut(0, nz).copy_from(&(-g));
    for (i, (r, f)) in rows.iter().enumerate() {
        kkt.view_mut((nz + i, 0), (1, nz)).copy_from(&r.transpose());
        kkt.view_mut((0, nz + i), (nz, 1)).copy_from(r);
        rhs[nz + i] = *f;
    }
    let sol = kkt.lu().solve(&rhs)?;
    let nu_of = |row: usize| sol[nz + row];
    Some(Dense {
        x: (0..n).map(|k| sol.rows(xoff(k), nx).into_owned()).collect(),
        u: (0..n - 1).map(|k| sol.rows(uoffs[k], nus[k]).into_owned()).collect(),
        costates: (0..n - 1)
            .map(|k| DVector::from_fn(nx, |i, _| nu_of(nx + k * nx + i)))
            .collect(),
        eq: eq_rows
            .iter()
            .map(|idx| DVector::from_iterator(idx.len(), idx.iter().map(|&r| nu_of(r))))
            .collect(),
        active_multipliers: act_rows.iter().map(|&r| -nu_of(r)).collect(),
    })
}

/// The six posture equations written out row by row, independent of the
/// library assembly.
pub fn oracle_system(h_n: f64, h_c: f64, w_x: f64, w_y: f64) -> (DMatrix<f64>, DVector<f64>) {
    let ax = (h_c / w_x).asin();
    let ay = (h_c / w_y).asin();
    let qx = ay.tan() * h_n / h_c;
    let qy = ax.tan() * h_n / h_c;
    let (dx, dy) = (w_x / 2.0, w_y / 2.0);
    let z = |leg: usize| foot_index(leg) + 2;
    let mut a = DMatrix::zeros(6, STATE_DIM);
    // p_x − ¼Σr_x − ½d_x(−r0 − r1 + r2 + r3)_z = 0
    a[(0, IDX_POS)] = 1.0;
    for leg in 0..4 {
        a[(0, foot_index(leg))] = -0.25;
        a[(1, foot_index(leg) + 1)] = -0.25;
        a[(2, z(leg))] = -0.25;
    }
    for (leg, s) in [(0, -1.0), (1, -1.0), (2, 1.0), (3, 1.0)] {
        a[(0, z(leg))] = -0.5 * dx * s;
        a[(4, z(leg))] = -qy * s;
    }
    a[(1, IDX_POS + 1)] = 1.0;
    for (leg, s) in [(0, 1.0), (1, -1.0), (2, 1.0), (3, -1.0)] {
        a[(1, z(leg))] = -0.5 * dy * s;
        a[(3, z(leg))] = -qx * s;
    }
    a[(2, IDX_POS + 2)] = 1.0;
    a[(3, IDX_ORI)] = 1.0;
    a[(4, IDX_ORI + 1)] = 1.0;
    a[(5, IDX_ORI + 2)] = 1.0;
    let b = DVector::from_vec(vec![0.0, 0.0, h_n, 0.0, 0.0, 0.0]);
    (a, b)
}

/// Unconstrained double integrator with cost `Σ ½xᵀQx + ½uᵀRu + ½x_Nᵀ Q_f x_N`.
pub struct DoubleIntegrator {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub nodes: usize,
    pub dt: f64,
}

impl DoubleIntegrator {
    pub fn new(nodes: usize) -> Self {
        let dt = 0.1;
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            r: DMatrix::from_element(1, 1, 0.01),
            qf: DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 10.0])),
            x0: DVector::from_vec(vec![1.0, -0.5]),
            nodes,
            dt,
        }
    }

    /// Backward Riccati recursion and forward rollout of `u = −Kx`.
    pub fn lqr(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut p = self.qf.clone();
        let mut gains = Vec::new();
        for _ in 0..self.nodes - 1 {
            let btp = self.b.transpose() * &p;
            let k = (&self.r + &btp * &self.b).try_inverse().unwrap() * &btp * &self.a;
            p = &self.q + self.a.transpose() * &p * &self.a - self.a.transpose() * &p * &self.b * &k;
            gains.push(k);
        }
        gains.reverse();
        let mut xs = vec![self.x0.clone()];
        let mut us = Vec::new();
        for k in &gains {
            let u = -(k * xs.last().unwrap());
            xs.push(&self.a * xs.last().unwrap() + &self.b * &u);
            us.push(u);
        }
        (xs, us)
    }
}

impl OptimalControlProblem for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn node_count(&self) -> usize {
        self.nodes
    }
    fn node_time(&self, node: usize) -> f64 {
        node as f64 * self.dt
    }
    fn initial_state(&self) -> &DVector<f64> {
        &self.x0
    }
    fn step(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        Ok(&self.a * x + &self.b * u)
    }
    fn step_with_jacobians(
        &self,
        n: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), SolverError> {
        Ok((self.step(n, x, u)?, self.a.clone(), self.b.clone()))
    }
    fn stage_cost(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.q * x)) + u.dot(&(&self.r * u)))
    }
    fn stage_quadratic(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic {
        StageQuadratic {
            hxx: self.q.clone(),
            hux: DMatrix::zeros(1, 2),
            huu: self.r.clone(),
            gx: &self.q * x,
            gu: &self.r * u,
        }
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.qf * x))
    }
    fn final_quadratic(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        (self.qf.clone(), &self.qf * x)
    }
    fn constraints(&self, _: usize, _: &DVector<f64>, _: Option<&DVector<f64>>) -> Result<NodeConstraints, SolverError> {
        Ok(NodeConstraints {
            equality: ConstraintBlock::empty(2, 1),
            inequality: ConstraintBlock::empty(2, 1),
        })
    }
    fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        (vec![DVector::zeros(2); self.nodes], vec![DVector::zeros(1); self.nodes - 1])
    }
}


pub fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Worst relative error of the analytic continuous-time Jacobians against
/// central differences over random states and inputs.
pub fn linearization_error(points: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let m = RigidBodyModel::new(RobotParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (x, u) = random_point(&mut rng);
        let (a, b) = m.linearize(x.as_slice(), u.as_slice()).unwrap();
        let fa = central_difference(|x| m.evaluate_dynamics(x.as_slice(), u.as_slice()).unwrap(), &x, STATE_DIM, 1e-6);
        let fb = central_difference(|u| m.evaluate_dynamics(x.as_slice(), u.as_slice()).unwrap(), &u, STATE_DIM, 1e-6);
        worst = worst.max(max_relative_error(&a, &fa)).max(max_relative_error(&b, &fb));
    }
    worst
}

/// Largest deviation of a force-free 0.1 s rollout from the parabola.
pub fn ballistic_error() -> f64 {
    let m = RigidBodyModel::new(RobotParams::default());
    let mut x0 = RobotState::standing(&m.params, Vector3::new(0.1, -0.2, 0.45)).to_vector();
    let v0 = Vector3::new(0.3, -0.2, 0.5);
    x0.fixed_rows_mut::<3>(IDX_LIN_VEL).copy_from(&v0);
    let u = DVector::zeros(INPUT_DIM);
    let x = (0..5).fold(x0.clone(), |x, _| m.integrate_step(x.as_slice(), u.as_slice(), 0.02).unwrap());
    let t = 0.1;
    let g = Vector3::new(0.0, 0.0, -9.81);
    let p = x0.fixed_rows::<3>(IDX_POS) + v0 * t + g * (0.5 * t * t);
    let v = v0 + g * t;
    (x.fixed_rows::<3>(IDX_POS) - p).amax().max((x.fixed_rows::<3>(IDX_LIN_VEL) - v).amax())
}

/// Ratio of RK4 errors at step h and h/2 against a fine reference; close
/// to 16 for a fourth-order method.
pub fn rk4_error_ratio() -> f64 {
    use rand::SeedableRng;
    let m = RigidBodyModel::new(RobotParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x0, _) = random_point(&mut rng);
    let u = m.gravity_compensation(&[true; LEG_COUNT]) + DVector::from_fn(INPUT_DIM, |_, _| rng.random_range(-10.0..10.0));
    let horizon = 0.2;
    let rollout = |steps: usize| {
        let dt = horizon / steps as f64;
        (0..steps).fold(x0.clone(), |x, _| m.integrate_step(x.as_slice(), u.as_slice(), dt).unwrap())
    };
    let reference = rollout(2048);
    (rollout(8) - &reference).norm() / (rollout(16) - &reference).norm()
}

/// Worst mismatch between the library's reachability quadratic and the
/// least-squares objective minus its minimum, relative to max(1, |value|).
pub fn reachability_error(geometries: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..geometries {
        let h_n = rng.random_range(0.3..0.6);
        let h_c = rng.random_range(0.05..0.2);
        let w_x = rng.random_range(0.4..0.8);
        let w_y = rng.random_range(0.25..0.5);
        let r = build_reachability(ReachabilityParams::new(h_n, h_c, w_x, w_y).unwrap());
        let (a, b) = oracle_system(h_n, h_c, w_x, w_y);
        // Minimum of ‖Ay − b‖² from an SVD least-squares solve.
        let y = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
        let minimum = (&a * &y - &b).norm_squared();
        for _ in 0..5 {
            let x = DVector::from_fn(STATE_DIM, |_, _| rng.random_range(-1.0..1.0));
            let d = &x - &r.x_h;
            let quadratic = d.dot(&(&r.q_h * &d));
            let oracle = (&a * &x - &b).norm_squared() - minimum;
            worst = worst.max((quadratic - oracle).abs() / oracle.abs().max(1.0));
        }
    }
    worst
}

/// Random 5-node problems with equality rows and slack inequalities:
/// worst primal and costate difference between the IPM and a dense KKT solve.
pub fn kkt_oracle_error(trials: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut p = random_problem(&mut rng, 5, 4, 3);
        for k in 0..4 {
            let st = &mut p.stages[k];
            st.eq_x = random_matrix(&mut rng, 1, 4, 1.0);
            st.eq_u = random_matrix(&mut rng, 1, 3, 1.0);
            st.eq_e = random_vector(&mut rng, 1, 0.5);
            st.ineq_x = random_matrix(&mut rng, 3, 4, 0.1);
            st.ineq_u = random_matrix(&mut rng, 3, 3, 0.1);
            st.ineq_h = DVector::from_element(3, 1e3);
        }
        let ipm = solve_lq(&p, &IpmSettings::default()).unwrap();
        let dense = dense_kkt(&p, &[]).unwrap();
        worst = worst
            .max(max_diff(&ipm.x, &dense.x))
            .max(max_diff(&ipm.u, &dense.u))
            .max(max_diff(&ipm.costates, &dense.costates));
    }
    worst
}

/// Scalar double integrator pushed hard towards a target with `u ≤ 1` on
/// every stage.
pub fn bounded_push_problem() -> LqProblem {
    let n = 5;
    let mut stages: Vec<LqStage> = (0..n)
        .map(|k| {
            let nu = if k + 1 < n { 1 } else { 0 };
            let mut st = LqStage::new(2, nu);
            st.q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1]));
            st.qv = DVector::from_vec(vec![-4.0, 0.0]);
            if nu == 1 {
                st.r = DMatrix::from_element(1, 1, 0.01);
                st.ineq_u = DMatrix::from_element(1, 1, -1.0);
                st.ineq_x = DMatrix::zeros(1, 2);
                st.ineq_h = DVector::from_element(1, 1.0);
            }
            st
        })
        .collect();
    stages[n - 1].q *= 10.0;
    stages[n - 1].qv *= 10.0;
    let dt = 0.1;
    let interval = LqInterval {
        a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        b: DMatrix::from_column_slice(2, 1, &[0.5 * dt * dt, dt]),
        c: DVector::zeros(2),
    };
    LqProblem {
        x0: DVector::zeros(2),
        stages,
        intervals: vec![interval; n - 1],
    }
}

/// Optimal solution by enumerating every active set of the input bounds.
pub fn active_set_oracle(p: &LqProblem) -> Dense {
    let n = p.stages.len();
    let mut best: Option<(f64, Dense)> = None;
    for mask in 0..(1u32 << (n - 1)) {
        let active: Vec<(usize, usize)> = (0..n - 1).filter(|k| mask & (1 << k) != 0).map(|k| (k, 0)).collect();
        let Some(d) = dense_kkt(p, &active) else { continue };
        let primal = (0..n - 1).all(|k| {
            let st = &p.stages[k];
            (&st.ineq_x * &d.x[k] + &st.ineq_u * &d.u[k] + &st.ineq_h).min() >= -1e-12
        });
        let dual = d.active_multipliers.iter().all(|&l| l >= -1e-12);
        if primal && dual {
            let value = p.objective(&d.x, &d.u);
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                best = Some((value, d));
            }
        }
    }
    best.expect("some active set is optimal").1
}

/// Worst state and input difference between SLQ and the Riccati LQR
/// solution of the unconstrained double integrator.
pub fn lqr_error() -> f64 {
    let p = DoubleIntegrator::new(21);
    let sol = solve(&p, &SolverSettings::default(), None).unwrap();
    assert!(sol.converged());
    let (xs, us) = p.lqr();
    max_diff(&sol.states, &xs).max(max_diff(&sol.inputs, &us))
}
