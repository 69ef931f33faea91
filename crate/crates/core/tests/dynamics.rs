mod support;
use support::*;

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stride_core::model::*;

fn model() -> RigidBodyModel {
    RigidBodyModel::new(RobotParams::default())
}

#[test]
fn linearization_matches_finite_differences_at_100_points() {
    let worst = linearization_error(100, 7);
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn discrete_jacobians_match_finite_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (x, u) = random_point(&mut rng);
        let (next, ad, bd) = m.integrate_step_with_jacobians(x.as_slice(), u.as_slice(), 0.02).unwrap();
        assert_eq!(next, m.integrate_step(x.as_slice(), u.as_slice(), 0.02).unwrap());
        let fa = central_difference(|x| m.integrate_step(x.as_slice(), u.as_slice(), 0.02).unwrap(), &x, STATE_DIM, 1e-6);
        let fb = central_difference(|u| m.integrate_step(x.as_slice(), u.as_slice(), 0.02).unwrap(), &u, STATE_DIM, 1e-6);
        assert!(max_relative_error(&ad, &fa) <= 1e-6);
        assert!(max_relative_error(&bd, &fb) <= 1e-6);
    }
}

#[test]
fn ballistic_flight_for_a_tenth_of_a_second() {
    let err = ballistic_error();
    assert!(err <= 1e-9, "{err:e}");
}

#[test]
fn equilibrium_input_leaves_state_unchanged() {
    let m = model();
    let x0 = RobotState::standing(&m.params, Vector3::new(0.2, -0.1, 0.45)).to_vector();
    let u = m.gravity_compensation(&[true; LEG_COUNT]);
    let x1 = m.integrate_step(x0.as_slice(), u.as_slice(), 0.02).unwrap();
    assert!((x1 - x0).amax() <= 1e-12);
}

#[test]
fn rk4_error_shrinks_sixteenfold_when_halving_the_step() {
    let ratio = rk4_error_ratio();
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn rotations_stay_in_so3() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
        let r = euler_xyz_rotation(&t);
        assert!((r.transpose() * r - Matrix3::identity()).amax() <= 1e-12);
        assert!((r.determinant() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn euler_rates_match_rotation_finite_differences() {
    // Body rates ω mean Ṙ = R [ω]×; the Euler rates must reproduce that.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rate = euler_rate_matrix(&t).unwrap() * w;
        let h = 1e-6;
        let numeric = (euler_xyz_rotation(&(t + rate * h)) - euler_xyz_rotation(&(t - rate * h))) / (2.0 * h);
        let exact = euler_xyz_rotation(&t) * skew(&w);
        assert!((numeric - exact).norm() <= 1e-5 * exact.norm().max(1e-3));
    }
}

#[test]
fn dynamics_are_affine_in_the_forces() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, u) = random_point(&mut rng);
    let f1 = m.evaluate_dynamics(x.as_slice(), u.as_slice()).unwrap();
    let f2 = m.evaluate_dynamics(x.as_slice(), (&u * 2.0).as_slice()).unwrap();
    let g = m.gravity();
    for a in 0..3 {
        let once = f1[IDX_LIN_VEL + a] - g[a];
        let twice = f2[IDX_LIN_VEL + a] - g[a];
        assert!((twice - 2.0 * once).abs() <= 1e-12 * once.abs().max(1.0));
    }
}

#[test]
fn force_free_rotation_conserves_world_angular_momentum() {
    let m = model();
    let mut x = RobotState::standing(&m.params, Vector3::new(0.0, 0.0, 1.0)).to_vector();
    x[IDX_ANG_VEL] = 0.8;
    x[IDX_ANG_VEL + 1] = -0.3;
    x[IDX_ANG_VEL + 2] = 0.5;
    let u = DVector::zeros(INPUT_DIM);
    let inertia = m.params.inertia_matrix();
    let momentum = |x: &DVector<f64>| {
        let t = Vector3::new(x[IDX_ORI], x[IDX_ORI + 1], x[IDX_ORI + 2]);
        let w = Vector3::new(x[IDX_ANG_VEL], x[IDX_ANG_VEL + 1], x[IDX_ANG_VEL + 2]);
        euler_xyz_rotation(&t) * inertia * w
    };
    let start = momentum(&x);
    for _ in 0..50 {
        x = m.integrate_step(x.as_slice(), u.as_slice(), 0.002).unwrap();
    }
    assert!((momentum(&x) - start).norm() <= 1e-8);
}
