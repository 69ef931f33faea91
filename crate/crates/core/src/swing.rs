//! Swing-foot reference: quintic splines with zero velocity and
//! acceleration at lift-off, apex and touchdown.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_APEX_FLAT: f64 = 0.07;
pub const DEFAULT_APEX_UNEVEN: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SwingError {
    #[error("swing duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("apex height must be non-negative, got {0}")]
    NegativeApex(f64),
    #[error("time {t} outside the swing interval [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
}

/// Rest-to-rest quintic from `a` to `b` over `tau`, as coefficients of
/// `c0 + c1 t + ... + c5 t⁵`.
fn rest_to_rest(a: f64, b: f64, tau: f64) -> [f64; 6] {
    let d = b - a;
    [a, 0.0, 0.0, 10.0 * d / tau.powi(3), -15.0 * d / tau.powi(4), 6.0 * d / tau.powi(5)]
}

fn eval(c: &[f64; 6], t: f64) -> (f64, f64, f64) {
    let p = ((((c[5] * t + c[4]) * t + c[3]) * t + c[2]) * t + c[1]) * t + c[0];
    let v = (((5.0 * c[5] * t + 4.0 * c[4]) * t + 3.0 * c[3]) * t + 2.0 * c[2]) * t + c[1];
    let a = ((20.0 * c[5] * t + 12.0 * c[4]) * t + 6.0 * c[3]) * t + 2.0 * c[2];
    (p, v, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingSpline {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub duration: f64,
    pub apex: f64,
    pub x: [f64; 6],
    pub y: [f64; 6],
    /// Lift-off to apex, then apex to touchdown, each over half the swing.
    pub z: [[f64; 6]; 2],
}

/// Position, velocity and acceleration of the swing foot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

pub fn build_swing(
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    duration: f64,
    apex_height: f64,
) -> Result<SwingSpline, SwingError> {
    if !(duration > 0.0) {
        return Err(SwingError::NonPositiveDuration(duration));
    }
    if !(apex_height >= 0.0) {
        return Err(SwingError::NegativeApex(apex_height));
    }
    let apex = start.z.max(end.z) + apex_height;
    let half = 0.5 * duration;
    Ok(SwingSpline {
        start: *start,
        end: *end,
        duration,
        apex,
        x: rest_to_rest(start.x, end.x, duration),
        y: rest_to_rest(start.y, end.y, duration),
        z: [rest_to_rest(start.z, apex, half), rest_to_rest(apex, end.z, half)],
    })
}

impl SwingSpline {
    pub fn evaluate(&self, t: f64) -> Result<SwingSample, SwingError> {
        let tol = 1e-9 * self.duration.max(1.0);
        if !(t >= -tol && t <= self.duration + tol) {
            return Err(SwingError::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let t = t.clamp(0.0, self.duration);
        let half = 0.5 * self.duration;
        let (x, vx, ax) = eval(&self.x, t);
        let (y, vy, ay) = eval(&self.y, t);
        let (z, vz, az) = if t <= half {
            eval(&self.z[0], t)
        } else {
            eval(&self.z[1], t - half)
        };
        Ok(SwingSample {
            position: Vector3::new(x, y, z),
            velocity: Vector3::new(vx, vy, vz),
            acceleration: Vector3::new(ax, ay, az),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_swing_reaches_apex_at_midpoint() {
        let s = build_swing(&Vector3::zeros(), &Vector3::new(0.2, 0.0, 0.0), 0.3, 0.07).unwrap();
        let mid = s.evaluate(0.15).unwrap();
        assert!((mid.position.z - 0.07).abs() < 1e-12);
        assert!((mid.position.x - 0.1).abs() < 1e-12);
        for t in [0.0, 0.15, 0.3] {
            let e = s.evaluate(t).unwrap();
            assert!(e.velocity.z.abs() < 1e-12 && e.acceleration.z.abs() < 1e-9);
        }
        let end = s.evaluate(0.3).unwrap();
        assert!((end.position - Vector3::new(0.2, 0.0, 0.0)).amax() < 1e-12);
        assert!(end.velocity.amax() < 1e-12);
    }

    #[test]
    fn step_up_apex_is_above_higher_end() {
        let s = build_swing(&Vector3::zeros(), &Vector3::new(0.2, 0.0, 0.15), 0.3, 0.07).unwrap();
        assert!((s.evaluate(0.15).unwrap().position.z - 0.22).abs() < 1e-12);
        for k in 0..=300 {
            let z = s.evaluate(0.3 * k as f64 / 300.0).unwrap().position.z;
            assert!(z <= 0.22 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = Vector3::zeros();
        assert!(build_swing(&p, &p, 0.0, 0.1).is_err());
        assert!(build_swing(&p, &p, 0.3, -0.1).is_err());
        let s = build_swing(&p, &p, 0.3, 0.1).unwrap();
        assert!(matches!(s.evaluate(0.31), Err(SwingError::OutOfRange { .. })));
        assert!(s.evaluate(-0.01).is_err());
    }
}
