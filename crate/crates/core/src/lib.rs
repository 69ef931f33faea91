//! Reduced-order quadruped motion planning: single rigid body dynamics,
//! contact-plane constraints and a multiple-shooting SLQ solver.

pub mod contact;
pub mod cost;
pub mod gait;
pub mod locomotion;
pub mod model;
pub mod nominal;
pub mod slq;
pub mod swing;
pub mod terrain;
