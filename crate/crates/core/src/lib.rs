//! Desk-scale drone motion planning sandbox.
//!
//! The crate bundles a kinematic quadrotor with a velocity-tracking
//! controller, a gate/obstacle episode environment with the four-term
//! navigation reward, a from-scratch actor-critic network trained with PPO,
//! an artificial potential field baseline, a synthetic keypoint perception
//! pipeline (pinhole projection, planar pose recovery, per-object Kalman
//! tracking) and an evaluation harness for the five dynamic comparison cases.

pub mod apf;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod perception;
pub mod policy_net;
pub mod ppo;
pub mod reward;
pub mod world;

pub use error::{Error, Result};

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::wrap_angle;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }
}
