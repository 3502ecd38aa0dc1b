//! Kinematic quadrotor with a first-order velocity-tracking controller.
//!
//! The planner only talks to the vehicle through velocity commands, so the
//! attitude loop and motor model are folded into a rate-limited first-order
//! response. Orientation is reduced to yaw, which follows the direction of
//! horizontal travel.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{wrap_angle, Error, Result};

/// Horizontal velocity limit per axis, m/s.
pub const V_MAX_XY: f64 = 3.0;
/// Vertical velocity limit, m/s.
pub const V_MAX_Z: f64 = 2.0;
/// Control period, s.
pub const DT: f64 = 0.02;
/// Below this horizontal speed the heading is held.
pub const YAW_SPEED_EPS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsParams {
    /// Velocity time constant, s.
    pub tau_v: f64,
    /// Acceleration magnitude cap, m/s^2.
    pub a_max: f64,
    /// Yaw time constant, s.
    pub tau_yaw: f64,
    /// Yaw rate cap, rad/s.
    pub yaw_rate_max: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            tau_v: 0.3,
            a_max: 6.0,
            tau_yaw: 0.2,
            yaw_rate_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub position: Vector3<f64>,
    /// Heading in (-pi, pi].
    pub yaw: f64,
    pub velocity: Vector3<f64>,
    pub yaw_rate: f64,
}

impl DroneState {
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            yaw: wrap_angle(yaw),
            velocity: Vector3::zeros(),
            yaw_rate: 0.0,
        }
    }
}

/// Desired velocity plus the speed ceiling chosen by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub v_des: Vector3<f64>,
    pub v_max: f64,
}

impl VelocityCommand {
    /// Builds a command whose ceiling is the norm of the requested velocity
    /// (capped at the vehicle limit). Used by planners that produce a
    /// velocity vector directly.
    pub fn from_velocity(v: Vector3<f64>) -> Self {
        let cmd = Self {
            v_des: v,
            v_max: v.norm().min(V_MAX_XY),
        };
        Self {
            v_des: cmd.clamped(),
            v_max: cmd.v_max,
        }
    }

    /// The velocity the controller will actually track: norm-limited by
    /// `v_max` (direction preserved), then per-axis limited.
    pub fn clamped(&self) -> Vector3<f64> {
        let v_max = self.v_max.clamp(0.0, V_MAX_XY);
        let mut v = self.v_des;
        let n = v.norm();
        if n > v_max {
            v = if n > 0.0 { v * (v_max / n) } else { Vector3::zeros() };
        }
        clamp_axes(v)
    }
}

fn clamp_axes(v: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        v.x.clamp(-V_MAX_XY, V_MAX_XY),
        v.y.clamp(-V_MAX_XY, V_MAX_XY),
        v.z.clamp(-V_MAX_Z, V_MAX_Z),
    )
}

/// Maps a normalized policy action in [-1, 1]^4 to a velocity command.
///
/// Components outside [-1, 1] are clipped first.
pub fn map_action(a: &[f64; 4]) -> Result<VelocityCommand> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite action {a:?}")));
    }
    let a = a.map(|x| x.clamp(-1.0, 1.0));
    let v_max = V_MAX_XY * (a[3] + 1.0) / 2.0;
    let raw = Vector3::new(V_MAX_XY * a[0], V_MAX_XY * a[1], V_MAX_Z * a[2]);
    let cmd = VelocityCommand { v_des: raw, v_max };
    Ok(VelocityCommand {
        v_des: cmd.clamped(),
        v_max,
    })
}

/// Heading implied by the horizontal velocity, or `prev_yaw` when the drone
/// is (nearly) not moving horizontally.
pub fn yaw_from_velocity(v: &Vector3<f64>, prev_yaw: f64) -> f64 {
    if v.x.hypot(v.y) > YAW_SPEED_EPS {
        v.y.atan2(v.x)
    } else {
        prev_yaw
    }
}

/// Advances the drone by one explicit Euler step of length `dt`.
pub fn step_dynamics(
    s: &DroneState,
    cmd: &VelocityCommand,
    dt: f64,
    params: &DynamicsParams,
) -> Result<DroneState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !cmd.v_des.iter().all(|x| x.is_finite()) || !cmd.v_max.is_finite() {
        return Err(Error::Domain("non-finite velocity command".into()));
    }
    let target = cmd.clamped();
    let gain = (dt / params.tau_v).min(1.0);
    let mut dv = (target - s.velocity) * gain;
    let dv_cap = params.a_max * dt;
    let dv_norm = dv.norm();
    if dv_norm > dv_cap {
        dv *= dv_cap / dv_norm;
    }
    let velocity = clamp_axes(s.velocity + dv);
    let position = s.position + velocity * dt;

    let desired_yaw = yaw_from_velocity(&velocity, s.yaw);
    let err = wrap_angle(desired_yaw - s.yaw);
    let yaw_rate = (err / params.tau_yaw).clamp(-params.yaw_rate_max, params.yaw_rate_max);
    // Never step past the desired heading.
    let yaw_step = if (yaw_rate * dt).abs() > err.abs() {
        err
    } else {
        yaw_rate * dt
    };
    Ok(DroneState {
        position,
        yaw: wrap_angle(s.yaw + yaw_step),
        velocity,
        yaw_rate,
    })
}
