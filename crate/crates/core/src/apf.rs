//! Artificial potential field baseline: linear attraction to the current
//! goal plus horizontal repulsion from obstacle axes.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::VelocityCommand;
use crate::world::{Obstacle, WorldState};
use crate::{Error, Result};

/// Closest the repulsion treats a drone to an obstacle surface, m.
pub const MIN_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApfConfig {
    pub k_att: f64,
    pub k_rep: f64,
    /// Repulsion cutoff distance, m.
    pub d0: f64,
    /// Speed cap on the commanded velocity, m/s.
    pub v_cap: f64,
}

impl Default for ApfConfig {
    fn default() -> Self {
        Self {
            k_att: 1.2,
            k_rep: 0.8,
            d0: 1.5,
            v_cap: 1.0,
        }
    }
}

impl ApfConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.k_att, self.k_rep, self.d0, self.v_cap];
        if all.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("apf constants must be positive: {self:?}")))
        }
    }
}

pub fn attractive(pos: &Vector3<f64>, goal: &Vector3<f64>, cfg: &ApfConfig) -> Vector3<f64> {
    cfg.k_att * (goal - pos)
}

/// Khatib repulsion from an infinite-height cylinder, acting only in the
/// horizontal plane. Zero when the drone sits exactly on the axis.
pub fn repulsive(pos: &Vector3<f64>, obstacle: &Obstacle, cfg: &ApfConfig) -> Vector3<f64> {
    let away: Vector2<f64> = pos.xy() - obstacle.center_xy;
    let dist = away.norm();
    let d = (dist - obstacle.radius).max(MIN_CLEARANCE);
    if d >= cfg.d0 || dist == 0.0 {
        return Vector3::zeros();
    }
    let mag = cfg.k_rep * (1.0 / d - 1.0 / cfg.d0) / (d * d);
    let u = away / dist;
    Vector3::new(mag * u.x, mag * u.y, 0.0)
}

/// Net potential-field velocity toward the current goal, capped at `v_cap`.
pub fn apf_velocity(w: &WorldState, cfg: &ApfConfig) -> Vector3<f64> {
    let p = w.drone.position;
    let mut v = attractive(&p, &w.current_goal(), cfg);
    for o in &w.obstacles {
        v += repulsive(&p, o, cfg);
    }
    let n = v.norm();
    if n > cfg.v_cap {
        v *= cfg.v_cap / n;
    }
    v
}

pub fn apf_step(w: &WorldState, cfg: &ApfConfig) -> VelocityCommand {
    VelocityCommand::from_velocity(apf_velocity(w, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step_dynamics, DroneState, DynamicsParams, DT};
    use crate::world::{ObjectMotion, SceneMotion};
    use proptest::prelude::*;

    fn world(pos: Vector3<f64>, target: Vector3<f64>, obstacles: Vec<Obstacle>) -> WorldState {
        WorldState {
            drone: DroneState::at_rest(pos, 0.0),
            gate: None,
            obstacles,
            target,
            target_size: 0.5,
            target_yaw: 0.0,
            gate_passed: true,
            t: 0.0,
            steps: 0,
            done: false,
            motion: SceneMotion {
                gate: ObjectMotion::Static,
                obstacles: ObjectMotion::Static,
                target: ObjectMotion::Static,
            },
            rng_seed: 0,
        }
    }

    #[test]
    fn attractive_examples() {
        let c = ApfConfig {
            k_att: 1.0,
            ..Default::default()
        };
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(attractive(&p, &p, &c), Vector3::zeros());
        let f = attractive(&Vector3::zeros(), &Vector3::new(2.0, 0.0, 0.0), &c);
        assert_eq!(f, Vector3::new(2.0, 0.0, 0.0));
        let f2 = attractive(&Vector3::zeros(), &Vector3::new(4.0, 0.0, 0.0), &c);
        assert_eq!(f2, 2.0 * f);
    }

    #[test]
    fn repulsive_examples() {
        let c = ApfConfig::default();
        // surface distance 0.5: axis at 0.55 with radius 0.05
        let o = Obstacle::new(0.0, 0.0, 1.0);
        let p = Vector3::new(0.55, 0.0, 1.0);
        let f = repulsive(&p, &o, &c);
        let expected = 0.8 * (2.0 - 2.0 / 3.0) * 4.0;
        assert!((f.norm() - expected).abs() < 1e-9);
        assert!((f.norm() - 4.2667).abs() < 1e-4);
        assert!(f.x > 0.0 && f.y == 0.0 && f.z == 0.0);
        let far = Vector3::new(1.55, 0.0, 1.0);
        assert_eq!(repulsive(&far, &o, &c), Vector3::zeros());
        assert_eq!(repulsive(&Vector3::new(0.0, 0.0, 5.0), &o, &c), Vector3::zeros());
    }

    #[test]
    fn zero_gains_rejected() {
        assert!(ApfConfig::default().validate().is_ok());
        let bad = ApfConfig {
            d0: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn repulsion_points_away_from_axis(x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.0..4.0f64) {
            let o = Obstacle::new(0.1, -0.2, 0.0);
            let p = Vector3::new(x, y, z);
            let f = repulsive(&p, &o, &ApfConfig::default());
            if f != Vector3::zeros() {
                let u = (p.xy() - o.center_xy).normalize();
                let fu = f.xy().normalize();
                prop_assert!((fu - u).norm() < 1e-9);
                prop_assert_eq!(f.z, 0.0);
            }
        }

        #[test]
        fn command_speed_is_capped(x in -5.0..5.0f64, y in -5.0..5.0f64, z in 0.1..4.0f64,
                                   ox in -5.0..5.0f64, oy in -5.0..5.0f64) {
            let w = world(Vector3::new(x, y, z), Vector3::new(3.0, -2.0, 1.5),
                          vec![Obstacle::new(ox, oy, 0.0)]);
            let c = ApfConfig::default();
            prop_assert!(apf_velocity(&w, &c).norm() <= c.v_cap + 1e-12);
            prop_assert!(apf_step(&w, &c).clamped().norm() <= c.v_cap + 1e-12);
        }
    }

    #[test]
    fn pure_function_of_state() {
        let w = world(
            Vector3::new(0.0, 0.3, 1.0),
            Vector3::new(4.0, 0.0, 1.0),
            vec![Obstacle::new(2.0, 0.0, 0.0)],
        );
        let c = ApfConfig::default();
        assert_eq!(apf_step(&w, &c), apf_step(&w.clone(), &c));
    }

    fn rollout(mut w: WorldState, c: &ApfConfig, steps: usize) -> Vec<DroneState> {
        let params = DynamicsParams::default();
        let mut out = vec![w.drone];
        for _ in 0..steps {
            let cmd = apf_step(&w, c);
            w.drone = step_dynamics(&w.drone, &cmd, DT, &params).unwrap();
            out.push(w.drone);
        }
        out
    }

    #[test]
    fn empty_arena_goes_straight_and_converges() {
        let start = Vector3::new(-2.0, 1.0, 1.0);
        let goal = Vector3::new(2.0, -1.0, 2.0);
        let c = ApfConfig::default();
        let traj = rollout(world(start, goal, vec![]), &c, 1500);
        let dir = (goal - start).normalize();
        let mut prev = (start - goal).norm();
        for s in &traj[1..] {
            let r = s.position - start;
            let off_line = (r - dir * r.dot(&dir)).norm();
            assert!(off_line < 1e-9, "left the straight line by {off_line}");
            assert!(s.velocity.norm() <= c.v_cap + 1e-9);
            let d = (s.position - goal).norm();
            // approach is monotone until the small underdamped overshoot
            if d > 0.05 {
                assert!(d <= prev + 1e-12);
            }
            prev = d;
        }
        assert!((traj.last().unwrap().position - goal).norm() < 1e-3);
    }

    #[test]
    fn collinear_obstacle_stalls() {
        let c = ApfConfig::default();
        let w = world(
            Vector3::new(-4.0, 0.0, 1.5),
            Vector3::new(3.0, 0.0, 1.5),
            vec![Obstacle::new(-0.5, 0.0, 1.0)],
        );
        let traj = rollout(w, &c, 1000);
        let tail = &traj[500..];
        assert!(tail.iter().all(|s| s.velocity.norm() < 0.05));
        assert!(tail.iter().all(|s| s.position.y == 0.0));
        let x_end = traj.last().unwrap().position.x;
        assert!(x_end < -0.5 - 0.2, "passed the obstacle: x = {x_end}");
        assert!(x_end > -0.5 - 1.5);
    }
}
