//! Navigation reward: goal proximity, obstacle proximity, collision and
//! speed-near-obstacle terms, summed per step.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::world::WorldState;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Offset keeping the proximity reward finite at the goal.
    pub c_p: f64,
    /// Obstacle penalty scale.
    pub c_o: f64,
    /// Collision penalty magnitude.
    pub c_penal: f64,
    /// Speed penalty scale inside the safety region.
    pub c_v: f64,
    /// Safety radius around an obstacle, m.
    pub r_safety: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c_p: 0.1,
            c_o: 2.0,
            c_penal: 100.0,
            c_v: 0.1,
            r_safety: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c_p, self.c_o, self.c_penal, self.c_v, self.r_safety];
        if all.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "reward constants must be positive: {self:?}"
            )))
        }
    }
}

/// `1 / (d_goal + c_p)`.
pub fn r_proximity(d_goal: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(d_goal >= 0.0) {
        return Err(Error::Domain(format!("goal distance {d_goal} < 0")));
    }
    Ok(1.0 / (d_goal + cfg.c_p))
}

/// `-c_o * exp(-d_obs / r_safety)`.
pub fn r_obstacle(d_obs: f64, cfg: &RewardConfig) -> f64 {
    -cfg.c_o * (-d_obs / cfg.r_safety).exp()
}

pub fn r_collision(collided: bool, cfg: &RewardConfig) -> f64 {
    if collided {
        -cfg.c_penal
    } else {
        0.0
    }
}

/// `-c_v * |v|^2` inside the safety region, zero outside.
pub fn r_velocity(v: &Vector3<f64>, d_obs: f64, cfg: &RewardConfig) -> f64 {
    if d_obs < cfg.r_safety {
        -cfg.c_v * v.norm_squared()
    } else {
        0.0
    }
}

/// Per-term breakdown of one step's reward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardTerms {
    pub proximity: f64,
    pub obstacle: f64,
    pub collision: f64,
    pub velocity: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.proximity + self.obstacle + self.collision + self.velocity
    }
}

/// Evaluates every term on the current goal distance, horizontal distance to
/// the nearest obstacle axis, drone velocity and collision flag.
///
/// Scenes without obstacles contribute no obstacle or speed penalty.
pub fn reward_terms(w: &WorldState, collided: bool, cfg: &RewardConfig) -> RewardTerms {
    let d_goal = (w.drone.position - w.current_goal()).norm();
    let d_obs = w.nearest_obstacle().map(|(_, d)| d).unwrap_or(f64::INFINITY);
    RewardTerms {
        proximity: 1.0 / (d_goal + cfg.c_p),
        obstacle: if d_obs.is_finite() {
            r_obstacle(d_obs, cfg)
        } else {
            0.0
        },
        collision: r_collision(collided, cfg),
        velocity: r_velocity(&w.drone.velocity, d_obs, cfg),
    }
}

pub fn r_total(w: &WorldState, collided: bool, cfg: &RewardConfig) -> f64 {
    reward_terms(w, collided, cfg).total()
}
