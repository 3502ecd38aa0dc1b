//! Episode environment: scene layout and randomization, object motion,
//! observation assembly, gate crossing, goal switching and termination.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, DroneState, DynamicsParams};
use crate::reward::{self, RewardConfig, RewardTerms};
use crate::{Error, Result};

/// Half side of the square gate opening, m.
pub const GATE_HALF_SIZE: f64 = 0.75;
/// Obstacle cylinder radius, m.
pub const OBSTACLE_RADIUS: f64 = 0.05;
/// Observation vector length.
pub const OBS_DIM: usize = 21;
/// Action vector length.
pub const ACT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: Vector3<f64>,
    /// Heading of the gate normal.
    pub yaw: f64,
    pub half_width: f64,
    pub half_height: f64,
}

impl Gate {
    pub fn new(center: Vector3<f64>, yaw: f64) -> Self {
        Self {
            center,
            yaw,
            half_width: GATE_HALF_SIZE,
            half_height: GATE_HALF_SIZE,
        }
    }

    /// Unit normal of the gate plane (horizontal).
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// Unit in-plane horizontal axis.
    pub fn lateral(&self) -> Vector3<f64> {
        Vector3::new(-self.yaw.sin(), self.yaw.cos(), 0.0)
    }

    /// World-from-gate transform. Gate frame: x lateral, y up, z along the
    /// normal, so the opening lies in the gate-frame plane z = 0.
    pub fn pose(&self) -> Isometry3<f64> {
        let rot = Rotation3::from_basis_unchecked(&[self.lateral(), Vector3::z(), self.normal()]);
        Isometry3::from_parts(
            Translation3::from(self.center),
            UnitQuaternion::from_rotation_matrix(&rot),
        )
    }

    /// Corner points in the gate frame, ordered top-left, top-right,
    /// bottom-right, bottom-left as seen from behind the normal.
    pub fn model_corners(&self) -> [Vector3<f64>; 4] {
        let (w, h) = (self.half_width, self.half_height);
        [
            Vector3::new(-w, h, 0.0),
            Vector3::new(w, h, 0.0),
            Vector3::new(w, -h, 0.0),
            Vector3::new(-w, -h, 0.0),
        ]
    }
}

/// Vertical cylinder treated as infinitely tall for collision purposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center_xy: Vector2<f64>,
    /// Base height, only used for the observation's relative z and for
    /// keypoint placement.
    pub z: f64,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            center_xy: Vector2::new(x, y),
            z,
            radius: OBSTACLE_RADIUS,
        }
    }

    pub fn horizontal_distance(&self, p: &Vector3<f64>) -> f64 {
        (p.xy() - self.center_xy).norm()
    }
}

/// How a scene object moves between steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectMotion {
    #[default]
    Static,
    /// Per-step velocity drawn i.i.d. from U(-v_max, v_max) on x and y.
    RandomWalk { v_max: f64 },
    /// Constant horizontal velocity, m/s.
    Constant { vx: f64, vy: f64 },
}

impl ObjectMotion {
    fn displacement(&self, dt: f64, rng: &mut impl Rng) -> Vector2<f64> {
        match *self {
            ObjectMotion::Static => Vector2::zeros(),
            ObjectMotion::RandomWalk { v_max } => random_walk_velocity(v_max, rng) * dt,
            ObjectMotion::Constant { vx, vy } => Vector2::new(vx, vy) * dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneMotion {
    pub gate: ObjectMotion,
    pub obstacles: ObjectMotion,
    pub target: ObjectMotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub drone: DroneState,
    /// Scenes without a gate (the training task) start with `gate_passed`.
    pub gate: Option<Gate>,
    pub obstacles: Vec<Obstacle>,
    pub target: Vector3<f64>,
    pub target_size: f64,
    /// Heading reported for the target in the observation's goal block.
    pub target_yaw: f64,
    pub gate_passed: bool,
    pub t: f64,
    pub steps: u32,
    pub done: bool,
    pub motion: SceneMotion,
    pub rng_seed: u64,
}

impl WorldState {
    /// Gate center until the gate is passed, then the landing target.
    pub fn current_goal(&self) -> Vector3<f64> {
        match (&self.gate, self.gate_passed) {
            (Some(g), false) => g.center,
            _ => self.target,
        }
    }

    /// (size, yaw) of the current goal.
    pub fn current_goal_shape(&self) -> (f64, f64) {
        match (&self.gate, self.gate_passed) {
            (Some(g), false) => (2.0 * g.half_width, g.yaw),
            _ => (self.target_size, self.target_yaw),
        }
    }

    /// Nearest obstacle and its horizontal axis distance.
    pub fn nearest_obstacle(&self) -> Option<(&Obstacle, f64)> {
        let p = self.drone.position;
        self.obstacles
            .iter()
            .map(|o| (o, o.horizontal_distance(&p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// The 21-element policy input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn goal(&self) -> Vector3<f64> {
        Vector3::new(self.0[12], self.0[13], self.0[14])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dt: f64,
    /// Episode time limit, s.
    pub time_limit: f64,
    /// Distance to the target counted as arrival, m.
    pub success_radius: f64,
    /// Drone body radius for obstacle collisions, m.
    pub drone_radius: f64,
    /// Below this altitude the drone has hit the ground, m.
    pub ground_z: f64,
    /// Outer half-size of the gate frame; crossings between the opening and
    /// this bound hit the frame.
    pub frame_outer: f64,
    pub dynamics: DynamicsParams,
    /// Spawn box for drone and target: x, y in [-xy, xy].
    pub spawn_xy: f64,
    pub spawn_z_min: f64,
    pub spawn_z_max: f64,
    /// Minimum horizontal drone-to-target distance at spawn, m.
    pub min_target_distance: f64,
    /// Obstacles placed along the drone-target line.
    pub n_obstacles: usize,
    /// Chance that an episode gets its obstacles at all.
    pub obstacle_probability: f64,
    /// Episodes per environment over which the obstacle chance rises
    /// linearly from 0 to `obstacle_probability` (0: no ramp).
    pub obstacle_ramp_episodes: u32,
    pub long_offset_min: f64,
    pub long_offset_max: f64,
    pub lat_offset_max: f64,
    pub obstacle_z_max: f64,
    pub target_size: f64,
    /// Target sizes are drawn from `[target_size, target_size_max]` and the
    /// target heading uniformly, so the goal-shape inputs vary in training.
    pub target_size_max: f64,
    /// Random-walk speed bound applied to the target and obstacles.
    pub object_speed: f64,
    /// Upper bound for the constant target drift sampled per episode.
    pub target_drift_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: dynamics::DT,
            time_limit: 10.0,
            success_radius: 0.2,
            drone_radius: 0.15,
            ground_z: 0.05,
            frame_outer: 0.95,
            dynamics: DynamicsParams::default(),
            spawn_xy: 4.0,
            spawn_z_min: 0.3,
            spawn_z_max: 4.0,
            min_target_distance: 1.5,
            n_obstacles: 1,
            obstacle_probability: 1.0,
            obstacle_ramp_episodes: 0,
            long_offset_min: 0.25,
            long_offset_max: 0.75,
            lat_offset_max: 0.5,
            obstacle_z_max: 2.0,
            target_size: 0.5,
            target_size_max: 1.5,
            object_speed: 0.3,
            target_drift_max: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("time_limit", self.time_limit),
            ("success_radius", self.success_radius),
            ("spawn_xy", self.spawn_xy),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("world.{name} must be positive")));
            }
        }
        if self.spawn_z_min >= self.spawn_z_max || self.long_offset_min > self.long_offset_max {
            return Err(Error::Config("world spawn ranges are empty".into()));
        }
        if !(0.0..=1.0).contains(&self.obstacle_probability) {
            return Err(Error::Config("world.obstacle_probability must lie in [0, 1]".into()));
        }
        if self.object_speed < 0.0 || self.target_drift_max < 0.0 {
            return Err(Error::Config("object speeds must be non-negative".into()));
        }
        if self.min_target_distance >= 2.0 * self.spawn_xy {
            return Err(Error::Config(
                "min_target_distance cannot be met inside the spawn box".into(),
            ));
        }
        Ok(())
    }

    pub fn max_steps(&self) -> u32 {
        (self.time_limit / self.dt).round() as u32
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Horizontal unit vector perpendicular to `l`: `(l x z) / |l x z|`.
pub fn lateral_axis(l: &Vector3<f64>) -> Option<Vector3<f64>> {
    let c = l.cross(&Vector3::z());
    let n = c.norm();
    (n > 1e-9).then(|| c / n)
}

/// Obstacle center from the drone position, the drone-to-target vector,
/// the longitudinal fraction along it and the signed lateral offset.
pub fn obstacle_from_offsets(
    drone: &Vector3<f64>,
    l: &Vector3<f64>,
    long_frac: f64,
    lat: f64,
) -> Option<Vector2<f64>> {
    let l_lat = lateral_axis(l)?;
    let p = drone + l * long_frac + l_lat * lat;
    Some(p.xy())
}

/// Samples a training episode: drone and target in the spawn box, obstacles
/// offset along and across the drone-target line, no gate.
pub fn randomize_episode(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> WorldState {
    let seed = rng.random::<u64>();
    let drone_pos = Vector3::new(
        uniform(rng, -cfg.spawn_xy, cfg.spawn_xy),
        uniform(rng, -cfg.spawn_xy, cfg.spawn_xy),
        uniform(rng, cfg.spawn_z_min, cfg.spawn_z_max),
    );
    let yaw = uniform(rng, -FRAC_PI_2, FRAC_PI_2);
    let target = loop {
        let t = Vector3::new(
            uniform(rng, -cfg.spawn_xy, cfg.spawn_xy),
            uniform(rng, -cfg.spawn_xy, cfg.spawn_xy),
            uniform(rng, cfg.spawn_z_min, cfg.spawn_z_max),
        );
        if (t - drone_pos).xy().norm() >= cfg.min_target_distance {
            break t;
        }
    };
    let l = target - drone_pos;
    let with_obstacles = rng.random::<f64>() < cfg.obstacle_probability;
    let mut obstacles: Vec<Obstacle> = (0..cfg.n_obstacles)
        .map(|_| {
            let frac = uniform(rng, cfg.long_offset_min, cfg.long_offset_max);
            let lat = uniform(rng, -cfg.lat_offset_max, cfg.lat_offset_max);
            let z = uniform(rng, 0.0, cfg.obstacle_z_max);
            let c = obstacle_from_offsets(&drone_pos, &l, frac, lat)
                .expect("target is horizontally separated from the drone");
            Obstacle::new(c.x, c.y, z)
        })
        .collect();
    if !with_obstacles {
        obstacles.clear();
    }
    let target_size = uniform(rng, cfg.target_size, cfg.target_size_max.max(cfg.target_size));
    let target_yaw = uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
    let drift_speed = uniform(rng, 0.0, cfg.target_drift_max);
    let drift_dir = uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
    let target_motion = if drift_speed > 0.0 {
        ObjectMotion::Constant {
            vx: drift_speed * drift_dir.cos(),
            vy: drift_speed * drift_dir.sin(),
        }
    } else {
        ObjectMotion::RandomWalk {
            v_max: cfg.object_speed,
        }
    };
    WorldState {
        drone: DroneState::at_rest(drone_pos, yaw),
        gate: None,
        obstacles,
        target,
        target_size,
        target_yaw,
        gate_passed: true,
        t: 0.0,
        steps: 0,
        done: false,
        motion: SceneMotion {
            gate: ObjectMotion::RandomWalk {
                v_max: cfg.object_speed,
            },
            obstacles: ObjectMotion::RandomWalk {
                v_max: cfg.object_speed,
            },
            target: target_motion,
        },
        rng_seed: seed,
    }
}

/// Velocity sample with x and y i.i.d. in U(-v_max, v_max).
pub fn random_walk_velocity(v_max: f64, rng: &mut impl Rng) -> Vector2<f64> {
    if v_max <= 0.0 {
        return Vector2::zeros();
    }
    Vector2::new(uniform(rng, -v_max, v_max), uniform(rng, -v_max, v_max))
}

/// Displaces gate, obstacles and target according to `w.motion`.
pub fn move_objects(w: &mut WorldState, dt: f64, rng: &mut impl Rng) {
    if let Some(g) = w.gate.as_mut() {
        let d = w.motion.gate.displacement(dt, rng);
        g.center.x += d.x;
        g.center.y += d.y;
    }
    for o in &mut w.obstacles {
        o.center_xy += w.motion.obstacles.displacement(dt, rng);
    }
    let d = w.motion.target.displacement(dt, rng);
    w.target.x += d.x;
    w.target.y += d.y;
}

/// Assembles the policy input from a world state.
pub fn observe(w: &WorldState) -> Observation {
    observe_with(w, w.current_goal(), w.current_goal_shape(), w.nearest_obstacle().map(|(o, _)| *o))
}

/// Observation from explicit goal and obstacle estimates (used when the
/// scene is perceived rather than known).
pub fn observe_with(
    w: &WorldState,
    goal: Vector3<f64>,
    goal_shape: (f64, f64),
    obstacle: Option<Obstacle>,
) -> Observation {
    let d = &w.drone;
    let mut o = [0.0; OBS_DIM];
    o[0..3].copy_from_slice(d.position.as_slice());
    o[5] = d.yaw;
    o[6..9].copy_from_slice(d.velocity.as_slice());
    o[11] = d.yaw_rate;
    o[12..15].copy_from_slice(goal.as_slice());
    o[15] = goal_shape.0;
    o[16] = goal_shape.1;
    if let Some(ob) = obstacle {
        o[17] = ob.center_xy.x - d.position.x;
        o[18] = ob.center_xy.y - d.position.y;
        o[19] = ob.z - d.position.z;
        o[20] = ob.radius;
    }
    Observation(o)
}

/// Where and how the drone crossed a gate plane during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCrossing {
    pub lateral: f64,
    pub vertical: f64,
    pub through_opening: bool,
    pub frame_hit: bool,
}

impl GateCrossing {
    /// Distance of the crossing point from the gate center, m.
    pub fn offset(&self) -> f64 {
        self.lateral.hypot(self.vertical)
    }
}

/// Detects a plane crossing between two consecutive (drone, gate) states,
/// evaluated in the moving gate's frame.
pub fn detect_gate_crossing(
    gate_prev: &Gate,
    gate_now: &Gate,
    p_prev: &Vector3<f64>,
    p_now: &Vector3<f64>,
    frame_outer: f64,
) -> Option<GateCrossing> {
    let r0 = p_prev - gate_prev.center;
    let r1 = p_now - gate_now.center;
    let s0 = r0.dot(&gate_prev.normal());
    let s1 = r1.dot(&gate_now.normal());
    if (s0 < 0.0) == (s1 < 0.0) {
        return None;
    }
    let frac = s0 / (s0 - s1);
    let rel = r0 + (r1 - r0) * frac;
    let lateral = rel.dot(&gate_now.lateral());
    let vertical = rel.z;
    let through_opening =
        lateral.abs() <= gate_now.half_width && vertical.abs() <= gate_now.half_height;
    let frame_hit = !through_opening && lateral.abs() <= frame_outer && vertical.abs() <= frame_outer;
    Some(GateCrossing {
        lateral,
        vertical,
        through_opening,
        frame_hit,
    })
}

/// Obstacle contact (horizontal, infinite height), ground contact, or a gate
/// frame hit reported by this step's crossing.
pub fn check_collision(w: &WorldState, cfg: &WorldConfig, crossing: Option<&GateCrossing>) -> bool {
    let p = &w.drone.position;
    let hit_obstacle = w
        .obstacles
        .iter()
        .any(|o| o.horizontal_distance(p) < o.radius + cfg.drone_radius);
    hit_obstacle || p.z < cfg.ground_z || crossing.is_some_and(|c| c.frame_hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub collision: bool,
    pub success: bool,
    pub timeout: bool,
    /// Set on the step where the gate was passed.
    pub gate_crossing: Option<f64>,
    pub terms: RewardTerms,
}

impl StepInfo {
    /// True when the episode ended for a reason other than failure of the
    /// agent: used to bootstrap values across the cut.
    pub fn truncated(&self) -> bool {
        !self.collision && (self.success || self.timeout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: WorldState,
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One control step: action mapping, dynamics, object motion, gate
/// crossing, collision, reward and termination.
pub fn step_env(
    w: &WorldState,
    a: &[f64; ACT_DIM],
    cfg: &WorldConfig,
    reward_cfg: &RewardConfig,
    rng: &mut impl Rng,
) -> Result<Transition> {
    if w.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    let cmd = dynamics::map_action(a)?;
    step_env_command(w, &cmd, cfg, reward_cfg, rng)
}

/// [`step_env`] for agents that command a velocity directly.
pub fn step_env_command(
    w: &WorldState,
    cmd: &dynamics::VelocityCommand,
    cfg: &WorldConfig,
    reward_cfg: &RewardConfig,
    rng: &mut impl Rng,
) -> Result<Transition> {
    if w.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    let mut next = w.clone();
    next.drone = dynamics::step_dynamics(&w.drone, &cmd, cfg.dt, &cfg.dynamics)?;
    move_objects(&mut next, cfg.dt, rng);
    next.steps += 1;
    next.t = next.steps as f64 * cfg.dt;

    let crossing = match (&w.gate, &next.gate) {
        (Some(g0), Some(g1)) => detect_gate_crossing(
            g0,
            g1,
            &w.drone.position,
            &next.drone.position,
            cfg.frame_outer,
        ),
        _ => None,
    };
    let mut info = StepInfo::default();
    if let Some(c) = crossing.filter(|c| c.through_opening) {
        if !next.gate_passed {
            next.gate_passed = true;
            info.gate_crossing = Some(c.offset());
        }
    }
    info.collision = check_collision(&next, cfg, crossing.as_ref());
    info.terms = reward::reward_terms(&next, info.collision, reward_cfg);
    info.success = !info.collision
        && next.gate_passed
        && (next.drone.position - next.target).norm() < cfg.success_radius;
    info.timeout = !info.collision && !info.success && next.steps >= cfg.max_steps();
    next.done = info.collision || info.success || info.timeout;
    let obs = observe(&next);
    Ok(Transition {
        reward: info.terms.total(),
        done: next.done,
        obs,
        info,
        state: next,
    })
}

/// A world state plus the RNG stream driving its object motion.
/// `cfg` with the obstacle chance reached after `episode` episodes of the
/// ramp.
pub fn episode_config(cfg: &WorldConfig, episode: u32) -> WorldConfig {
    let mut c = *cfg;
    if cfg.obstacle_ramp_episodes > 0 {
        let f = (episode as f64 / cfg.obstacle_ramp_episodes as f64).min(1.0);
        c.obstacle_probability = cfg.obstacle_probability * f;
    }
    c
}

pub struct Env {
    pub cfg: WorldConfig,
    pub reward: RewardConfig,
    pub state: WorldState,
    pub rng: ChaCha8Rng,
    episode_return: f64,
    episodes: u32,
}

/// Statistics of an episode that just ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub ret: f64,
    pub length: u32,
    pub success: bool,
    pub collision: bool,
}

impl Env {
    pub fn new(cfg: WorldConfig, reward: RewardConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = randomize_episode(&episode_config(&cfg, 0), &mut rng);
        Self {
            cfg,
            reward,
            state,
            rng,
            episode_return: 0.0,
            episodes: 0,
        }
    }

    pub fn with_state(cfg: WorldConfig, reward: RewardConfig, state: WorldState) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        Self {
            cfg,
            reward,
            state,
            rng,
            episode_return: 0.0,
            episodes: 0,
        }
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state)
    }

    pub fn reset(&mut self) -> Observation {
        self.episodes = self.episodes.saturating_add(1);
        self.state = randomize_episode(&episode_config(&self.cfg, self.episodes), &mut self.rng);
        self.episode_return = 0.0;
        self.observe()
    }

    pub fn step(&mut self, a: &[f64; ACT_DIM]) -> Result<(Transition, Option<EpisodeSummary>)> {
        let tr = step_env(&self.state, a, &self.cfg, &self.reward, &mut self.rng)?;
        self.state = tr.state.clone();
        self.episode_return += tr.reward;
        let summary = tr.done.then(|| EpisodeSummary {
            ret: self.episode_return,
            length: self.state.steps,
            success: tr.info.success,
            collision: tr.info.collision,
        });
        Ok((tr, summary))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub yaw: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_z: f64,
    pub reward: f64,
    pub done: bool,
}

impl TrajectoryRow {
    pub fn from_state(w: &WorldState, reward: f64) -> Self {
        let p = w.drone.position;
        let v = w.drone.velocity;
        let g = w.current_goal();
        Self {
            t: w.t,
            x: p.x,
            y: p.y,
            z: p.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            yaw: w.drone.yaw,
            goal_x: g.x,
            goal_y: g.y,
            goal_z: g.z,
            reward,
            done: w.done,
        }
    }
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
