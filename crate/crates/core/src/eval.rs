//! Scenario cases, repeated trials for the learned policy and the potential
//! field planner, and the success/tracking/time metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apf::{apf_step, ApfConfig};
use crate::dynamics::{map_action, DroneState, VelocityCommand};
use crate::perception::{write_measurement_csv, MeasurementLogRow, PerceptionConfig, PerceptionPipeline};
use crate::policy_net::MlpParams;
use crate::reward::RewardConfig;
use crate::world::{
    observe, step_env_command, Gate, ObjectMotion, Obstacle, SceneMotion, WorldConfig, WorldState,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDirection {
    /// Along the drone-to-gate line, away from the drone.
    AlongPath,
    /// Sideways, side drawn per trial.
    Lateral,
    /// Sideways to the drone's left (+y).
    Left,
    /// Sideways to the drone's right (-y).
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub gate_speed: f64,
    #[serde(default = "default_direction")]
    pub gate_direction: GateDirection,
    #[serde(default)]
    pub obstacle_speed: f64,
    #[serde(default)]
    pub vary_target_height: bool,
    /// Put the first obstacle exactly on the drone-gate line with the gate
    /// moving along that line.
    #[serde(default)]
    pub trap: bool,
    #[serde(default = "default_obstacles")]
    pub n_obstacles: usize,
    /// Agents see tracked estimates instead of true object positions.
    #[serde(default)]
    pub perception: bool,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_time_cap")]
    pub time_cap: f64,
}

fn default_direction() -> GateDirection {
    GateDirection::Lateral
}
fn default_obstacles() -> usize {
    2
}
fn default_trials() -> usize {
    15
}
fn default_time_cap() -> f64 {
    20.0
}

impl CaseSpec {
    pub fn new(id: u32, name: &str) -> Self {
        Self {
            id,
            name: name.to_string(),
            gate_speed: 0.0,
            gate_direction: GateDirection::Lateral,
            obstacle_speed: 0.0,
            vary_target_height: false,
            trap: false,
            n_obstacles: 2,
            perception: false,
            n_trials: 15,
            time_cap: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_speed >= 0.0) || !(self.obstacle_speed >= 0.0) {
            return Err(Error::Config(format!("case {}: speeds must be >= 0", self.id)));
        }
        if self.n_trials == 0 || !(self.time_cap > 0.0) {
            return Err(Error::Config(format!(
                "case {}: n_trials and time_cap must be positive",
                self.id
            )));
        }
        if self.n_obstacles > 2 {
            return Err(Error::Config(format!("case {}: at most 2 obstacles", self.id)));
        }
        Ok(())
    }

    /// The five comparison cases.
    pub fn standard() -> Vec<CaseSpec> {
        vec![
            CaseSpec {
                gate_speed: 0.3,
                gate_direction: GateDirection::AlongPath,
                trap: true,
                ..Self::new(1, "gate 0.3 m/s, local-minimum obstacle")
            },
            CaseSpec {
                gate_speed: 0.3,
                ..Self::new(2, "gate 0.3 m/s")
            },
            CaseSpec {
                gate_speed: 0.3,
                vary_target_height: true,
                ..Self::new(3, "gate 0.3 m/s, varying target height")
            },
            CaseSpec {
                gate_speed: 0.3,
                obstacle_speed: 0.3,
                vary_target_height: true,
                ..Self::new(4, "gate and obstacles 0.3 m/s, varying target height")
            },
            CaseSpec {
                gate_speed: 0.6,
                ..Self::new(5, "gate 0.6 m/s")
            },
        ]
    }

    /// Flight-test analogues with the perception pipeline in the loop.
    pub fn perception_cases() -> Vec<CaseSpec> {
        vec![
            CaseSpec {
                gate_speed: 0.3,
                gate_direction: GateDirection::Left,
                n_obstacles: 1,
                perception: true,
                ..Self::new(6, "perception: slow left-moving gate")
            },
            CaseSpec {
                gate_speed: 0.8,
                gate_direction: GateDirection::Right,
                n_obstacles: 1,
                perception: true,
                ..Self::new(7, "perception: fast right-moving gate")
            },
            CaseSpec {
                n_obstacles: 1,
                perception: true,
                ..Self::new(8, "perception: static scene")
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cases: Vec<CaseSpec>,
    pub perception_cases: Vec<CaseSpec>,
    /// While the gate is ahead, agents aim at a point this far beyond the
    /// gate centre along its normal, m.
    pub pass_through: f64,
    pub write_trajectories: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cases: CaseSpec::standard(),
            perception_cases: CaseSpec::perception_cases(),
            pass_through: 0.5,
            write_trajectories: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for c in self.cases.iter().chain(&self.perception_cases) {
            c.validate()?;
            if !ids.insert(c.id) {
                return Err(Error::Config(format!("duplicate case id {}", c.id)));
            }
        }
        if !(self.pass_through >= 0.0) {
            return Err(Error::Config("eval.pass_through must be >= 0".into()));
        }
        Ok(())
    }

    pub fn find(&self, id: u32) -> Option<&CaseSpec> {
        self.cases.iter().chain(&self.perception_cases).find(|c| c.id == id)
    }
}

fn u(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn side(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Initial scene for one trial. The drone starts near x = -3.5 facing +x,
/// the gate (normal along +x) near x = 0.5 and the target 2-3 m beyond it,
/// all inside the training spawn box. The
/// first obstacle sits between drone and gate, the second between gate and
/// target; in trap layouts the first one is exactly on the drone-gate line.
pub fn case_layout(spec: &CaseSpec, rng: &mut ChaCha8Rng) -> WorldState {
    let (xd, yd, zd) = (u(rng, -3.8, -3.2), u(rng, -0.5, 0.5), u(rng, 1.2, 2.0));
    let xg = u(rng, 0.3, 0.8);
    let yg = if spec.trap { yd } else { yd + u(rng, -0.5, 0.5) };
    let zg = if spec.trap { zd } else { u(rng, 1.2, 2.0) };
    let (xt, yt) = (xg + u(rng, 2.0, 3.0), yg + u(rng, -0.5, 0.5));
    let zt = if spec.vary_target_height {
        u(rng, 0.5, 3.5)
    } else {
        zg
    };

    let f1 = u(rng, 0.4, 0.6);
    let x1 = xd + f1 * (xg - xd);
    let y1 = if spec.trap {
        yd
    } else {
        yd + f1 * (yg - yd) + side(rng) * u(rng, 0.6, 1.0)
    };
    let f2 = u(rng, 0.4, 0.6);
    let x2 = xg + f2 * (xt - xg);
    let y2 = yg + f2 * (yt - yg) + side(rng) * u(rng, 0.5, 0.9);
    let mut obstacles = vec![
        Obstacle::new(x1, y1, u(rng, 0.0, 1.0)),
        Obstacle::new(x2, y2, u(rng, 0.0, 1.0)),
    ];
    obstacles.truncate(spec.n_obstacles);

    let lateral_sign = side(rng);
    let gate_motion = match spec.gate_direction {
        _ if spec.gate_speed == 0.0 => ObjectMotion::Static,
        GateDirection::AlongPath => ObjectMotion::Constant {
            vx: spec.gate_speed,
            vy: 0.0,
        },
        GateDirection::Lateral => ObjectMotion::Constant {
            vx: 0.0,
            vy: lateral_sign * spec.gate_speed,
        },
        GateDirection::Left => ObjectMotion::Constant {
            vx: 0.0,
            vy: spec.gate_speed,
        },
        GateDirection::Right => ObjectMotion::Constant {
            vx: 0.0,
            vy: -spec.gate_speed,
        },
    };
    let obstacle_motion = if spec.obstacle_speed > 0.0 {
        ObjectMotion::Constant {
            vx: 0.0,
            vy: side(rng) * spec.obstacle_speed,
        }
    } else {
        ObjectMotion::Static
    };
    WorldState {
        drone: DroneState::at_rest(Vector3::new(xd, yd, zd), 0.0),
        gate: Some(Gate::new(Vector3::new(xg, yg, zg), 0.0)),
        obstacles,
        target: Vector3::new(xt, yt, zt),
        target_size: 0.5,
        target_yaw: 0.0,
        gate_passed: false,
        t: 0.0,
        steps: 0,
        done: false,
        motion: SceneMotion {
            gate: gate_motion,
            obstacles: obstacle_motion,
            target: ObjectMotion::Static,
        },
        rng_seed: rng.random(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Drl,
    Apf,
    Scripted,
}

impl AgentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::Drl => "drl",
            AgentKind::Apf => "apf",
            AgentKind::Scripted => "scripted",
        }
    }
}

/// Speed of the scripted straight-line agent, m/s.
pub const SCRIPTED_SPEED: f64 = 1.5;

pub enum Agent<'a> {
    Drl(&'a MlpParams<f64>),
    Apf(ApfConfig),
    /// Flies straight at the current goal, slowing down inside 0.75 m.
    Scripted,
}

impl Agent<'_> {
    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Drl(_) => AgentKind::Drl,
            Agent::Apf(_) => AgentKind::Apf,
            Agent::Scripted => AgentKind::Scripted,
        }
    }

    /// Velocity command for the state as the agent perceives it.
    pub fn command(&self, view: &WorldState) -> Result<VelocityCommand> {
        match self {
            Agent::Drl(params) => {
                let out = params.forward(&observe(view).0)?;
                let a: [f64; 4] = out.mean.as_slice().try_into().map_err(|_| Error::Shape {
                    expected: "4 actions".into(),
                    found: format!("{}", out.mean.len()),
                })?;
                if a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!("policy produced a non-finite action {a:?}")));
                }
                map_action(&a)
            }
            Agent::Apf(cfg) => Ok(apf_step(view, cfg)),
            Agent::Scripted => {
                let d = view.current_goal() - view.drone.position;
                let n = d.norm();
                let speed = SCRIPTED_SPEED.min(2.0 * n);
                let v = if n > 0.0 { d * (speed / n) } else { Vector3::zeros() };
                Ok(VelocityCommand::from_velocity(v))
            }
        }
    }
}

/// Copy of `w` whose gate centre is moved `lead` m past the gate plane, on
/// the far side from the drone. A goal-reaching agent aimed at the bare
/// centre would settle in the opening (or trail a gate receding along its
/// normal) without crossing the plane.
pub fn with_pass_through(w: &WorldState, lead: f64) -> WorldState {
    let mut v = w.clone();
    if let Some(g) = v.gate.as_mut() {
        let n = g.normal();
        let ahead = if n.dot(&(w.drone.position - g.center)) <= 0.0 {
            1.0
        } else {
            -1.0
        };
        g.center += n * (ahead * lead);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub speed: f64,
    pub phase: &'static str,
}

impl TrajectoryPoint {
    fn of(w: &WorldState) -> Self {
        let p = w.drone.position;
        Self {
            t: w.t,
            x: p.x,
            y: p.y,
            z: p.z,
            speed: w.drone.velocity.norm(),
            phase: if w.gate_passed { "target" } else { "gate" },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub case_id: u32,
    pub agent: AgentKind,
    pub trial: usize,
    pub success: bool,
    pub collision: bool,
    pub timeout: bool,
    /// In-plane distance from the gate centre at the crossing, m.
    pub gate_offset: Option<f64>,
    /// Distance to the target when the trial ended, m.
    pub final_target_error: f64,
    pub completion_time: f64,
    pub diagnostic: Option<String>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub measurements: Vec<MeasurementLogRow>,
}

impl TrialResult {
    /// Mean of the gate-crossing offset and the final target error, m.
    pub fn tracking_error(&self) -> Option<f64> {
        self.gate_offset.map(|g| 0.5 * (g + self.final_target_error))
    }
}

/// Everything a trial needs besides the agent.
#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub world: &'a WorldConfig,
    pub reward: &'a RewardConfig,
    pub perception: &'a PerceptionConfig,
    pub pass_through: f64,
}

/// Seed of trial `trial` of case `case_id`, shared by all agents so they
/// face identical layouts.
pub fn trial_seed(seed: u64, case_id: u32, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((case_id as u64) << 32)
        ^ trial as u64
}

pub fn run_trial(spec: &CaseSpec, agent: &Agent, setup: &TrialSetup, seed: u64, trial: usize) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = case_layout(spec, &mut rng);
    let wcfg = WorldConfig {
        time_limit: spec.time_cap,
        ..*setup.world
    };
    let mut pipeline = spec
        .perception
        .then(|| PerceptionPipeline::new(setup.perception.clone(), rng.random()));
    let mut result = TrialResult {
        case_id: spec.id,
        agent: agent.kind(),
        trial,
        success: false,
        collision: false,
        timeout: false,
        gate_offset: None,
        final_target_error: (w.drone.position - w.target).norm(),
        completion_time: 0.0,
        diagnostic: None,
        trajectory: vec![TrajectoryPoint::of(&w)],
        measurements: Vec::new(),
    };
    while !w.done {
        let seen = match pipeline.as_mut() {
            Some(p) => {
                p.tick(&w)?;
                p.estimated_world(&w)
            }
            None => w.clone(),
        };
        let view = with_pass_through(&seen, setup.pass_through);
        let cmd = match agent.command(&view) {
            Ok(c) => c,
            Err(e) => {
                result.diagnostic = Some(e.to_string());
                break;
            }
        };
        let tr = step_env_command(&w, &cmd, &wcfg, setup.reward, &mut rng)?;
        if let Some(off) = tr.info.gate_crossing {
            result.gate_offset = Some(off);
        }
        result.success = tr.info.success;
        result.collision = tr.info.collision;
        result.timeout = tr.info.timeout;
        w = tr.state;
        result.trajectory.push(TrajectoryPoint::of(&w));
    }
    result.final_target_error = (w.drone.position - w.target).norm();
    result.completion_time = w.t;
    if let Some(p) = pipeline {
        result.measurements = p.log;
    }
    Ok(result)
}

pub fn run_case(spec: &CaseSpec, agent: &Agent, setup: &TrialSetup, seed: u64) -> Result<Vec<TrialResult>> {
    spec.validate()?;
    (0..spec.n_trials)
        .map(|i| run_trial(spec, agent, setup, trial_seed(seed, spec.id, i), i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub n_trials: usize,
    pub successes: usize,
    /// `(1 - failures / n) * 100`.
    pub success_rate: f64,
    /// Mean and (population) standard deviation of the per-trial tracking
    /// error over successful trials, cm. `None` without successes.
    pub tracking_me_cm: Option<f64>,
    pub tracking_sd_cm: Option<f64>,
    /// Mean completion time of successful trials, s.
    pub mean_time: Option<f64>,
}

pub fn compute_metrics(results: &[TrialResult]) -> Result<CaseMetrics> {
    if results.is_empty() {
        return Err(Error::Domain("metrics need at least one trial".into()));
    }
    let n = results.len();
    let ok: Vec<&TrialResult> = results.iter().filter(|r| r.success).collect();
    let failures = n - ok.len();
    let success_rate = (1.0 - failures as f64 / n as f64) * 100.0;
    if ok.is_empty() {
        return Ok(CaseMetrics {
            n_trials: n,
            successes: 0,
            success_rate,
            tracking_me_cm: None,
            tracking_sd_cm: None,
            mean_time: None,
        });
    }
    let errs: Vec<f64> = ok
        .iter()
        .map(|r| r.tracking_error().unwrap_or(r.final_target_error) * 100.0)
        .collect();
    let m = errs.len() as f64;
    let me = errs.iter().sum::<f64>() / m;
    let sd = (errs.iter().map(|e| (e - me).powi(2)).sum::<f64>() / m).sqrt();
    let tt = ok.iter().map(|r| r.completion_time).sum::<f64>() / m;
    Ok(CaseMetrics {
        n_trials: n,
        successes: ok.len(),
        success_rate,
        tracking_me_cm: Some(me),
        tracking_sd_cm: Some(sd),
        mean_time: Some(tt),
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "NA".to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub case_id: u32,
    pub agent: AgentKind,
    pub metrics: CaseMetrics,
}

pub fn write_report_csv<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "case",
        "agent",
        "n_trials",
        "successes",
        "success_rate_pct",
        "tracking_me_cm",
        "tracking_sd_cm",
        "tt_s",
    ])?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.case_id.to_string(),
            r.agent.name().to_string(),
            m.n_trials.to_string(),
            m.successes.to_string(),
            format!("{:.1}", m.success_rate),
            fmt_opt(m.tracking_me_cm, 2),
            fmt_opt(m.tracking_sd_cm, 2),
            fmt_opt(m.mean_time, 2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trials_csv<W: Write>(out: W, results: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "case",
        "agent",
        "trial",
        "success",
        "collision",
        "timeout",
        "gate_offset_m",
        "final_target_error_m",
        "tracking_error_m",
        "completion_time_s",
        "diagnostic",
    ])?;
    for r in results {
        w.write_record([
            r.case_id.to_string(),
            r.agent.name().to_string(),
            r.trial.to_string(),
            r.success.to_string(),
            r.collision.to_string(),
            r.timeout.to_string(),
            fmt_opt(r.gate_offset, 6),
            format!("{:.6}", r.final_target_error),
            fmt_opt(r.tracking_error(), 6),
            format!("{:.2}", r.completion_time),
            r.diagnostic.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(out: W, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-trial summary and, if enabled, trajectory and measurement
/// logs of every trial under `dir`.
pub fn write_trial_files(dir: &Path, results: &[TrialResult], trajectories: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if !trajectories {
        return Ok(());
    }
    let traj_dir = dir.join("trajectories");
    std::fs::create_dir_all(&traj_dir)?;
    for r in results {
        let stem = format!("case{}_{}_trial{:02}", r.case_id, r.agent.name(), r.trial);
        let f = std::fs::File::create(traj_dir.join(format!("{stem}.csv")))?;
        write_trajectory_csv(std::io::BufWriter::new(f), &r.trajectory)?;
        if !r.measurements.is_empty() {
            let f = std::fs::File::create(traj_dir.join(format!("{stem}_measurements.csv")))?;
            write_measurement_csv(std::io::BufWriter::new(f), &r.measurements)?;
        }
    }
    Ok(())
}

/// Runs every case for the learned policy and the potential-field planner
/// on identical layouts.
pub fn compare(
    params: &MlpParams<f64>,
    apf: &ApfConfig,
    cases: &[CaseSpec],
    setup: &TrialSetup,
    seed: u64,
) -> Result<(Vec<ReportRow>, Vec<TrialResult>)> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for spec in cases {
        for agent in [Agent::Drl(params), Agent::Apf(*apf)] {
            let results = run_case(spec, &agent, setup, seed)?;
            rows.push(ReportRow {
                case_id: spec.id,
                agent: agent.kind(),
                metrics: compute_metrics(&results)?,
            });
            all.extend(results);
        }
    }
    Ok((rows, all))
}
