use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use drone_nav::config::RunConfig;
use drone_nav::eval::{
    self, write_report_csv, write_trajectory_csv, write_trial_files, write_trials_csv, Agent,
    CaseSpec, ReportRow, TrialResult, TrialSetup,
};
use drone_nav::perception::{selftest, write_measurement_csv};
use drone_nav::policy_net::{Architecture, MlpParams};
use drone_nav::ppo::{evaluate_policy, train, write_curve_csv, CurveRow};
use drone_nav::world::{Env, WorldConfig};
use drone_nav::{Error, Result};

#[derive(Parser)]
#[command(name = "drone-nav", version, about = "Train, evaluate and compare drone navigation agents")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Drl,
    Apf,
    Scripted,
}

#[derive(Subcommand)]
enum Command {
    /// Train the policy with PPO.
    Train,
    /// Run one agent over the scenario cases.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Single case id; all configured cases when omitted.
        #[arg(long)]
        case: Option<u32>,
        /// Defaults to drl with a checkpoint, apf without.
        #[arg(long, value_enum)]
        agent: Option<AgentArg>,
    },
    /// Learned policy against the potential-field planner on the comparison cases.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: Option<u32>,
    },
    /// Pose-recovery, noise and tracking checks of the perception pipeline.
    PerceptionSelftest,
    /// Re-runs a single trial and writes its full logs.
    Replay {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        case: u32,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long, value_enum)]
        agent: Option<AgentArg>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Selftest) => {
            eprintln!("perception self-test failed");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
    match cli.cmd {
        Command::Train => cmd_train(&cfg)?,
        Command::Eval {
            checkpoint,
            case,
            agent,
        } => cmd_eval(&cfg, checkpoint.as_deref(), case, agent)?,
        Command::Compare { checkpoint, case } => cmd_compare(&cfg, &checkpoint, case)?,
        Command::PerceptionSelftest => {
            if !cmd_selftest(&cfg)? {
                return Err(Failure::Selftest);
            }
        }
        Command::Replay {
            checkpoint,
            case,
            trial,
            agent,
        } => cmd_replay(&cfg, checkpoint.as_deref(), case, trial, agent)?,
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let envs: Vec<Env> = (0..cfg.ppo.n_envs)
        .map(|i| Env::new(cfg.world, cfg.reward, cfg.seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect();
    let eval_seed = cfg.seed ^ 0xE7A1_5EED;
    let episodes = cfg.ppo.eval_episodes;
    let eval_world = WorldConfig {
        obstacle_ramp_episodes: 0,
        ..cfg.world
    };
    let mut evaluator = |p: &MlpParams<f32>| {
        let mut env = Env::new(eval_world, cfg.reward, eval_seed);
        evaluate_policy(p, &mut env, episodes)
    };
    let progress = |r: &CurveRow| {
        eprintln!(
            "update {:4} step {:9} reward {:9.2} len {:6.1} success {:.2}{}",
            r.update,
            r.step,
            r.mean_reward,
            r.mean_ep_len,
            r.success_rate,
            r.eval_mean_reward
                .zip(r.eval_success_rate)
                .map(|(m, s)| format!(" eval {m:.2} success {s:.2}"))
                .unwrap_or_default()
        )
    };
    let outcome = train::<f32, _>(
        &cfg.ppo,
        Architecture::standard(),
        envs,
        cfg.seed,
        Some(&mut evaluator),
        progress,
    )?;
    let dir = &cfg.out_dir;
    outcome.best.save(&dir.join("policy.ckpt"))?;
    outcome.last.save(&dir.join("policy_last.ckpt"))?;
    write_curve_csv(create(&dir.join("curve.csv"))?, &outcome.curve)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    if let Some(e) = outcome.best_eval {
        println!(
            "best evaluation: mean reward {:.2} (sd {:.2}), success {:.2}",
            e.mean_reward, e.std_reward, e.success_rate
        );
    }
    if let Some(why) = outcome.aborted {
        return Err(Error::Numerical(format!(
            "training stopped early, last good parameters saved: {why}"
        )));
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_policy(path: &Path) -> Result<MlpParams<f64>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    MlpParams::<f64>::load(path, Architecture::standard())
}

fn pick_agent<'a>(
    cfg: &RunConfig,
    params: Option<&'a MlpParams<f64>>,
    agent: Option<AgentArg>,
) -> Result<Agent<'a>> {
    match (agent, params) {
        (Some(AgentArg::Apf), _) | (None, None) => Ok(Agent::Apf(cfg.apf)),
        (Some(AgentArg::Scripted), _) => Ok(Agent::Scripted),
        (Some(AgentArg::Drl), None) => Err(Error::Config("the drl agent needs --checkpoint".into())),
        (Some(AgentArg::Drl), Some(p)) | (None, Some(p)) => Ok(Agent::Drl(p)),
    }
}

fn select_cases(cfg: &RunConfig, all: Vec<CaseSpec>, case: Option<u32>) -> Result<Vec<CaseSpec>> {
    match case {
        None => Ok(all),
        Some(id) => cfg
            .eval
            .find(id)
            .cloned()
            .map(|c| vec![c])
            .ok_or_else(|| Error::Config(format!("no case with id {id}"))),
    }
}

fn setup(cfg: &RunConfig) -> TrialSetup<'_> {
    TrialSetup {
        world: &cfg.world,
        reward: &cfg.reward,
        perception: &cfg.perception,
        pass_through: cfg.eval.pass_through,
    }
}

fn print_report(rows: &[ReportRow]) {
    let na = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into());
    println!("case agent  success%  ME(cm)  SD(cm)  TT(s)");
    for r in rows {
        let m = &r.metrics;
        println!(
            "{:4} {:6} {:8.1}  {:>6}  {:>6}  {:>5}",
            r.case_id,
            r.agent.name(),
            m.success_rate,
            na(m.tracking_me_cm),
            na(m.tracking_sd_cm),
            na(m.mean_time)
        );
    }
}

fn write_results(cfg: &RunConfig, prefix: &str, rows: &[ReportRow], results: &[TrialResult]) -> Result<()> {
    let dir = &cfg.out_dir;
    write_report_csv(create(&dir.join(format!("{prefix}_report.csv")))?, rows)?;
    write_trials_csv(create(&dir.join(format!("{prefix}_trials.csv")))?, results)?;
    write_trial_files(dir, results, cfg.eval.write_trajectories)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, case: Option<u32>, agent: Option<AgentArg>) -> Result<()> {
    let params = checkpoint.map(load_policy).transpose()?;
    let agent = pick_agent(cfg, params.as_ref(), agent)?;
    let all = cfg.eval.cases.iter().chain(&cfg.eval.perception_cases).cloned().collect();
    let cases = select_cases(cfg, all, case)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for spec in &cases {
        let rs = eval::run_case(spec, &agent, &setup(cfg), cfg.seed)?;
        rows.push(ReportRow {
            case_id: spec.id,
            agent: agent.kind(),
            metrics: eval::compute_metrics(&rs)?,
        });
        results.extend(rs);
    }
    print_report(&rows);
    write_results(cfg, "eval", &rows, &results)
}

fn cmd_compare(cfg: &RunConfig, checkpoint: &Path, case: Option<u32>) -> Result<()> {
    let params = load_policy(checkpoint)?;
    let cases = select_cases(cfg, cfg.eval.cases.clone(), case)?;
    let (rows, results) = eval::compare(&params, &cfg.apf, &cases, &setup(cfg), cfg.seed)?;
    print_report(&rows);
    write_results(cfg, "compare", &rows, &results)
}

fn cmd_selftest(cfg: &RunConfig) -> Result<bool> {
    let checks = selftest(&cfg.perception, cfg.seed)?;
    let mut w = csv::Writer::from_writer(create(&cfg.out_dir.join("selftest.csv"))?);
    w.write_record(["check", "value", "threshold", "pass"])?;
    for c in &checks {
        println!(
            "{} {:<36} {:.3e} (threshold {:.3e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
        w.write_record([
            c.name.to_string(),
            format!("{:e}", c.value),
            format!("{:e}", c.threshold),
            c.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(checks.iter().all(|c| c.pass))
}

fn cmd_replay(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    case: u32,
    trial: usize,
    agent: Option<AgentArg>,
) -> Result<()> {
    let params = checkpoint.map(load_policy).transpose()?;
    let agent = pick_agent(cfg, params.as_ref(), agent)?;
    let spec = cfg
        .eval
        .find(case)
        .ok_or_else(|| Error::Config(format!("no case with id {case}")))?;
    if trial >= spec.n_trials {
        return Err(Error::Config(format!("case {case} has {} trials", spec.n_trials)));
    }
    let r = eval::run_trial(spec, &agent, &setup(cfg), eval::trial_seed(cfg.seed, case, trial), trial)?;
    let stem = format!("replay_case{case}_{}_trial{trial:02}", r.agent.name());
    write_trajectory_csv(create(&cfg.out_dir.join(format!("{stem}.csv")))?, &r.trajectory)?;
    if !r.measurements.is_empty() {
        write_measurement_csv(
            create(&cfg.out_dir.join(format!("{stem}_measurements.csv")))?,
            &r.measurements,
        )?;
    }
    for p in r.trajectory.iter().step_by(25) {
        println!(
            "t {:5.2}  pos ({:6.2}, {:6.2}, {:5.2})  speed {:4.2}  {}",
            p.t, p.x, p.y, p.z, p.speed, p.phase
        );
    }
    println!(
        "success {} collision {} timeout {} time {:.2}s gate offset {} target error {:.3} m{}",
        r.success,
        r.collision,
        r.timeout,
        r.completion_time,
        r.gate_offset.map(|g| format!("{g:.3} m")).unwrap_or_else(|| "NA".into()),
        r.final_target_error,
        r.diagnostic.map(|d| format!(" ({d})")).unwrap_or_default()
    );
    Ok(())
}
