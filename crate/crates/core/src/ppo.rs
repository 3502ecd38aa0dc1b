//! PPO with a clipped surrogate, GAE, vectorized rollouts and Adam.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy_net::{gaussian_entropy, sample_action, Architecture, MlpParams, Scalar};
use crate::world::{EpisodeSummary, Observation, Transition, ACT_DIM, OBS_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub n_steps: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub total_steps: usize,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub epochs_per_update: usize,
    pub max_grad_norm: f64,
    /// Scale rewards by a running estimate of the discounted-return std
    /// before they reach the critic. Logged rewards stay raw.
    pub normalize_rewards: bool,
    /// Evaluate and consider the policy for model selection every this many
    /// updates (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub select_by: Selection,
    pub success_value: SuccessValue,
}

/// Which evaluation statistic picks the kept checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    MeanReward,
    /// Success rate, ties broken by mean reward.
    SuccessRate,
}

/// Value credited to the state in which an episode ended in success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessValue {
    /// The critic's estimate, as for a timeout.
    Critic,
    /// Holding position at the goal: the last reward received forever,
    /// `r / (1 - gamma)`.
    Hold,
}

impl Selection {
    pub fn better(&self, a: &EvalStats, b: &EvalStats) -> bool {
        match self {
            Selection::MeanReward => a.mean_reward > b.mean_reward,
            Selection::SuccessRate => {
                (a.success_rate, a.mean_reward) > (b.success_rate, b.mean_reward)
            }
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_envs: 8,
            n_steps: 2048,
            batch_size: 256,
            clip: 0.2,
            gamma: 0.99,
            entropy_coef: 0.01,
            lr: 1e-4,
            total_steps: 2_000_000,
            gae_lambda: 0.95,
            value_coef: 0.5,
            epochs_per_update: 10,
            max_grad_norm: 0.5,
            normalize_rewards: true,
            eval_every: 10,
            eval_episodes: 32,
            select_by: Selection::MeanReward,
            success_value: SuccessValue::Critic,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let rollout = self.n_envs * self.n_steps;
        if self.n_envs == 0 || self.n_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("ppo sizes must be positive".into()));
        }
        if rollout % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must divide n_envs * n_steps = {rollout}",
                self.batch_size
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("clip must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if self.lr < 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and max_grad_norm > 0".into()));
        }
        Ok(())
    }

    pub fn rollout_len(&self) -> usize {
        self.n_envs * self.n_steps
    }
}

/// Anything PPO can collect experience from.
pub trait Environment {
    fn observe(&self) -> Observation;
    fn reset(&mut self) -> Observation;
    fn step(&mut self, a: &[f64; ACT_DIM]) -> Result<(Transition, Option<EpisodeSummary>)>;
}

impl Environment for crate::world::Env {
    fn observe(&self) -> Observation {
        crate::world::Env::observe(self)
    }

    fn reset(&mut self) -> Observation {
        crate::world::Env::reset(self)
    }

    fn step(&mut self, a: &[f64; ACT_DIM]) -> Result<(Transition, Option<EpisodeSummary>)> {
        crate::world::Env::step(self, a)
    }
}

/// Running mean/variance (parallel-merge form).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMeanStd {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for RunningMeanStd {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }
}

impl RunningMeanStd {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let delta = mean - self.mean;
        let tot = self.count + n;
        self.mean += delta * n / tot;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / tot;
        self.var = m2 / tot;
        self.count = tot;
    }
}

/// Divides rewards by the running std of the discounted return.
#[derive(Debug, Clone)]
pub struct RewardScaler {
    gamma: f64,
    returns: Vec<f64>,
    rms: RunningMeanStd,
    enabled: bool,
}

impl RewardScaler {
    pub const CLIP: f64 = 10.0;

    pub fn new(n_envs: usize, gamma: f64, enabled: bool) -> Self {
        Self {
            gamma,
            returns: vec![0.0; n_envs],
            rms: RunningMeanStd::default(),
            enabled,
        }
    }

    pub fn scale(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        if !self.enabled {
            return rewards.to_vec();
        }
        for (ret, r) in self.returns.iter_mut().zip(rewards) {
            *ret = *ret * self.gamma + r;
        }
        self.rms.update(&self.returns);
        let std = (self.rms.var + 1e-8).sqrt();
        for (ret, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *ret = 0.0;
            }
        }
        rewards
            .iter()
            .map(|r| (r / std).clamp(-Self::CLIP, Self::CLIP))
            .collect()
    }
}

/// A set of environments stepped in lockstep.
pub struct VecEnv<E> {
    pub envs: Vec<E>,
    obs: Vec<Observation>,
    scaler: RewardScaler,
}

impl<E: Environment> VecEnv<E> {
    pub fn new(mut envs: Vec<E>, gamma: f64, normalize_rewards: bool) -> Self {
        let obs = envs.iter_mut().map(|e| e.observe()).collect();
        let n = envs.len();
        Self {
            envs,
            obs,
            scaler: RewardScaler::new(n, gamma, normalize_rewards),
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

/// Transitions from `n_steps` steps of `n_envs` environments, stored
/// step-major (`index = step * n_envs + env`).
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_steps: usize,
    pub obs: Vec<f32>,
    /// Pre-clip Gaussian samples.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Rewards as seen by the critic (scaled, with value bootstrap folded in
    /// at truncations).
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation following the last stored step.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn obs_to_f32(o: &Observation, out: &mut Vec<f32>) {
    out.extend(o.0.iter().map(|&v| v as f32));
}

fn values_of<T: Scalar>(params: &MlpParams<T>, obs: &[Observation]) -> Result<Vec<f64>> {
    let x: Vec<T> = obs.iter().flat_map(|o| o.0.iter().map(|&v| T::f(v))).collect();
    let cache = params.forward_batch(&x, obs.len())?;
    Ok(cache.value.iter().map(|v| v.as_f64()).collect())
}

/// Steps every environment `n_steps` times with actions sampled from the
/// policy. Finished episodes reset automatically. Episodes cut by success
/// or the time limit fold `gamma * V(final obs)` into their last reward, so
/// only collisions are treated as true terminals by the critic. With
/// [`SuccessValue::Hold`] a success folds in the hold value instead.
pub fn collect_rollouts<T: Scalar, E: Environment>(
    params: &MlpParams<T>,
    venv: &mut VecEnv<E>,
    n_steps: usize,
    gamma: f64,
    success_value: SuccessValue,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer> {
    let n_envs = venv.len();
    let total = n_envs * n_steps;
    let mut buf = RolloutBuffer {
        n_envs,
        n_steps,
        obs: Vec::with_capacity(total * OBS_DIM),
        actions: Vec::with_capacity(total * ACT_DIM),
        log_probs: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        raw_rewards: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        ..Default::default()
    };
    let log_std: Vec<f64> = params.log_std().iter().map(|x| x.as_f64()).collect();
    let mut x = Vec::with_capacity(n_envs * OBS_DIM);
    for _ in 0..n_steps {
        x.clear();
        for (i, o) in venv.obs.iter().enumerate() {
            if !o.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite observation from env {i}: {:?}",
                    o.0
                )));
            }
            x.extend(o.0.iter().map(|&v| T::f(v)));
        }
        let cache = params.forward_batch(&x, n_envs)?;
        let mut raw = Vec::with_capacity(n_envs);
        let mut dones = Vec::with_capacity(n_envs);
        let mut truncated = Vec::new();
        let mut succeeded = Vec::new();
        for i in 0..n_envs {
            let out = crate::policy_net::PolicyOutput {
                mean: cache.mean[i * ACT_DIM..(i + 1) * ACT_DIM]
                    .iter()
                    .map(|m| m.as_f64())
                    .collect(),
                log_std: log_std.clone(),
                value: cache.value[i].as_f64(),
            };
            let s = sample_action(&out, rng, false);
            let a: [f64; ACT_DIM] = s.clipped.clone().try_into().expect("action dim");
            let (tr, summary) = venv.envs[i].step(&a)?;
            obs_to_f32(&venv.obs[i], &mut buf.obs);
            buf.actions.extend(&s.raw);
            buf.log_probs.push(s.log_prob);
            buf.values.push(out.value);
            raw.push(tr.reward);
            dones.push(tr.done);
            if tr.done && tr.info.truncated() {
                if tr.info.success && success_value == SuccessValue::Hold {
                    succeeded.push(i);
                } else {
                    truncated.push((i, tr.obs));
                }
            }
            if let Some(ep) = summary {
                buf.episodes.push(ep);
            }
            venv.obs[i] = if tr.done { venv.envs[i].reset() } else { tr.obs };
        }
        let mut scaled = venv.scaler.scale(&raw, &dones);
        for &i in &succeeded {
            scaled[i] += gamma * scaled[i] / (1.0 - gamma);
        }
        if !truncated.is_empty() {
            let finals: Vec<Observation> = truncated.iter().map(|(_, o)| *o).collect();
            for ((i, _), v) in truncated.iter().zip(values_of(params, &finals)?) {
                scaled[*i] += gamma * v;
            }
        }
        buf.raw_rewards.extend(&raw);
        buf.rewards.extend(&scaled);
        buf.dones.extend(&dones);
    }
    buf.last_values = values_of(params, &venv.obs)?;
    Ok(buf)
}

/// GAE over one sequence. `values` has one more entry than `rewards`: the
/// bootstrap value of the state after the last step. `dones[t]` marks the
/// last step of an episode.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Fills `advantages` and `returns` for every environment stream.
pub fn compute_gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let (ne, ns) = (buf.n_envs, buf.n_steps);
    buf.advantages = vec![0.0; ne * ns];
    buf.returns = vec![0.0; ne * ns];
    for e in 0..ne {
        let idx = |t: usize| t * ne + e;
        let r: Vec<f64> = (0..ns).map(|t| buf.rewards[idx(t)]).collect();
        let mut v: Vec<f64> = (0..ns).map(|t| buf.values[idx(t)]).collect();
        v.push(buf.last_values[e]);
        let d: Vec<bool> = (0..ns).map(|t| buf.dones[idx(t)]).collect();
        let (a, ret) = gae(&r, &v, &d, gamma, lambda);
        for t in 0..ns {
            buf.advantages[idx(t)] = a[t];
            buf.returns[idx(t)] = ret[t];
        }
    }
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = (var + 1e-12).sqrt();
    for x in xs {
        *x = (*x - mean) / std;
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Inputs of the PPO loss for a minibatch of `b` samples.
pub struct LossInputs<'a> {
    /// `[b, act]` policy means.
    pub mean: &'a [f64],
    /// `[act]` clamped log-std.
    pub log_std: &'a [f64],
    /// `[b]` critic outputs.
    pub value: &'a [f64],
    /// `[b, act]` pre-clip actions.
    pub actions: &'a [f64],
    pub old_log_prob: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct LossOutput {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub d_mean: Vec<f64>,
    pub d_value: Vec<f64>,
    pub d_log_std: Vec<f64>,
}

/// `-mean(surrogate) + value_coef * mse(v, R) - entropy_coef * H` and its
/// gradient with respect to the network outputs.
pub fn ppo_loss(x: &LossInputs, clip: f64, value_coef: f64, entropy_coef: f64) -> LossOutput {
    let act = x.log_std.len();
    let b = x.value.len();
    let bf = b as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let std: Vec<f64> = x.log_std.iter().map(|l| l.exp()).collect();
    let mut out = LossOutput {
        d_mean: vec![0.0; b * act],
        d_value: vec![0.0; b],
        d_log_std: vec![0.0; act],
        ..Default::default()
    };
    let mut clipped = 0usize;
    for i in 0..b {
        let mut logp = 0.0;
        let mut z = vec![0.0; act];
        for j in 0..act {
            z[j] = (x.actions[i * act + j] - x.mean[i * act + j]) / std[j];
            logp += -0.5 * z[j] * z[j] - x.log_std[j] - 0.5 * ln_2pi;
        }
        let log_ratio = logp - x.old_log_prob[i];
        let ratio = log_ratio.exp();
        let a = x.advantages[i];
        let unclipped = ratio * a;
        let surrogate = clipped_surrogate(ratio, a, clip);
        out.policy_loss -= surrogate / bf;
        out.approx_kl += ((ratio - 1.0) - log_ratio) / bf;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        // gradient flows through the unclipped branch, or through the
        // clipped branch while the ratio is inside the clip range
        let active = unclipped <= surrogate || (ratio - 1.0).abs() <= clip;
        let d_logp = if active { -a * ratio / bf } else { 0.0 };
        for j in 0..act {
            out.d_mean[i * act + j] = d_logp * z[j] / std[j];
            out.d_log_std[j] += d_logp * (z[j] * z[j] - 1.0);
        }
        let err = x.value[i] - x.returns[i];
        out.value_loss += err * err / bf;
        out.d_value[i] = value_coef * 2.0 * err / bf;
    }
    out.entropy = gaussian_entropy(x.log_std);
    for d in &mut out.d_log_std {
        *d -= entropy_coef;
    }
    out.clip_fraction = clipped as f64 / bf;
    out.total = out.policy_loss + value_coef * out.value_loss - entropy_coef * out.entropy;
    out
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / bc1;
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let upd = step * *m / ((*v / bc2).sqrt() + self.eps);
            *p = *p - T::f(upd);
        }
    }
}

/// Scales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::f(max_norm / (norm + 1e-6));
        for g in grad.iter_mut() {
            *g = *g * s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Several epochs of shuffled minibatch updates on one rollout. Parameters
/// are only written after each minibatch's loss and gradient are checked to
/// be finite.
pub fn ppo_update<T: Scalar>(
    params: &mut MlpParams<T>,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let n = buf.len();
    let act = params.arch().act_dim;
    let obs_dim = params.arch().obs_dim;
    let mut adv = buf.advantages.clone();
    normalize(&mut adv);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    let bs = cfg.batch_size.min(n);
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * obs_dim);
            let mut actions = Vec::with_capacity(b * act);
            let mut old = Vec::with_capacity(b);
            let mut a_mb = Vec::with_capacity(b);
            let mut ret = Vec::with_capacity(b);
            for &i in chunk {
                x.extend(buf.obs[i * obs_dim..(i + 1) * obs_dim].iter().map(|&v| T::f(v as f64)));
                actions.extend_from_slice(&buf.actions[i * act..(i + 1) * act]);
                old.push(buf.log_probs[i]);
                a_mb.push(adv[i]);
                ret.push(buf.returns[i]);
            }
            let cache = params.forward_batch(&x, b)?;
            let mean: Vec<f64> = cache.mean.iter().map(|m| m.as_f64()).collect();
            let value: Vec<f64> = cache.value.iter().map(|m| m.as_f64()).collect();
            let log_std: Vec<f64> = params.log_std().iter().map(|m| m.as_f64()).collect();
            let loss = ppo_loss(
                &LossInputs {
                    mean: &mean,
                    log_std: &log_std,
                    value: &value,
                    actions: &actions,
                    old_log_prob: &old,
                    advantages: &a_mb,
                    returns: &ret,
                },
                cfg.clip,
                cfg.value_coef,
                cfg.entropy_coef,
            );
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite PPO loss (policy {}, value {})",
                    loss.policy_loss, loss.value_loss
                )));
            }
            let to_t = |v: &[f64]| v.iter().map(|&g| T::f(g)).collect::<Vec<T>>();
            let mut grad = params.backward(
                &cache,
                &to_t(&loss.d_mean),
                &to_t(&loss.d_value),
                &to_t(&loss.d_log_std),
            );
            let norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical("non-finite gradient norm".into()));
            }
            adam.step(&mut params.data, &grad);
            stats.policy_loss += loss.policy_loss;
            stats.value_loss += loss.value_loss;
            stats.entropy += loss.entropy;
            stats.approx_kl += loss.approx_kl;
            stats.clip_fraction += loss.clip_fraction;
            stats.grad_norm += norm;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
        stats.grad_norm /= count;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_reward: f64,
    pub std_reward: f64,
    pub success_rate: f64,
    pub mean_length: f64,
}

impl EvalStats {
    pub fn from_episodes(eps: &[EpisodeSummary]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean = eps.iter().map(|e| e.ret).sum::<f64>() / n;
        let var = eps.iter().map(|e| (e.ret - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_reward: mean,
            std_reward: var.sqrt(),
            success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
            mean_length: eps.iter().map(|e| e.length as f64).sum::<f64>() / n,
        }
    }
}

/// Runs `n_episodes` with the policy mean as the action.
pub fn evaluate_policy<T: Scalar, E: Environment>(
    params: &MlpParams<T>,
    env: &mut E,
    n_episodes: usize,
) -> Result<EvalStats> {
    if n_episodes == 0 {
        return Err(Error::Domain("n_episodes must be at least 1".into()));
    }
    let mut eps = Vec::with_capacity(n_episodes);
    let mut obs = env.reset();
    while eps.len() < n_episodes {
        let out = params.forward(&obs.0)?;
        let a: [f64; ACT_DIM] = out.mean.clone().try_into().map_err(|_| Error::Shape {
            expected: format!("{ACT_DIM} actions"),
            found: format!("{}", out.mean.len()),
        })?;
        let (tr, summary) = env.step(&a)?;
        obs = tr.obs;
        if let Some(s) = summary {
            eps.push(s);
            obs = env.reset();
        }
    }
    Ok(EvalStats::from_episodes(&eps))
}

/// One row of the training curve, written after every update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub step: usize,
    /// Mean raw return of the last 100 finished episodes.
    pub mean_reward: f64,
    pub mean_ep_len: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub eval_mean_reward: Option<f64>,
    pub eval_success_rate: Option<f64>,
}

pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters after the last update.
    pub last: MlpParams<T>,
    /// Parameters with the best evaluated mean reward (the last ones when
    /// evaluation is disabled).
    pub best: MlpParams<T>,
    pub best_eval: Option<EvalStats>,
    pub curve: Vec<CurveRow>,
    /// Set when training stopped early on a numerical failure; `last` then
    /// holds the last finite parameters.
    pub aborted: Option<String>,
}

/// Alternates rollout collection, GAE and PPO updates until `total_steps`
/// environment steps have been taken.
///
/// `evaluator` scores a parameter set for model selection; `progress` sees
/// every curve row as it is produced.
pub fn train<T, E>(
    cfg: &PpoConfig,
    arch: Architecture,
    envs: Vec<E>,
    seed: u64,
    mut evaluator: Option<&mut dyn FnMut(&MlpParams<T>) -> Result<EvalStats>>,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    E: Environment,
{
    cfg.validate()?;
    if envs.len() != cfg.n_envs {
        return Err(Error::Config(format!(
            "expected {} environments, got {}",
            cfg.n_envs,
            envs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::<T>::init(arch, &mut rng);
    let mut adam = Adam::new(params.data.len(), cfg.lr);
    let mut venv = VecEnv::new(envs, cfg.gamma, cfg.normalize_rewards);
    let mut window: std::collections::VecDeque<EpisodeSummary> = Default::default();
    let mut curve = Vec::new();
    let mut best: Option<(EvalStats, MlpParams<T>)> = None;
    let n_updates = cfg.total_steps.div_ceil(cfg.rollout_len());
    let mut aborted = None;
    for update in 1..=n_updates {
        let mut buf = collect_rollouts(&params, &mut venv, cfg.n_steps, cfg.gamma, cfg.success_value, &mut rng)?;
        compute_gae(&mut buf, cfg.gamma, cfg.gae_lambda);
        for ep in &buf.episodes {
            if window.len() == 100 {
                window.pop_front();
            }
            window.push_back(*ep);
        }
        let snapshot = params.clone();
        let stats = match ppo_update(&mut params, &mut adam, &buf, cfg, &mut rng) {
            Ok(s) if params.is_finite() => s,
            Ok(_) => {
                params = snapshot;
                aborted = Some("non-finite parameters after update".to_string());
                break;
            }
            Err(Error::Numerical(msg)) => {
                params = snapshot;
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let eps: Vec<EpisodeSummary> = window.iter().copied().collect();
        let ep_stats = EvalStats::from_episodes(&eps);
        let mut row = CurveRow {
            update,
            step: update * cfg.rollout_len(),
            mean_reward: if eps.is_empty() { f64::NAN } else { ep_stats.mean_reward },
            mean_ep_len: if eps.is_empty() { f64::NAN } else { ep_stats.mean_length },
            success_rate: ep_stats.success_rate,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            eval_mean_reward: None,
            eval_success_rate: None,
        };
        let eval_now = cfg.eval_every > 0 && (update % cfg.eval_every == 0 || update == n_updates);
        if let (true, Some(ev)) = (eval_now, evaluator.as_mut()) {
            let s = ev(&params)?;
            row.eval_mean_reward = Some(s.mean_reward);
            row.eval_success_rate = Some(s.success_rate);
            if best.as_ref().is_none_or(|(b, _)| cfg.select_by.better(&s, b)) {
                best = Some((s, params.clone()));
            }
        }
        progress(&row);
        curve.push(row);
    }
    let (best_eval, best_params) = match best {
        Some((s, p)) => (Some(s), p),
        None => (None, params.clone()),
    };
    Ok(TrainOutcome {
        last: params,
        best: best_params,
        best_eval,
        curve,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardConfig;
    use crate::world::{Env, WorldConfig};
    use approx::assert_relative_eq;

    #[test]
    fn gae_hand_example() {
        let (a, r) = gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, true], 0.99, 0.95);
        assert!((a[1] - 1.0).abs() < 1e-15);
        assert!((a[0] - 1.9405).abs() < 1e-12);
        assert_eq!(a, r);
    }

    #[test]
    fn gae_lambda_zero_is_td() {
        let rewards = [0.5, -1.0, 2.0, 0.3];
        let values = [0.1, 0.2, -0.3, 0.4, 0.9];
        let dones = [false, true, false, false];
        let (a, _) = gae(&rewards, &values, &dones, 0.9, 0.0);
        for t in 0..4 {
            let live = if dones[t] { 0.0 } else { 1.0 };
            let delta = rewards[t] + 0.9 * values[t + 1] * live - values[t];
            assert!((a[t] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_orders() {
        let s = |r: f64, sr: f64| EvalStats {
            mean_reward: r,
            std_reward: 0.0,
            success_rate: sr,
            mean_length: 0.0,
        };
        assert!(Selection::MeanReward.better(&s(10.0, 0.1), &s(5.0, 0.9)));
        assert!(Selection::SuccessRate.better(&s(5.0, 0.9), &s(10.0, 0.1)));
        assert!(Selection::SuccessRate.better(&s(6.0, 0.5), &s(5.0, 0.5)));
        assert!(!Selection::SuccessRate.better(&s(5.0, 0.5), &s(5.0, 0.5)));
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
        assert_eq!(clipped_surrogate(1.0, -2.0, 0.2), -2.0);
    }

    #[test]
    fn clipped_ratio_has_zero_policy_gradient() {
        // ratio e^1 far above 1 + eps with positive advantage: clipped branch
        let lp_old = crate::policy_net::gaussian_log_prob(&[0.1], &[0.1], &[0.0]) - 1.0;
        let x = LossInputs {
            mean: &[0.1],
            log_std: &[0.0],
            value: &[0.0],
            actions: &[0.1],
            old_log_prob: &[lp_old],
            advantages: &[1.0],
            returns: &[0.0],
        };
        let out = ppo_loss(&x, 0.2, 0.5, 0.0);
        assert_eq!(out.d_mean, vec![0.0]);
        assert_eq!(out.d_log_std, vec![0.0]);
        // perturbing the mean slightly keeps it clipped
        let x2 = LossInputs { mean: &[0.1001], ..x };
        assert_eq!(ppo_loss(&x2, 0.2, 0.5, 0.0).d_mean, vec![0.0]);
    }

    #[test]
    fn normalization_moments() {
        let mut xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 5.0 + 3.0).collect();
        normalize(&mut xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-3);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        let mut adam = Adam::new(3, 1e-3);
        for _ in 0..10 {
            adam.step(&mut p, &[0.0f32; 3]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f64, 1.0];
        let mut adam = Adam::new(2, 0.01);
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn grad_norm_clipping() {
        let mut g = vec![3.0f64, 4.0];
        let n = clip_grad_norm(&mut g, 0.5);
        assert_eq!(n, 5.0);
        let after = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((after - 0.5).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            batch_size: 300,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PpoConfig {
            clip: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn small_envs(n: usize, seed: u64) -> Vec<Env> {
        (0..n)
            .map(|i| Env::new(WorldConfig::default(), RewardConfig::default(), seed + i as u64))
            .collect()
    }

    fn small_arch() -> Architecture {
        Architecture {
            obs_dim: 21,
            hidden: vec![16, 16],
            act_dim: 4,
        }
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = MlpParams::<f32>::init(small_arch(), &mut rng);
            let mut venv = VecEnv::new(small_envs(3, 10), 0.99, true);
            collect_rollouts(&params, &mut venv, 64, 0.99, SuccessValue::Critic, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 192);
        assert_eq!(a.obs.len(), 192 * 21);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.obs, b.obs);
    }

    #[test]
    fn instant_termination_still_fills_buffer() {
        // ground contact everywhere: every episode ends on its first step
        let cfg = WorldConfig {
            ground_z: 100.0,
            ..Default::default()
        };
        let envs: Vec<Env> = (0..2).map(|i| Env::new(cfg, RewardConfig::default(), i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MlpParams::<f32>::init(small_arch(), &mut rng);
        let mut venv = VecEnv::new(envs, 0.99, false);
        let buf = collect_rollouts(&params, &mut venv, 32, 0.99, SuccessValue::Critic, &mut rng).unwrap();
        assert_eq!(buf.len(), 64);
        assert!(buf.dones.iter().all(|&d| d));
        assert_eq!(buf.episodes.len(), 64);
    }

    #[test]
    fn hold_value_on_success() {
        // goal ball covers the arena: every episode succeeds on its first step
        let cfg = WorldConfig {
            success_radius: 100.0,
            ..Default::default()
        };
        let collect = |sv| {
            let envs: Vec<Env> = (0..2).map(|i| Env::new(cfg, RewardConfig::default(), i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = MlpParams::<f32>::init(small_arch(), &mut rng);
            let mut venv = VecEnv::new(envs, 0.99, false);
            collect_rollouts(&params, &mut venv, 16, 0.99, sv, &mut rng).unwrap()
        };
        let hold = collect(SuccessValue::Hold);
        assert!(hold.episodes.iter().all(|e| e.success));
        for (r, raw) in hold.rewards.iter().zip(&hold.raw_rewards) {
            assert_relative_eq!(*r, raw / 0.01, max_relative = 1e-12);
        }
        let critic = collect(SuccessValue::Critic);
        assert_eq!(critic.raw_rewards, hold.raw_rewards);
        assert_ne!(critic.rewards, hold.rewards);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = PpoConfig {
            n_envs: 2,
            n_steps: 64,
            batch_size: 32,
            lr: 0.0,
            total_steps: 256,
            eval_every: 0,
            ..Default::default()
        };
        let out = train::<f32, _>(&cfg, small_arch(), small_envs(2, 0), 3, None, |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = MlpParams::<f32>::init(small_arch(), &mut rng);
        assert_eq!(out.last.data, init.data);
        assert_eq!(out.curve.len(), 2);
    }

    fn total_loss(params: &MlpParams<f64>, obs: &[f64], b: usize, fixed: &FixedBatch) -> (f64, Vec<f64>) {
        let cache = params.forward_batch(obs, b).unwrap();
        let ls = params.log_std();
        let out = ppo_loss(
            &LossInputs {
                mean: &cache.mean,
                log_std: &ls,
                value: &cache.value,
                actions: &fixed.actions,
                old_log_prob: &fixed.old,
                advantages: &fixed.adv,
                returns: &fixed.ret,
            },
            0.2,
            0.5,
            0.01,
        );
        let g = params.backward(&cache, &out.d_mean, &out.d_value, &out.d_log_std);
        (out.total, g)
    }

    struct FixedBatch {
        actions: Vec<f64>,
        old: Vec<f64>,
        adv: Vec<f64>,
        ret: Vec<f64>,
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Architecture { obs_dim: 5, hidden: vec![7, 6], act_dim: 3 };
        let mut params = MlpParams::<f64>::init(arch, &mut rng);
        for v in params.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let b = 4;
        let obs: Vec<f64> = (0..b * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fixed = FixedBatch {
            actions: (0..b * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            old: (0..b).map(|_| rng.random_range(-4.0..-2.0)).collect(),
            adv: (0..b).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ret: (0..b).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (_, g) = total_loss(&params, &obs, b, &fixed);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..params.data.len() {
            let orig = params.data[i];
            params.data[i] = orig + h;
            let (lp, _) = total_loss(&params, &obs, b, &fixed);
            params.data[i] = orig - h;
            let (lm, _) = total_loss(&params, &obs, b, &fixed);
            params.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / (fd.abs().max(g[i].abs()).max(1e-6)));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn evaluate_single_episode_has_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = MlpParams::<f64>::zeros(small_arch());
        let _ = &mut rng;
        let mut env = Env::new(WorldConfig::default(), RewardConfig::default(), 9);
        let s = evaluate_policy(&params, &mut env, 1).unwrap();
        assert_eq!(s.std_reward, 0.0);
        // zero network -> zero action -> hover: never succeeds
        assert_eq!(s.success_rate, 0.0);
        assert!(evaluate_policy(&params, &mut env, 0).is_err());
    }
}
