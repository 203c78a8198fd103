//! PPO and Dyna trainers, rollout collection and evaluation.
//!
//! Dyna here means: after every real batch, `planning_ratio` extra batches
//! are collected from the exact simulator with exits disabled. Advantages are
//! plain returns-to-go of `r - rbar` minus the value estimate; no GAE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::ShareSchedule;
use crate::env::{observe, step_state, EnvConfig, EnvState, Termination, TrajectoryRow};
use crate::error::{Error, Result};
use crate::policy::{
    deterministic_action, init_policy, loss_and_grad, policy_forward, sample_action, Adam, LossSample,
    LossStats, LossWeights, PolicyConfig, PolicyParams,
};
use crate::presets::PresetId;
use crate::stats::{checkpoint_ages, summarize_seed, ConditionFlags, EpisodeRecord, SeedSummary, SummaryContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub rbar_rate: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub rollout_len: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            rbar_rate: 0.01,
            clip: 0.2,
            entropy_coef: 0.05,
            value_coef: 0.5,
            learning_rate: 3e-4,
            minibatch: 64,
            epochs: 4,
            rollout_len: 2048,
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma != 1.0 {
            return Err(Error::Config(format!("gamma must be exactly 1, got {}", self.gamma)));
        }
        let positive = [self.rbar_rate, self.clip, self.learning_rate];
        if positive.iter().any(|v| !(*v > 0.0)) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::Config("PPO rates and coefficients must be positive".into()));
        }
        if self.minibatch == 0 || self.epochs == 0 || self.rollout_len == 0 {
            return Err(Error::Config("minibatch, epochs and rollout_len must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            clip: self.clip,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    PpoReal,
    DynaUnrestricted,
    DynaFixedShare,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::PpoReal => "ppo-real",
            Algorithm::DynaUnrestricted => "dyna-unrestricted",
            Algorithm::DynaFixedShare => "dyna-fixed-share",
        }
    }

    pub fn is_dyna(self) -> bool {
        !matches!(self, Algorithm::PpoReal)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo-real" => Ok(Algorithm::PpoReal),
            "dyna-unrestricted" => Ok(Algorithm::DynaUnrestricted),
            "dyna-fixed-share" => Ok(Algorithm::DynaFixedShare),
            other => Err(Error::Usage(format!(
                "unknown condition `{other}` (expected ppo-real, dyna-unrestricted or dyna-fixed-share)"
            ))),
        }
    }
}

/// A training condition. `fixed_share` may be combined with any algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub algorithm: Algorithm,
    pub fixed_share: bool,
    pub no_exit: bool,
    pub zero_proxy: bool,
    pub effort_bias: f64,
    pub penalty_weight: f64,
    pub planning_ratio: usize,
}

impl Condition {
    pub fn ppo_real() -> Self {
        Self {
            algorithm: Algorithm::PpoReal,
            fixed_share: false,
            no_exit: false,
            zero_proxy: false,
            effort_bias: 0.0,
            penalty_weight: 0.0,
            planning_ratio: 0,
        }
    }

    pub fn dyna_unrestricted() -> Self {
        Self {
            algorithm: Algorithm::DynaUnrestricted,
            no_exit: true,
            penalty_weight: 1.0,
            planning_ratio: 1,
            ..Self::ppo_real()
        }
    }

    pub fn dyna_fixed_share() -> Self {
        Self {
            algorithm: Algorithm::DynaFixedShare,
            fixed_share: true,
            no_exit: true,
            planning_ratio: 1,
            ..Self::ppo_real()
        }
    }

    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::PpoReal => Self::ppo_real(),
            Algorithm::DynaUnrestricted => Self::dyna_unrestricted(),
            Algorithm::DynaFixedShare => Self::dyna_fixed_share(),
        }
    }

    pub fn flags(&self) -> ConditionFlags {
        ConditionFlags {
            fixed_share: self.fixed_share,
            no_exit: self.no_exit,
            dyna: self.algorithm.is_dyna(),
            zero_proxy: self.zero_proxy,
            penalty_weight: self.penalty_weight,
            effort_bias: self.effort_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalty_weight < 0.0 || !self.penalty_weight.is_finite() {
            return Err(Error::Config(format!("penalty weight must be >= 0, got {}", self.penalty_weight)));
        }
        if self.algorithm == Algorithm::DynaFixedShare && !self.fixed_share {
            return Err(Error::Config("dyna-fixed-share requires fixed_share".into()));
        }
        if self.algorithm.is_dyna() && self.planning_ratio == 0 {
            return Err(Error::Config("Dyna conditions need planning_ratio >= 1".into()));
        }
        Ok(())
    }
}

/// One collected transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub observation: Vec<f64>,
    pub shares: Vec<f64>,
    pub raw_efforts: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    /// Environment reward plus the role penalty.
    pub reward: f64,
    pub env_reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub length: usize,
    pub termination: Termination,
    pub env_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub steps: Vec<RolloutStep>,
    /// `V(s)` after the last step when the batch ends mid-episode, else 0.
    pub bootstrap_value: f64,
    pub episodes: Vec<EpisodeStats>,
}

/// Environment stream that persists across batches; episodes restart on termination.
#[derive(Clone, Debug)]
pub struct Collector {
    pub config: EnvConfig,
    pub penalty_weight: f64,
    state: EnvState,
    episode_return: f64,
    rng: ChaCha8Rng,
}

impl Collector {
    pub fn new(config: EnvConfig, penalty_weight: f64, seed: u64) -> Self {
        let state = EnvState::initial(&config);
        Self {
            config,
            penalty_weight,
            state,
            episode_return: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn collect(&mut self, params: &PolicyParams, n_steps: usize) -> Result<TrajectoryBatch> {
        let mut batch = TrajectoryBatch {
            steps: Vec::with_capacity(n_steps),
            ..TrajectoryBatch::default()
        };
        for _ in 0..n_steps {
            let observation = observe(&self.state, &self.config);
            let out = policy_forward(params, &observation)?;
            let sample = sample_action(params, &out, self.state.t, &mut self.rng)?;
            let step = step_state(&self.config, &mut self.state, &sample.action, self.penalty_weight)?;
            let done = step.termination.is_terminal();
            self.episode_return += step.reward;
            batch.steps.push(RolloutStep {
                observation,
                shares: sample.action.shares,
                raw_efforts: sample.raw_efforts,
                log_prob: sample.log_prob,
                value: sample.value,
                reward: step.reward + step.diagnostics.penalty,
                env_reward: step.reward,
                done,
            });
            if done {
                batch.episodes.push(EpisodeStats {
                    length: self.state.t,
                    termination: step.termination,
                    env_return: self.episode_return,
                });
                self.state = EnvState::initial(&self.config);
                self.episode_return = 0.0;
            }
        }
        if batch.steps.last().is_some_and(|s| !s.done) {
            let obs = observe(&self.state, &self.config);
            batch.bootstrap_value = policy_forward(params, &obs)?.value;
        }
        Ok(batch)
    }
}

/// Free-function form of [`Collector::collect`].
pub fn collect_rollouts(collector: &mut Collector, params: &PolicyParams, n_steps: usize) -> Result<TrajectoryBatch> {
    collector.collect(params, n_steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Subtract the running `rbar` (pre-update value at each step), accumulate
/// returns-to-go within episodes, and normalize the advantages.
pub fn compute_advantages(batch: &TrajectoryBatch, rbar: &mut f64, rate: f64) -> Advantages {
    let adjusted: Vec<f64> = batch
        .steps
        .iter()
        .map(|s| {
            let a = s.reward - *rbar;
            *rbar = (1.0 - rate) * *rbar + rate * s.reward;
            a
        })
        .collect();
    let mut returns = vec![0.0; adjusted.len()];
    let mut running = batch.bootstrap_value;
    for i in (0..adjusted.len()).rev() {
        if batch.steps[i].done {
            running = 0.0;
        }
        running += adjusted[i];
        returns[i] = running;
    }
    let mut advantages: Vec<f64> = returns.iter().zip(&batch.steps).map(|(r, s)| r - s.value).collect();
    let n = advantages.len() as f64;
    if n > 1.0 {
        let mean = advantages.iter().sum::<f64>() / n;
        let sd = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        advantages.iter_mut().for_each(|a| *a = (*a - mean) / (sd + 1e-8));
    }
    Advantages { advantages, returns }
}

pub fn loss_samples(batch: &TrajectoryBatch, adv: &Advantages) -> Vec<LossSample> {
    batch
        .steps
        .iter()
        .zip(adv.advantages.iter().zip(&adv.returns))
        .map(|(s, (a, r))| LossSample {
            observation: s.observation.clone(),
            shares: s.shares.clone(),
            raw_efforts: s.raw_efforts.clone(),
            old_log_prob: s.log_prob,
            advantage: *a,
            target: *r,
        })
        .collect()
}

/// Epoch-and-minibatch PPO update; returns the mean loss statistics.
pub fn ppo_update<R: rand::Rng + ?Sized>(
    params: &mut PolicyParams,
    adam: &mut Adam,
    samples: &[LossSample],
    config: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let weights = config.loss_weights();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut total = LossStats::default();
    let mut count = 0.0;
    let mut mb = Vec::with_capacity(config.minibatch);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            mb.clear();
            mb.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (stats, mut grad) = loss_and_grad(params, &mb, &weights)?;
            if let Some(max_norm) = config.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max_norm {
                    grad.iter_mut().for_each(|g| *g *= max_norm / norm);
                }
            }
            adam.step(&mut params.values, &grad);
            total.loss += stats.loss;
            total.policy_loss += stats.policy_loss;
            total.value_loss += stats.value_loss;
            total.entropy += stats.entropy;
            total.approx_kl += stats.approx_kl;
            total.clip_fraction += stats.clip_fraction;
            count += 1.0;
        }
    }
    if count > 0.0 {
        for v in [
            &mut total.loss,
            &mut total.policy_loss,
            &mut total.value_loss,
            &mut total.entropy,
            &mut total.approx_kl,
            &mut total.clip_fraction,
        ] {
            *v /= count;
        }
    }
    Ok(total)
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub preset: PresetId,
    /// Full-horizon environment; evaluation always runs on this with exits on.
    pub env: EnvConfig,
    /// Training horizon; `None` trains on the full horizon.
    pub train_horizon: Option<usize>,
    pub condition: Condition,
    pub seed: u64,
    /// Real-environment steps; planning steps come on top.
    pub total_steps: u64,
    pub ppo: PpoConfig,
    pub schedule: Option<ShareSchedule>,
    pub eval_episodes: usize,
}

impl TrainSpec {
    pub fn new(preset: PresetId, condition: Condition, seed: u64, total_steps: u64) -> Self {
        Self {
            preset,
            env: preset.config(),
            train_horizon: None,
            condition,
            seed,
            total_steps,
            ppo: PpoConfig::default(),
            schedule: None,
            eval_episodes: 100,
        }
    }

    /// Horizon-sweep variant: train at `horizon` for `horizon * 2e4` steps.
    pub fn for_horizon(mut self, horizon: usize) -> Self {
        self.train_horizon = Some(horizon);
        self.total_steps = horizon as u64 * 20_000;
        self
    }

    pub fn train_env(&self) -> EnvConfig {
        let mut env = self.env.with_horizon(self.train_horizon.unwrap_or(self.env.horizon));
        env.no_exit = self.condition.no_exit;
        env.zero_proxy = self.condition.zero_proxy;
        env
    }

    pub fn eval_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.no_exit = false;
        env.zero_proxy = self.condition.zero_proxy;
        env
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let mut pc = PolicyConfig::new(self.env.num_activities()).with_effort_bias(self.condition.effort_bias);
        if self.condition.fixed_share {
            let schedule = self
                .schedule
                .clone()
                .ok_or_else(|| Error::Config("fixed-share condition needs a DP share schedule".into()))?;
            let alpha = self.env.role.threshold;
            if (0..schedule.len()).any(|t| schedule.dominant_share(t) < alpha) {
                return Err(Error::Config(format!(
                    "fixed-share schedule drops the dominant share below {alpha}"
                )));
            }
            pc = pc.with_fixed_share(schedule);
        }
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        self.condition.validate()?;
        self.ppo.validate()?;
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if let Some(h) = self.train_horizon {
            if h == 0 || h > self.env.horizon {
                return Err(Error::Config(format!(
                    "training horizon {h} must lie in 1..={}",
                    self.env.horizon
                )));
            }
        }
        self.policy_config()?.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub real_steps: u64,
    pub planning: bool,
    pub episodes_finished: usize,
    pub completion_fraction: f64,
    pub mean_env_return: f64,
    pub rbar: f64,
    pub stats: LossStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub summary: SeedSummary,
    pub episodes: Vec<EpisodeRecord>,
    pub history: Vec<BatchLog>,
    /// First evaluation episode, year by year.
    pub eval_trajectory: Vec<TrajectoryRow>,
    /// Mean-action trajectory on the full-horizon environment with exits off.
    pub profile_trajectory: Vec<TrajectoryRow>,
}

pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

fn log_batch(batch: &TrajectoryBatch, real_steps: u64, planning: bool, rbar: f64, stats: LossStats) -> BatchLog {
    let finished = batch.episodes.len();
    let completed = batch
        .episodes
        .iter()
        .filter(|e| e.termination == Termination::AgeLimit)
        .count();
    let mean_env_return = if finished > 0 {
        batch.episodes.iter().map(|e| e.env_return).sum::<f64>() / finished as f64
    } else {
        f64::NAN
    };
    BatchLog {
        real_steps,
        planning,
        episodes_finished: finished,
        completion_fraction: if finished > 0 { completed as f64 / finished as f64 } else { f64::NAN },
        mean_env_return,
        rbar,
        stats,
    }
}

/// Train, then evaluate on the full horizon with exits enforced.
pub fn train_run(spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let policy_config = spec.policy_config()?;
    let mut params = init_policy(&policy_config, spec.seed)?;
    let mut adam = Adam::new(params.values.len(), spec.ppo.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 3));

    let train_env = spec.train_env();
    let mut real = Collector::new(train_env.clone(), spec.condition.penalty_weight, stream_seed(spec.seed, 1));
    let mut planning = spec.condition.algorithm.is_dyna().then(|| {
        let mut env = train_env.clone();
        env.no_exit = true;
        Collector::new(env, spec.condition.penalty_weight, stream_seed(spec.seed, 2))
    });

    let mut rbar = 0.0;
    let mut real_steps = 0u64;
    let mut history = Vec::new();
    while real_steps < spec.total_steps {
        let n = (spec.total_steps - real_steps).min(spec.ppo.rollout_len as u64) as usize;
        let batch = real.collect(&params, n)?;
        real_steps += n as u64;
        let adv = compute_advantages(&batch, &mut rbar, spec.ppo.rbar_rate);
        let stats = ppo_update(&mut params, &mut adam, &loss_samples(&batch, &adv), &spec.ppo, &mut shuffle_rng)?;
        history.push(log_batch(&batch, real_steps, false, rbar, stats));

        if let Some(planner) = planning.as_mut() {
            for _ in 0..spec.condition.planning_ratio {
                let batch = planner.collect(&params, n)?;
                let adv = compute_advantages(&batch, &mut rbar, spec.ppo.rbar_rate);
                let stats =
                    ppo_update(&mut params, &mut adam, &loss_samples(&batch, &adv), &spec.ppo, &mut shuffle_rng)?;
                history.push(log_batch(&batch, real_steps, true, rbar, stats));
            }
        }
    }

    let eval_env = spec.eval_env();
    let episodes = evaluate(&params, &eval_env, spec.eval_episodes, stream_seed(spec.seed, 4))?;
    let eval_trajectory = trace_first_episode(&params, &eval_env, stream_seed(spec.seed, 4))?;
    let profile_trajectory = mean_action_trajectory(&params, &eval_env)?;
    let dominant = eval_env.role.dominant;
    let profile: Vec<f64> = profile_trajectory.iter().map(|r| r.efforts[dominant]).collect();
    let ctx = SummaryContext {
        seed: spec.seed,
        preset: spec.preset,
        condition: spec.condition.flags(),
        training_steps: real_steps,
        config_hash: spec.env.hash(),
        start_age: eval_env.start_age,
        effort_profile: Some(profile),
        checkpoint_ages: checkpoint_ages(spec.preset),
    };
    let summary = summarize_seed(&episodes, &ctx)?;
    Ok(TrainOutcome {
        params,
        summary,
        episodes,
        history,
        eval_trajectory,
        profile_trajectory,
    })
}

fn run_episode(
    params: &PolicyParams,
    env: &EnvConfig,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut Vec<TrajectoryRow>>,
) -> Result<EpisodeRecord> {
    let mut state = EnvState::initial(env);
    let mut total_return = 0.0;
    let mut role_violations = 0;
    loop {
        let (t, age) = (state.t, state.age);
        let out = policy_forward(params, &observe(&state, env))?;
        let sample = sample_action(params, &out, t, rng)?;
        let step = step_state(env, &mut state, &sample.action, 0.0)?;
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TrajectoryRow::new(t, age, &sample.action, &step));
        }
        total_return += step.reward;
        role_violations += usize::from(step.diagnostics.role_violation);
        if step.termination.is_terminal() {
            return Ok(EpisodeRecord {
                length: state.t,
                termination: step.termination,
                exit_age: state.age,
                m_final: state.meniscus,
                d_final: state.damage,
                total_return,
                role_violations,
            });
        }
    }
}

/// Stochastic rollouts of `params`; rewards never include the role penalty.
pub fn evaluate(params: &PolicyParams, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| run_episode(params, env, &mut rng, None)).collect()
}

/// Per-year rows of the first episode `evaluate` would run with the same seed.
pub fn trace_first_episode(params: &PolicyParams, env: &EnvConfig, seed: u64) -> Result<Vec<TrajectoryRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(env.horizon);
    run_episode(params, env, &mut rng, Some(&mut rows))?;
    Ok(rows)
}

/// Follow the mean action for the whole horizon (exits disabled) and record each year.
pub fn mean_action_trajectory(params: &PolicyParams, env: &EnvConfig) -> Result<Vec<TrajectoryRow>> {
    let mut env = env.clone();
    env.no_exit = true;
    let mut state = EnvState::initial(&env);
    let mut rows = Vec::with_capacity(env.horizon);
    while !state.done {
        let (t, age) = (state.t, state.age);
        let out = policy_forward(params, &observe(&state, &env))?;
        let action = deterministic_action(params, &out, t);
        let action = crate::env::Action::new(action.shares, action.efforts.iter().map(|e| e.clamp(0.0, 1.0)).collect());
        let step = step_state(&env, &mut state, &action, 0.0)?;
        rows.push(TrajectoryRow::new(t, age, &action, &step));
    }
    Ok(rows)
}
