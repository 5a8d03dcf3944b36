//! Replay buffer, epsilon-greedy selection, the agent/expert TD losses and
//! the fill-sample-update-clear training loop.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, RewardMode, TradingEnv};
use crate::error::{Error, Result};
use crate::expert::ExpertTrajectory;
use crate::features::{build_state, FeatureMatrix, StateWindow};
use crate::market_data::BarSeries;
use crate::qnet::{
    adam_step, backward, clip_global_norm, forward, forward_cached, OptimizerState, QNetParams,
    NUM_ACTIONS,
};

/// One replay sample `(s, a, a_e, r, r_e, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateWindow,
    pub action: Action,
    pub expert_action: Action,
    pub reward: f64,
    pub expert_reward: f64,
    /// `None` for terminal transitions, whose target is the bare reward.
    pub next_state: Option<StateWindow>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    /// Appends a transition and reports whether the buffer is now full.
    /// Pushing into a full buffer is an error: it must be drained first.
    pub fn push(&mut self, t: Transition) -> Result<bool> {
        if self.is_full() {
            return Err(Error::BufferFull {
                capacity: self.capacity,
            });
        }
        self.items.push_back(t);
        Ok(self.is_full())
    }

    /// Appends, dropping the oldest transition when full.
    pub fn push_evicting(&mut self, t: Transition) {
        if self.is_full() {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n > self.items.len() {
            return Err(Error::arg(format!(
                "cannot sample {n} transitions from a buffer of {}",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Uniform random action with probability `epsilon`, otherwise greedy.
pub fn select_action<R: Rng + ?Sized>(q: &crate::qnet::QValues, epsilon: f64, rng: &mut R) -> Action {
    if rng.random::<f64>() < epsilon {
        Action::ALL[rng.random_range(0..NUM_ACTIONS)]
    } else {
        q.argmax()
    }
}

fn bootstrap(params: &QNetParams, t: &Transition, gamma: f64) -> Result<f64> {
    Ok(match &t.next_state {
        Some(next) => gamma * forward(params, next)?.max(),
        None => 0.0,
    })
}

fn non_empty(batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::arg("loss of an empty batch"))
    } else {
        Ok(())
    }
}

/// Mean squared TD error of the agent's own actions and rewards.
pub fn agent_loss(batch: &[&Transition], params: &QNetParams, gamma: f64) -> Result<f64> {
    non_empty(batch)?;
    let mut sum = 0.0;
    for t in batch {
        let q = forward(params, &t.state)?;
        let err = t.reward + bootstrap(params, t, gamma)? - q.get(t.action);
        sum += err * err;
    }
    Ok(sum / batch.len() as f64)
}

/// Mean squared TD error of the expert's actions and rewards, bootstrapped
/// from the same next state.
pub fn expert_loss(batch: &[&Transition], params: &QNetParams, gamma: f64) -> Result<f64> {
    non_empty(batch)?;
    let mut sum = 0.0;
    for t in batch {
        let q = forward(params, &t.state)?;
        let err = t.expert_reward + bootstrap(params, t, gamma)? - q.get(t.expert_action);
        sum += err * err;
    }
    Ok(sum / batch.len() as f64)
}

pub fn total_loss(batch: &[&Transition], params: &QNetParams, gamma: f64) -> Result<f64> {
    Ok((agent_loss(batch, params, gamma)? + expert_loss(batch, params, gamma)?) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Average of the agent and expert TD losses.
    ExpertTd,
    /// Agent TD loss only.
    AgentOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub agent: f64,
    /// `None` when the expert term is not part of the objective.
    pub expert: Option<f64>,
    pub total: f64,
}

/// Loss and semi-gradient (targets held fixed) in one pass over the batch.
pub fn td_loss_and_gradient(
    params: &QNetParams,
    batch: &[&Transition],
    gamma: f64,
    kind: LossKind,
) -> Result<(LossBreakdown, QNetParams)> {
    non_empty(batch)?;
    let n = batch.len() as f64;
    let coef = 2.0 / n;
    let mut grads = params.zeros_like();
    let (mut sum_a, mut sum_e) = (0.0, 0.0);
    for t in batch {
        let boot = bootstrap(params, t, gamma)?;
        let cache = forward_cached(params, &t.state)?;
        let q = cache.q();
        let err_a = q.get(t.action) - (t.reward + boot);
        sum_a += err_a * err_a;
        let mut dq = [0.0; NUM_ACTIONS];
        match kind {
            LossKind::AgentOnly => dq[t.action.index()] = coef * err_a,
            LossKind::ExpertTd => {
                let err_e = q.get(t.expert_action) - (t.expert_reward + boot);
                sum_e += err_e * err_e;
                let half = coef * 0.5;
                dq[t.action.index()] += half * err_a;
                dq[t.expert_action.index()] += half * err_e;
            }
        }
        backward(params, &t.state, &cache, &dq, &mut grads);
    }
    let agent = sum_a / n;
    let breakdown = match kind {
        LossKind::AgentOnly => LossBreakdown {
            agent,
            expert: None,
            total: agent,
        },
        LossKind::ExpertTd => {
            let expert = sum_e / n;
            LossBreakdown {
                agent,
                expert: Some(expert),
                total: (agent + expert) / 2.0,
            }
        }
    };
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Episode count `N`.
    pub episodes: usize,
    /// Steps per episode `T`.
    pub steps_per_episode: usize,
    /// Buffer capacity `N_c`.
    pub buffer_capacity: usize,
    /// Mini-batch size `N_s`.
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all training steps over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub learning_rate: f64,
    pub hidden_size: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Keep transitions across updates, evicting the oldest when full.
    pub persistent_buffer: bool,
    /// Write a checkpoint every this many updates; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            steps_per_episode: 10_000,
            buffer_capacity: 512,
            batch_size: 64,
            gamma: 0.992,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            learning_rate: 1e-3,
            hidden_size: 64,
            grad_clip: 5.0,
            seed: 0,
            persistent_buffer: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(Error::arg("episodes and steps per episode must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(Error::arg("batch size must be in 1..=buffer capacity"));
        }
        if !unit(self.gamma) {
            return Err(Error::arg("gamma must lie in [0, 1]"));
        }
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) || self.epsilon_end > self.epsilon_start {
            return Err(Error::arg("epsilon must decay within [0, 1]"));
        }
        if !unit(self.epsilon_decay_fraction) {
            return Err(Error::arg("epsilon decay fraction must lie in [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.hidden_size == 0 {
            return Err(Error::arg("hidden size must be positive"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::arg("gradient clip must be non-negative"));
        }
        Ok(())
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, constant after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    pub fn new(config: &TrainConfig, total_steps: usize) -> Self {
        Self {
            start: config.epsilon_start,
            end: config.epsilon_end,
            decay_steps: (config.epsilon_decay_fraction * total_steps as f64).round() as usize,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// The bars and features a learner trains on.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    pub series: &'a BarSeries,
    pub features: &'a FeatureMatrix,
    pub window_len: usize,
    pub range: Range<usize>,
}

impl<'a> Dataset<'a> {
    pub fn env(&self, config: EnvConfig) -> Result<TradingEnv<'a>> {
        TradingEnv::with_range(self.series, self.features, config, self.window_len, self.range.clone())
    }

    /// Every bar in the range where an action can be taken, in order.
    pub fn decision_bars(&self) -> Result<Vec<usize>> {
        let env = self.env(EnvConfig::default())?;
        Ok(self.range.clone().filter(|&t| env.can_start(t)).collect())
    }
}

/// Where the expert half of each transition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertSource {
    Trajectory,
    /// Copy the agent's own action and reward into the expert fields.
    MirrorAgent,
}

/// Reward scheme, expert source and loss of a TD learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Learner {
    pub loss: LossKind,
    pub reward_mode: RewardMode,
    pub expert: ExpertSource,
}

impl Learner {
    pub fn expert_td() -> Self {
        Self {
            loss: LossKind::ExpertTd,
            reward_mode: RewardMode::Training,
            expert: ExpertSource::Trajectory,
        }
    }

    /// Profit-rewarded agent TD learning.
    pub fn dqn() -> Self {
        Self {
            loss: LossKind::AgentOnly,
            reward_mode: RewardMode::Testing,
            expert: ExpertSource::MirrorAgent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub update_index: usize,
    pub episode: usize,
    pub epsilon: f64,
    pub loss_agent: f64,
    pub loss_expert: Option<f64>,
    pub loss_total: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "update_index,episode,epsilon,loss_agent,loss_expert,loss_total";

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for e in &self.entries {
            let expert = e.loss_expert.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.update_index, e.episode, e.epsilon, e.loss_agent, expert, e.loss_total
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: QNetParams,
    pub log: TrainingLog,
    pub steps_per_episode: Vec<usize>,
    pub updates_per_episode: Vec<usize>,
    /// Transitions left in the buffer when training finished.
    pub final_buffer_len: usize,
}

/// Expert-trajectory TD training with constant training rewards.
pub fn train(config: &TrainConfig, data: &Dataset<'_>, trajectory: &ExpertTrajectory) -> Result<TrainOutput> {
    train_with(config, data, &EnvConfig::default(), Learner::expert_td(), Some(trajectory), |_, _| Ok(()))
}

/// The general training loop. Each episode takes up to `T` steps over the
/// decision bars, continuing where the previous episode stopped and
/// wrapping at the end of the range. Transitions fill the buffer until it
/// holds `N_c` or the episode ends; one mini-batch of `min(N_s, len)` is
/// then sampled, `theta` takes one Adam step and the buffer is cleared.
/// A transition that ends a session bootstraps from the next decision bar;
/// only the last decision bar of the range is terminal.
///
/// `on_checkpoint(update_index, params)` runs every `checkpoint_every`
/// updates.
pub fn train_with<F>(
    config: &TrainConfig,
    data: &Dataset<'_>,
    env_config: &EnvConfig,
    learner: Learner,
    trajectory: Option<&ExpertTrajectory>,
    mut on_checkpoint: F,
) -> Result<TrainOutput>
where
    F: FnMut(usize, &QNetParams) -> Result<()>,
{
    config.validate()?;
    if learner.expert == ExpertSource::Trajectory {
        match trajectory {
            Some(tr) if tr.len() == data.series.len() => {}
            _ => return Err(Error::arg("expert trajectory missing or of the wrong length")),
        }
    }
    let env_config = EnvConfig {
        reward_mode: learner.reward_mode,
        ..env_config.clone()
    };
    let mut env = data.env(env_config)?;
    let decisions = data.decision_bars()?;
    if decisions.is_empty() {
        return Err(Error::arg("training range has no bar with a complete state window"));
    }

    // Episode lengths depend only on the data, so the schedule length is
    // known up front.
    let mut plan = Vec::with_capacity(config.episodes);
    let mut cursor = 0;
    for _ in 0..config.episodes {
        if cursor >= decisions.len() {
            cursor = 0;
        }
        let end = (cursor + config.steps_per_episode).min(decisions.len());
        plan.push(cursor..end);
        cursor = end;
    }
    let total_steps: usize = plan.iter().map(|r| r.len()).sum();
    let schedule = EpsilonSchedule::new(config, total_steps);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = QNetParams::init(data.features.cols(), config.hidden_size, config.seed)?;
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut log = TrainingLog::default();
    let mut steps_per_episode = Vec::with_capacity(plan.len());
    let mut updates_per_episode = Vec::with_capacity(plan.len());
    let mut global_step = 0;

    for (episode, span) in plan.into_iter().enumerate() {
        let mut k = span.start;
        let mut state: Option<StateWindow> = None;
        let mut updates = 0;
        while k < span.end {
            let mut filled = 0;
            while filled < config.buffer_capacity && k < span.end {
                let bar = decisions[k];
                let s = match state.take() {
                    Some(s) => s,
                    None => env.reset(bar)?,
                };
                let q = forward(&params, &s)?;
                let action = select_action(&q, schedule.at(global_step), &mut rng);
                let expert_reward = env.expert_reward();
                let step = env.step(action)?;
                k += 1;
                filled += 1;
                global_step += 1;
                let (expert_action, expert_reward) = match learner.expert {
                    ExpertSource::MirrorAgent => (action, step.reward),
                    ExpertSource::Trajectory => (
                        trajectory.map(|tr| tr.action(bar)).unwrap_or_default(),
                        expert_reward.unwrap_or(crate::env::EXPERT_TRAINING_REWARD),
                    ),
                };
                let done = step.done;
                let next_state = match step.next_state {
                    Some(s) => Some(s),
                    None => decisions
                        .get(k)
                        .map(|&b| build_state(data.features, b, data.window_len))
                        .transpose()?,
                };
                state = if k == span.end || done { None } else { next_state.clone() };
                let transition = Transition {
                    state: s,
                    action,
                    expert_action,
                    reward: step.reward,
                    expert_reward,
                    next_state,
                };
                if config.persistent_buffer {
                    buffer.push_evicting(transition);
                } else {
                    buffer.push(transition)?;
                }
            }

            let n = config.batch_size.min(buffer.len());
            let batch = buffer.sample(n, &mut rng)?;
            let (loss, mut grads) = td_loss_and_gradient(&params, &batch, config.gamma, learner.loss)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at update {} (episode {episode})",
                    loss.total,
                    log.entries.len()
                )));
            }
            clip_global_norm(&mut grads, config.grad_clip);
            adam_step(&mut params, &grads, &mut opt)?;
            if !config.persistent_buffer {
                buffer.clear();
            }
            let update_index = log.entries.len();
            log.entries.push(LogEntry {
                update_index,
                episode,
                epsilon: schedule.at(global_step.saturating_sub(1)),
                loss_agent: loss.agent,
                loss_expert: loss.expert,
                loss_total: loss.total,
                batch_size: n,
            });
            updates += 1;
            if config.checkpoint_every > 0 && (update_index + 1) % config.checkpoint_every == 0 {
                on_checkpoint(update_index, &params)?;
            }
        }
        steps_per_episode.push(span.len());
        updates_per_episode.push(updates);
    }

    Ok(TrainOutput {
        params,
        log,
        steps_per_episode,
        updates_per_episode,
        final_buffer_len: buffer.len(),
    })
}

/// Greedy actions of `params` at every decision bar of the dataset.
pub fn greedy_actions(params: &QNetParams, data: &Dataset<'_>) -> Result<Vec<(usize, Action)>> {
    data.decision_bars()?
        .into_iter()
        .map(|t| {
            let s = build_state(data.features, t, data.window_len)?;
            Ok((t, forward(params, &s)?.argmax()))
        })
        .collect()
}
