//! The simulated market: a cursor over an immutable bar series that pays
//! per-step rewards and enforces day-trading close-out.
//!
//! A step taken at bar `t` with action `a` trades at `close[t]` and then
//! holds `a` until `close[t+1]`. Its testing reward is therefore the cost
//! term of the per-bar reward at `t` plus the holding term realised at
//! `t+1`. Summed over a session this is exactly the sum of the per-bar
//! rewards `a_{t-1} (p_t - p_{t-1}) - c p_t |a_t - a_{t-1}|`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_state, FeatureMatrix, StateWindow};
use crate::market_data::BarSeries;

/// 0.023 per mille.
pub const DEFAULT_COST_RATE: f64 = 0.000_002_3;

/// Constant training rewards: the expert always earns 1, the agent 0.
pub const EXPERT_TRAINING_REWARD: f64 = 1.0;
pub const AGENT_TRAINING_REWARD: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Action {
    Short,
    #[default]
    Flat,
    Long,
}

impl Action {
    /// Ordered as the Q-network outputs: short, flat, long.
    pub const ALL: [Action; 3] = [Action::Short, Action::Flat, Action::Long];

    pub fn value(self) -> i8 {
        match self {
            Action::Short => -1,
            Action::Flat => 0,
            Action::Long => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }

    pub fn index(self) -> usize {
        (self.value() + 1) as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Units traded when moving from `self` to `to`.
    pub fn turnover(self, to: Action) -> f64 {
        f64::from((to.value() - self.value()).abs())
    }
}

impl TryFrom<i8> for Action {
    type Error = Error;

    fn try_from(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(Action::Short),
            0 => Ok(Action::Flat),
            1 => Ok(Action::Long),
            other => Err(Error::arg(format!("action must be -1, 0 or 1, got {other}"))),
        }
    }
}

impl From<Action> for i8 {
    fn from(a: Action) -> i8 {
        a.value()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Constant rewards: agent 0, expert 1.
    Training,
    /// Realised profit net of transaction costs.
    Testing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Cost per unit of turnover as a fraction of the traded price.
    pub cost_rate: f64,
    pub reward_mode: RewardMode,
    pub force_flat_at_session_end: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            cost_rate: DEFAULT_COST_RATE,
            reward_mode: RewardMode::Testing,
            force_flat_at_session_end: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_rate.is_finite() && self.cost_rate >= 0.0) {
            return Err(Error::arg("cost rate must be non-negative"));
        }
        Ok(())
    }
}

/// Per-bar trading reward: `a_prev (p - p_prev) - c p |a - a_prev|`.
pub fn reward(a_prev: Action, a: Action, p_prev: f64, p: f64, cost_rate: f64) -> f64 {
    a_prev.as_f64() * (p - p_prev) - cost_rate * p * a_prev.turnover(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Bar at which the action was taken.
    pub bar: usize,
    pub action: Action,
    /// Position carried into the step.
    pub prev_action: Action,
    pub reward: f64,
    /// `None` when the step is terminal.
    pub next_state: Option<StateWindow>,
    pub done: bool,
    /// The position was closed at the next bar by the session-end rule.
    pub closed_out: bool,
}

#[derive(Debug, Clone)]
pub struct TradingEnv<'a> {
    series: &'a BarSeries,
    features: &'a FeatureMatrix,
    config: EnvConfig,
    window_len: usize,
    range: Range<usize>,
    cursor: Option<usize>,
    position: Action,
    done: bool,
}

impl<'a> TradingEnv<'a> {
    pub fn new(
        series: &'a BarSeries,
        features: &'a FeatureMatrix,
        config: EnvConfig,
        window_len: usize,
    ) -> Result<Self> {
        let n = series.len();
        Self::with_range(series, features, config, window_len, 0..n)
    }

    /// An environment restricted to bars in `range`; the last bar of the
    /// range acts as a session end.
    pub fn with_range(
        series: &'a BarSeries,
        features: &'a FeatureMatrix,
        config: EnvConfig,
        window_len: usize,
        range: Range<usize>,
    ) -> Result<Self> {
        config.validate()?;
        if features.rows() != series.len() {
            return Err(Error::arg("feature matrix and bar series lengths differ"));
        }
        if window_len == 0 {
            return Err(Error::arg("state window length must be positive"));
        }
        if range.end > series.len() || range.start > range.end {
            return Err(Error::arg("environment range outside the series"));
        }
        Ok(Self {
            series,
            features,
            config,
            window_len,
            range,
            cursor: None,
            position: Action::Flat,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn series(&self) -> &'a BarSeries {
        self.series
    }

    pub fn features(&self) -> &'a FeatureMatrix {
        self.features
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn position(&self) -> Action {
        self.position
    }

    pub fn cursor(&self) -> Option<usize> {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Whether bar `t` closes its episode: the session's last bar or the
    /// last bar of the range.
    pub fn is_terminal_bar(&self, t: usize) -> bool {
        self.series.is_session_end(t) || t + 1 >= self.range.end
    }

    /// Whether an episode may start at bar `t`.
    pub fn can_start(&self, t: usize) -> bool {
        self.range.contains(&t)
            && !self.is_terminal_bar(t)
            && build_state(self.features, t, self.window_len).is_ok()
    }

    /// First bar at or after `from` where an episode may start.
    pub fn next_start(&self, from: usize) -> Option<usize> {
        (from.max(self.range.start)..self.range.end).find(|&t| self.can_start(t))
    }

    pub fn reset(&mut self, start: usize) -> Result<StateWindow> {
        if !self.range.contains(&start) {
            return Err(Error::arg(format!("start bar {start} outside {:?}", self.range)));
        }
        if self.is_terminal_bar(start) {
            return Err(Error::arg(format!("start bar {start} has no next bar in its session")));
        }
        let state = build_state(self.features, start, self.window_len)
            .map_err(|e| Error::arg(format!("cannot start at bar {start}: {e}")))?;
        self.cursor = Some(start);
        self.position = Action::Flat;
        self.done = false;
        Ok(state)
    }

    /// Testing reward `step(action)` would pay from the current position.
    pub fn testing_reward(&self, action: Action) -> Result<f64> {
        let t = self.active_cursor()?;
        Ok(self.step_reward(t, self.position, action).0)
    }

    fn step_reward(&self, t: usize, held: Action, action: Action) -> (f64, bool) {
        let p = self.series.close(t);
        let p_next = self.series.close(t + 1);
        let c = self.config.cost_rate;
        let closing = self.config.force_flat_at_session_end && self.is_terminal_bar(t + 1);
        let after = if closing { Action::Flat } else { action };
        let trade = reward(held, action, p, p, c);
        let hold = reward(action, after, p, p_next, c);
        (trade + hold, closing && action != Action::Flat)
    }

    fn active_cursor(&self) -> Result<usize> {
        match self.cursor {
            Some(t) if !self.done => Ok(t),
            _ => Err(Error::State("step on a terminal environment; call reset first".into())),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let t = self.active_cursor()?;
        let prev = self.position;
        let (testing, closed_out) = self.step_reward(t, prev, action);
        let next = t + 1;
        let done = self.is_terminal_bar(next);
        let next_state = if done {
            None
        } else {
            Some(build_state(self.features, next, self.window_len)?)
        };
        self.position = if done && self.config.force_flat_at_session_end {
            Action::Flat
        } else {
            action
        };
        self.cursor = Some(next);
        self.done = done;
        let reward = match self.config.reward_mode {
            RewardMode::Testing => testing,
            RewardMode::Training => AGENT_TRAINING_REWARD,
        };
        Ok(StepResult {
            bar: t,
            action,
            prev_action: prev,
            reward,
            next_state,
            done,
            closed_out,
        })
    }

    /// Reward paid to the expert for the step about to be taken; `None` in
    /// testing mode, where only realised profit counts.
    pub fn expert_reward(&self) -> Option<f64> {
        match self.config.reward_mode {
            RewardMode::Training => Some(EXPERT_TRAINING_REWARD),
            RewardMode::Testing => None,
        }
    }
}
