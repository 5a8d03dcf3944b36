//! Policy evaluation on held-out bars with the rolling-band stop-loss, and
//! the profit / Sharpe / Sortino metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::SignalSeries;
use crate::env::{Action, EnvConfig, RewardMode};
use crate::error::{Error, Result};
use crate::qnet::{forward, QNetParams};
use crate::training::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopLossParams {
    /// Trailing window length in bars.
    pub k: usize,
    pub enabled: bool,
}

impl Default for StopLossParams {
    fn default() -> Self {
        Self { k: 25, enabled: true }
    }
}

impl StopLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::arg("stop-loss window must be at least 2"));
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; exactly 0 when all values are equal.
fn pop_std(xs: &[f64]) -> f64 {
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Close the position when price crosses the trailing mean +- one standard
/// deviation against it. Fewer than two trailing closes disables the check.
pub fn stop_loss_check(trailing: &[f64], position: Action, price: f64) -> bool {
    if trailing.len() < 2 {
        return false;
    }
    let mu = mean(trailing);
    let sd = pop_std(trailing);
    match position {
        Action::Short => price > mu + sd,
        Action::Long => price < mu - sd,
        Action::Flat => false,
    }
}

pub fn accumulated_profit(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Mean over population standard deviation of per-step rewards; 0 when the
/// rewards have no spread.
pub fn sharpe(rewards: &[f64]) -> f64 {
    let sd = pop_std(rewards);
    if sd == 0.0 {
        return 0.0;
    }
    mean(rewards) / sd
}

/// Mean of all rewards over the population standard deviation of the
/// strictly negative ones; 0 without downside spread.
pub fn sortino(rewards: &[f64]) -> f64 {
    let downside: Vec<f64> = rewards.iter().copied().filter(|r| *r < 0.0).collect();
    let sd = pop_std(&downside);
    if downside.is_empty() || sd == 0.0 {
        return 0.0;
    }
    mean(rewards) / sd
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Argmax of the Q-network at each state.
    Greedy(&'a QNetParams),
    /// A precomputed action per bar.
    Signals(&'a SignalSeries),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquityRow {
    pub timestamp: i64,
    pub reward: f64,
    pub equity: f64,
    pub action: Action,
    pub stop_triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accumulated_profit: f64,
    pub sharpe_per_step: f64,
    pub sortino_per_step: f64,
    pub ratio_basis: &'static str,
    pub steps: usize,
    pub trade_count: usize,
    pub stop_loss_triggers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub env: EnvConfig,
    pub stop_loss: StopLossParams,
    pub window_len: usize,
    pub first_timestamp: Option<i64>,
    pub last_timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub strategy: String,
    pub metrics: Metrics,
    pub config: ReportConfig,
    #[serde(skip)]
    pub rows: Vec<EquityRow>,
}

pub const RATIO_BASIS: &str = "per-step rewards, population std, zero risk-free rate, not annualized";

impl BacktestReport {
    pub fn rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.reward).collect()
    }

    pub fn final_equity(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.equity)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_equity_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "timestamp,reward,equity,action,stop_triggered")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.timestamp,
                r.reward,
                r.equity,
                r.action,
                u8::from(r.stop_triggered)
            )?;
        }
        Ok(())
    }
}

/// Steps the testing-mode environment over every session of the dataset
/// range. When the stop-loss fires, that step's action becomes flat; the
/// policy may re-enter on the next step.
pub fn run_backtest(
    strategy: &str,
    policy: Policy<'_>,
    data: &Dataset<'_>,
    env_config: &EnvConfig,
    stop: &StopLossParams,
) -> Result<BacktestReport> {
    stop.validate()?;
    if let Policy::Signals(sig) = policy {
        if sig.actions.len() != data.series.len() {
            return Err(Error::arg("signal series length differs from the bar series"));
        }
    }
    let env_config = EnvConfig {
        reward_mode: RewardMode::Testing,
        ..env_config.clone()
    };
    let mut env = data.env(env_config.clone())?;
    let closes = data.series.closes();
    let mut rows = Vec::new();
    let mut equity = 0.0;
    let mut trades = 0;
    let mut stops = 0;
    let mut from = data.range.start;
    while let Some(start) = env.next_start(from) {
        let mut state = env.reset(start)?;
        loop {
            let bar = state.end();
            let mut action = match policy {
                Policy::Greedy(params) => forward(params, &state)?.argmax(),
                Policy::Signals(sig) => sig.actions[bar],
            };
            let mut triggered = false;
            if stop.enabled && bar >= stop.k {
                let trailing = &closes[bar - stop.k..bar];
                if stop_loss_check(trailing, env.position(), closes[bar]) {
                    action = Action::Flat;
                    triggered = true;
                    stops += 1;
                }
            }
            let step = env.step(action)?;
            trades += usize::from(step.action != step.prev_action) + usize::from(step.closed_out);
            equity += step.reward;
            rows.push(EquityRow {
                timestamp: data.series.bars()[bar].timestamp,
                reward: step.reward,
                equity,
                action,
                stop_triggered: triggered,
            });
            match step.next_state {
                Some(next) if !step.done => state = next,
                _ => break,
            }
        }
        from = env.cursor().map_or(data.range.end, |c| c + 1);
    }
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let bars = data.series.bars();
    Ok(BacktestReport {
        strategy: strategy.to_string(),
        metrics: Metrics {
            accumulated_profit: accumulated_profit(&rewards),
            sharpe_per_step: sharpe(&rewards),
            sortino_per_step: sortino(&rewards),
            ratio_basis: RATIO_BASIS,
            steps: rows.len(),
            trade_count: trades,
            stop_loss_triggers: stops,
        },
        config: ReportConfig {
            env: env_config,
            stop_loss: *stop,
            window_len: data.window_len,
            first_timestamp: bars.get(data.range.start).map(|b| b.timestamp),
            last_timestamp: data.range.end.checked_sub(1).and_then(|i| bars.get(i)).map(|b| b.timestamp),
        },
        rows,
    })
}
