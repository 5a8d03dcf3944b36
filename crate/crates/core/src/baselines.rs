//! Comparison strategies: buy and hold, MACD crossovers, Dual Thrust
//! breakouts, a profit-rewarded DQN and behavior cloning.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertTrajectory;
use crate::features::build_state;
use crate::market_data::BarSeries;
use crate::qnet::{
    adam_step, backward, clip_global_norm, forward_cached, OptimizerState, QNetParams, QValues,
    NUM_ACTIONS,
};
use crate::training::{train_with, Dataset, Learner, LogEntry, TrainConfig, TrainOutput, TrainingLog};

/// One action per bar of a series, flat at every session's last bar.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub name: String,
    pub params: String,
    pub actions: Vec<Action>,
}

impl SignalSeries {
    pub fn write_csv(&self, series: &BarSeries, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "timestamp,action")?;
        for (bar, a) in series.bars().iter().zip(&self.actions) {
            writeln!(out, "{},{}", bar.timestamp, a)?;
        }
        Ok(())
    }
}

/// Turns a desired position per bar into actions that close out at every
/// session end.
fn close_out(series: &BarSeries, positions: &[Action]) -> Vec<Action> {
    positions
        .iter()
        .enumerate()
        .map(|(t, &p)| if series.is_session_end(t) { Action::Flat } else { p })
        .collect()
}

pub fn buy_and_hold(series: &BarSeries) -> SignalSeries {
    SignalSeries {
        name: "buy_and_hold".into(),
        params: String::new(),
        actions: close_out(series, &vec![Action::Long; series.len()]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacdParams {
    pub short: usize,
    pub long: usize,
    pub signal: usize,
}

impl Default for MacdParams {
    fn default() -> Self {
        Self {
            short: 12,
            long: 26,
            signal: 9,
        }
    }
}

impl MacdParams {
    pub fn validate(&self) -> Result<()> {
        if self.short == 0 || self.signal == 0 || self.short >= self.long {
            return Err(Error::arg("MACD periods must satisfy 1 <= short < long and signal >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacdLines {
    pub dif: Vec<f64>,
    pub dea: Vec<f64>,
}

fn ema_alpha(period: usize) -> f64 {
    2.0 / (period as f64 + 1.0)
}

/// DIF = EMA_short - EMA_long of the closes, DEA = EMA_signal of DIF; every
/// EMA is seeded with its first input.
pub fn macd_lines(closes: &[f64], params: &MacdParams) -> MacdLines {
    let (a_s, a_l, a_d) = (ema_alpha(params.short), ema_alpha(params.long), ema_alpha(params.signal));
    let mut dif = Vec::with_capacity(closes.len());
    let mut dea = Vec::with_capacity(closes.len());
    let (mut fast, mut slow) = match closes.first() {
        Some(&c) => (c, c),
        None => return MacdLines { dif, dea },
    };
    let mut signal = 0.0;
    for (t, &c) in closes.iter().enumerate() {
        fast += a_s * (c - fast);
        slow += a_l * (c - slow);
        let d = fast - slow;
        if t == 0 {
            signal = d;
        }
        signal += a_d * (d - signal);
        dif.push(d);
        dea.push(signal);
    }
    MacdLines { dif, dea }
}

/// Bars where MACD fires: `Long` when DIF crosses above DEA while positive,
/// `Short` when it crosses below while negative.
pub fn macd_events(lines: &MacdLines) -> Vec<Option<Action>> {
    let n = lines.dif.len();
    let mut out = vec![None; n];
    for t in 1..n {
        let prev = lines.dif[t - 1] - lines.dea[t - 1];
        let cur = lines.dif[t] - lines.dea[t];
        if prev <= 0.0 && cur > 0.0 && lines.dif[t] > 0.0 {
            out[t] = Some(Action::Long);
        } else if prev >= 0.0 && cur < 0.0 && lines.dif[t] < 0.0 {
            out[t] = Some(Action::Short);
        }
    }
    out
}

/// Holds the most recent MACD signal; the held position survives session
/// ends but every session's final bar is flat.
pub fn macd_signals(series: &BarSeries, params: &MacdParams) -> Result<SignalSeries> {
    params.validate()?;
    if series.len() <= params.long {
        return Err(Error::arg(format!(
            "MACD needs more than {} bars, series has {}",
            params.long,
            series.len()
        )));
    }
    let lines = macd_lines(&series.closes(), params);
    let mut pos = Action::Flat;
    let positions: Vec<Action> = macd_events(&lines)
        .into_iter()
        .map(|e| {
            if let Some(a) = e {
                pos = a;
            }
            pos
        })
        .collect();
    Ok(SignalSeries {
        name: "macd".into(),
        params: format!("short={},long={},signal={}", params.short, params.long, params.signal),
        actions: close_out(series, &positions),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookbackUnit {
    Bars,
    Sessions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualThrustParams {
    pub window: usize,
    pub unit: LookbackUnit,
    pub k1: f64,
    pub k2: f64,
}

impl Default for DualThrustParams {
    fn default() -> Self {
        Self {
            window: 1,
            unit: LookbackUnit::Sessions,
            k1: 0.5,
            k2: 0.5,
        }
    }
}

impl DualThrustParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::arg("Dual Thrust needs window >= 1 and positive K1, K2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualThrustLines {
    /// `max(HH - LC, HC - LL)` over the lookback.
    pub range: f64,
    pub buy_line: f64,
    pub sell_line: f64,
}

/// `R = max(HH - LC, HC - LL)`.
pub fn dual_thrust_range(hh: f64, ll: f64, hc: f64, lc: f64) -> f64 {
    (hh - lc).max(hc - ll)
}

/// Breakout lines for every session, `None` where the lookback is not yet
/// available.
pub fn dual_thrust_lines(series: &BarSeries, params: &DualThrustParams) -> Vec<Option<DualThrustLines>> {
    let sessions = series.sessions();
    sessions
        .iter()
        .enumerate()
        .map(|(s, range)| {
            let history = match params.unit {
                LookbackUnit::Sessions => {
                    if s < params.window {
                        return None;
                    }
                    sessions[s - params.window].start..range.start
                }
                LookbackUnit::Bars => {
                    if range.start < params.window {
                        return None;
                    }
                    range.start - params.window..range.start
                }
            };
            let bars = &series.bars()[history];
            let hh = bars.iter().map(|b| b.high).fold(f64::MIN, f64::max);
            let ll = bars.iter().map(|b| b.low).fold(f64::MAX, f64::min);
            let hc = bars.iter().map(|b| b.close).fold(f64::MIN, f64::max);
            let lc = bars.iter().map(|b| b.close).fold(f64::MAX, f64::min);
            let r = dual_thrust_range(hh, ll, hc, lc);
            let open = series.bars()[range.start].open;
            Some(DualThrustLines {
                range: r,
                buy_line: open + params.k1 * r,
                sell_line: open - params.k2 * r,
            })
        })
        .collect()
}

/// Per session: long once the close breaks strictly above the buy line,
/// short once it breaks strictly below the sell line, otherwise hold.
/// Sessions without enough history stay flat.
pub fn dual_thrust_signals(series: &BarSeries, params: &DualThrustParams) -> Result<SignalSeries> {
    params.validate()?;
    let lines = dual_thrust_lines(series, params);
    let mut positions = vec![Action::Flat; series.len()];
    for (range, line) in series.sessions().iter().zip(lines) {
        let Some(line) = line else { continue };
        let mut pos = Action::Flat;
        for t in range.clone() {
            let c = series.close(t);
            if c > line.buy_line {
                pos = Action::Long;
            } else if c < line.sell_line {
                pos = Action::Short;
            }
            positions[t] = pos;
        }
    }
    let unit = match params.unit {
        LookbackUnit::Bars => "bars",
        LookbackUnit::Sessions => "sessions",
    };
    Ok(SignalSeries {
        name: "dual_thrust".into(),
        params: format!("window={}{unit},k1={},k2={}", params.window, params.k1, params.k2),
        actions: close_out(series, &positions),
    })
}

/// Agent-only TD learning on realised profit.
pub fn train_dqn(config: &TrainConfig, data: &Dataset<'_>, env_config: &EnvConfig) -> Result<TrainOutput> {
    train_with(config, data, env_config, Learner::dqn(), None, |_, _| Ok(()))
}

/// `-log softmax(q)[label]`.
pub fn cross_entropy(q: &QValues, label: Action) -> f64 {
    let m = q.max();
    let lse = m + q.0.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - q.get(label)
}

fn softmax(q: &QValues) -> [f64; NUM_ACTIONS] {
    let m = q.max();
    let e = q.0.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// Behavior cloning: the same network fitted to expert labels with softmax
/// cross-entropy. Each episode is one shuffled pass over the decision bars
/// in mini-batches of `batch_size`.
pub fn train_bc(config: &TrainConfig, data: &Dataset<'_>, trajectory: &ExpertTrajectory) -> Result<TrainOutput> {
    config.validate()?;
    if trajectory.len() != data.series.len() {
        return Err(Error::arg("expert trajectory length differs from the series"));
    }
    let mut bars = data.decision_bars()?;
    if bars.is_empty() {
        return Err(Error::arg("training range has no bar with a complete state window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = QNetParams::init(data.features.cols(), config.hidden_size, config.seed)?;
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut log = TrainingLog::default();
    let mut updates_per_episode = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        bars.shuffle(&mut rng);
        let mut updates = 0;
        for chunk in bars.chunks(config.batch_size) {
            let n = chunk.len() as f64;
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for &t in chunk {
                let s = build_state(data.features, t, data.window_len)?;
                let cache = forward_cached(&params, &s)?;
                let label = trajectory.action(t);
                loss += cross_entropy(&cache.q(), label);
                let mut dq = softmax(&cache.q());
                dq[label.index()] -= 1.0;
                let dq = dq.map(|v| v / n);
                backward(&params, &s, &cache, &dq, &mut grads);
            }
            let loss = loss / n;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite BC loss at episode {episode}")));
            }
            clip_global_norm(&mut grads, config.grad_clip);
            adam_step(&mut params, &grads, &mut opt)?;
            log.entries.push(LogEntry {
                update_index: log.entries.len(),
                episode,
                epsilon: 0.0,
                loss_agent: loss,
                loss_expert: None,
                loss_total: loss,
                batch_size: chunk.len(),
            });
            updates += 1;
        }
        updates_per_episode.push(updates);
    }
    Ok(TrainOutput {
        params,
        log,
        steps_per_episode: vec![bars.len(); config.episodes],
        updates_per_episode,
        final_buffer_len: 0,
    })
}
