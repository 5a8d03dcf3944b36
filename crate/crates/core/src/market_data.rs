//! Bar series: loading, validation, aggregation and synthetic generation.
//!
//! A session is a maximal run of bars on the same UTC calendar day whose
//! timestamps are spaced exactly one bar period apart. Sessions are the unit
//! of the day-trading rule: every position is closed at a session's last bar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Exact column order of the bar CSV format.
pub const CSV_HEADER: [&str; 7] = ["timestamp", "open", "high", "low", "close", "volume", "amount"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// Epoch seconds, UTC.
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub amount: f64,
}

impl Bar {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and positive".into());
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err("volume must be finite and non-negative".into());
        }
        if !(self.amount.is_finite() && self.amount >= 0.0) {
            return Err("amount must be finite and non-negative".into());
        }
        if self.low > self.high {
            return Err(format!("low {} above high {}", self.low, self.high));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above min(open, close)", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below max(open, close)", self.high));
        }
        Ok(())
    }

    pub fn day(&self) -> i64 {
        self.timestamp.div_euclid(SECONDS_PER_DAY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    bars: Vec<Bar>,
    frequency: u32,
    sessions: Vec<Range<usize>>,
}

impl BarSeries {
    /// Builds a series and infers its sessions from calendar-day changes and
    /// timestamp gaps. Bars are validated individually and for ordering.
    pub fn new(bars: Vec<Bar>, frequency: u32) -> Result<Self> {
        if frequency == 0 {
            return Err(Error::arg("frequency must be at least 1 minute"));
        }
        for (i, bar) in bars.iter().enumerate() {
            bar.validate()
                .map_err(|message| Error::Validation { row: i + 1, message })?;
        }
        for (i, w) in bars.windows(2).enumerate() {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::Ordering {
                    row: i + 2,
                    prev: w[0].timestamp,
                    next: w[1].timestamp,
                });
            }
        }
        let step = i64::from(frequency) * 60;
        let mut sessions = Vec::new();
        let mut start = 0;
        for i in 1..bars.len() {
            let prev = &bars[i - 1];
            let cur = &bars[i];
            if cur.day() != prev.day() || cur.timestamp - prev.timestamp != step {
                sessions.push(start..i);
                start = i;
            }
        }
        if !bars.is_empty() {
            sessions.push(start..bars.len());
        }
        Ok(Self {
            bars,
            frequency,
            sessions,
        })
    }

    /// Builds a series with explicit session ranges, checking every series
    /// invariant against them.
    pub fn with_sessions(bars: Vec<Bar>, frequency: u32, sessions: Vec<Range<usize>>) -> Result<Self> {
        let inferred = Self::new(bars, frequency)?;
        let mut expected = 0;
        for s in &sessions {
            if s.start != expected || s.end <= s.start {
                return Err(Error::arg("sessions must be ordered, disjoint, non-empty and cover all bars"));
            }
            expected = s.end;
        }
        if expected != inferred.bars.len() {
            return Err(Error::arg("sessions do not cover all bars"));
        }
        let step = i64::from(frequency) * 60;
        for s in &sessions {
            let bars = &inferred.bars[s.clone()];
            if bars.windows(2).any(|w| w[1].timestamp - w[0].timestamp != step) {
                return Err(Error::arg("bars within a session must be one period apart"));
            }
        }
        Ok(Self {
            sessions,
            ..inferred
        })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    /// Bar period in minutes.
    pub fn frequency(&self) -> u32 {
        self.frequency
    }

    pub fn sessions(&self) -> &[Range<usize>] {
        &self.sessions
    }

    pub fn close(&self, index: usize) -> f64 {
        self.bars[index].close
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// Index of the session containing bar `index`.
    pub fn session_of(&self, index: usize) -> Option<usize> {
        if index >= self.bars.len() {
            return None;
        }
        let pos = self.sessions.partition_point(|s| s.end <= index);
        Some(pos)
    }

    /// Whether `index` is the final bar of its session.
    pub fn is_session_end(&self, index: usize) -> bool {
        self.session_of(index)
            .map(|s| self.sessions[s].end == index + 1)
            .unwrap_or(false)
    }

    /// Half-open index range of bars whose timestamps fall in `[from, to)`.
    pub fn index_range(&self, from: Option<i64>, to: Option<i64>) -> Range<usize> {
        let lo = from.map_or(0, |f| self.bars.partition_point(|b| b.timestamp < f));
        let hi = to.map_or(self.bars.len(), |t| self.bars.partition_point(|b| b.timestamp < t));
        lo..hi.max(lo)
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    timestamp: i64,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
    amount: f64,
}

/// Loads a bar CSV. Row numbers in errors count the header as row 1.
pub fn load_bars(path: impl AsRef<Path>, frequency: u32) -> Result<BarSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bars(file, frequency)
}

pub fn read_bars(reader: impl std::io::Read, frequency: u32) -> Result<BarSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .clone();
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut bars = Vec::new();
    for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let bar = Bar {
            timestamp: r.timestamp,
            open: r.open,
            high: r.high,
            low: r.low,
            close: r.close,
            volume: r.volume,
            amount: r.amount,
        };
        bar.validate().map_err(|message| Error::Validation { row, message })?;
        if let Some(prev) = bars.last().map(|b: &Bar| b.timestamp) {
            if bar.timestamp <= prev {
                return Err(Error::Ordering { row, prev, next: bar.timestamp });
            }
        }
        bars.push(bar);
    }
    BarSeries::new(bars, frequency)
}

pub fn write_bars(series: &BarSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_bars_to(series, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_bars_to(series: &BarSeries, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for b in series.bars() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.timestamp, b.open, b.high, b.low, b.close, b.volume, b.amount
        )?;
    }
    Ok(())
}

/// Aggregates bars into coarser bars of `target_frequency` minutes. Groups
/// start at each session's first bar; a trailing partial group becomes a
/// shorter bar.
pub fn aggregate(series: &BarSeries, target_frequency: u32) -> Result<BarSeries> {
    let base = series.frequency();
    if target_frequency == 0 || target_frequency % base != 0 {
        return Err(Error::arg(format!(
            "target frequency {target_frequency} is not a positive multiple of {base}"
        )));
    }
    let ratio = (target_frequency / base) as usize;
    if ratio == 1 {
        return Ok(series.clone());
    }
    let mut bars = Vec::new();
    let mut sessions = Vec::with_capacity(series.sessions().len());
    for session in series.sessions() {
        let start = bars.len();
        for group in series.bars()[session.clone()].chunks(ratio) {
            let first = group[0];
            let mut out = first;
            for b in &group[1..] {
                out.high = out.high.max(b.high);
                out.low = out.low.min(b.low);
                out.volume += b.volume;
                out.amount += b.amount;
            }
            out.close = group[group.len() - 1].close;
            bars.push(out);
        }
        sessions.push(start..bars.len());
    }
    BarSeries::with_sessions(bars, target_frequency, sessions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Sine,
    Trend,
    RandomWalk,
    RegimeSwitch,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "trend" => Ok(Self::Trend),
            "random-walk" => Ok(Self::RandomWalk),
            "regime-switch" => Ok(Self::RegimeSwitch),
            other => Err(Error::arg(format!("unknown synthetic series kind `{other}`"))),
        }
    }
}

/// Parameters of a synthetic bar series.
///
/// * `sine`: `close[t] = base + amplitude * sin(2 pi t / period)`
/// * `trend`: `close[t] = base + drift * t + volatility * z_t`
/// * `random-walk`: `close[t] = close[t-1] + drift + volatility * z_t`
/// * `regime-switch`: a random walk whose drift flips sign with probability
///   `1 / regime_length` per bar
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub base_price: f64,
    pub amplitude: f64,
    /// Sine period in bars.
    pub period: f64,
    pub drift: f64,
    pub volatility: f64,
    pub bars_per_day: usize,
    /// Bar period in minutes.
    pub frequency: u32,
    /// Timestamp of the first bar of the first day.
    pub start: i64,
    /// Maximum extension of high/low beyond the open/close envelope.
    pub wick: f64,
    pub regime_length: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            length: 1000,
            base_price: 4000.0,
            amplitude: 20.0,
            period: 20.0,
            drift: 0.0,
            volatility: 1.0,
            bars_per_day: 240,
            frequency: 1,
            // 2020-01-02 01:30:00 UTC
            start: 1_577_928_600,
            wick: 0.0,
            regime_length: 200.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::arg("synthetic length must be positive"));
        }
        if !(self.base_price.is_finite() && self.base_price > 0.0) {
            return Err(Error::arg("base price must be positive"));
        }
        if self.bars_per_day == 0 || self.frequency == 0 {
            return Err(Error::arg("bars per day and frequency must be positive"));
        }
        let offset = self.start.rem_euclid(SECONDS_PER_DAY);
        let span = (self.bars_per_day as i64 - 1) * i64::from(self.frequency) * 60;
        if offset + span >= SECONDS_PER_DAY {
            return Err(Error::arg("a synthetic trading day must fit within one calendar day"));
        }
        if self.kind == SynthKind::Sine && !(self.period > 0.0) {
            return Err(Error::arg("sine period must be positive"));
        }
        if self.kind == SynthKind::RegimeSwitch && !(self.regime_length >= 1.0) {
            return Err(Error::arg("regime length must be at least 1"));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("drift", self.drift),
            ("volatility", self.volatility),
            ("wick", self.wick),
        ] {
            if !v.is_finite() {
                return Err(Error::arg(format!("{name} must be finite")));
            }
        }
        if self.volatility < 0.0 || self.wick < 0.0 {
            return Err(Error::arg("volatility and wick must be non-negative"));
        }
        Ok(())
    }

    fn timestamp(&self, t: usize) -> i64 {
        let day = (t / self.bars_per_day) as i64;
        let slot = (t % self.bars_per_day) as i64;
        self.start + day * SECONDS_PER_DAY + slot * i64::from(self.frequency) * 60
    }
}

/// Generates a deterministic synthetic series for `(spec, seed)`.
///
/// Random-walk style prices are floored at 0.1% of the base price to keep
/// every bar valid.
pub fn synth_series(spec: &SynthSpec, seed: u64) -> Result<BarSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = spec.base_price * 1e-3;
    let mut closes = Vec::with_capacity(spec.length);
    let mut sign = 1.0;
    for t in 0..spec.length {
        let z: f64 = rng.sample(StandardNormal);
        let close = match spec.kind {
            SynthKind::Sine => {
                spec.base_price
                    + spec.amplitude * (2.0 * std::f64::consts::PI * t as f64 / spec.period).sin()
            }
            SynthKind::Trend => spec.base_price + spec.drift * t as f64 + spec.volatility * z,
            SynthKind::RandomWalk => match closes.last() {
                None => spec.base_price,
                Some(prev) => prev + spec.drift + spec.volatility * z,
            },
            SynthKind::RegimeSwitch => {
                if rng.random::<f64>() < 1.0 / spec.regime_length {
                    sign = -sign;
                }
                match closes.last() {
                    None => spec.base_price,
                    Some(prev) => prev + sign * spec.drift + spec.volatility * z,
                }
            }
        };
        closes.push(close.max(floor));
    }

    let mut bars = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let close = closes[t];
        let open = if t > 0 { closes[t - 1] } else { close };
        let up: f64 = rng.random();
        let down: f64 = rng.random();
        let high = open.max(close) + spec.wick * up;
        let low = (open.min(close) - spec.wick * down).max(open.min(close) * 0.5);
        let volume = (1000.0 * (0.5 + rng.random::<f64>())).round();
        bars.push(Bar {
            timestamp: spec.timestamp(t),
            open,
            high,
            low,
            close,
            volume,
            amount: volume * close,
        });
    }
    BarSeries::new(bars, spec.frequency)
}
