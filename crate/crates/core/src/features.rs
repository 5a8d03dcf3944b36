//! Per-bar factor features and the windowed MDP state built from them.
//!
//! Every kernel reads only bars at or before the row it fills, so appending
//! bars never changes earlier rows.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::BarSeries;

/// Raw columns present in every feature matrix, before the factor columns.
pub const RAW_COLUMNS: [&str; 6] = ["open", "high", "low", "close", "volume", "amount"];

/// Output clip bound of the rolling z-score.
pub const Z_CLIP: f64 = 10.0;

pub const DEFAULT_WINDOWS: [usize; 4] = [3, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKernel {
    /// `close[t] / close[t-k] - 1`
    Return,
    /// `ln(close[t] / close[t-k])`
    LogReturn,
    /// Population std of the last `k` one-bar returns.
    Volatility,
    /// `close[t] - close[t-k]`
    Momentum,
    RollingMean,
    RollingMax,
    RollingMin,
    /// Volume z-score against the last `k` volumes.
    VolumeZscore,
    /// `(max high - min low) / close` over the last `k` bars.
    RangeRatio,
    /// Position of the close inside the `k`-bar high/low range, 0.5 when flat.
    ClosePosition,
    /// `close - EMA_k(close)`, EMA seeded with the first close.
    EmaDiff,
    /// Population skewness of the last `k` one-bar returns.
    Skew,
}

impl FactorKernel {
    pub const ALL: [FactorKernel; 12] = [
        FactorKernel::Return,
        FactorKernel::LogReturn,
        FactorKernel::Volatility,
        FactorKernel::Momentum,
        FactorKernel::RollingMean,
        FactorKernel::RollingMax,
        FactorKernel::RollingMin,
        FactorKernel::VolumeZscore,
        FactorKernel::RangeRatio,
        FactorKernel::ClosePosition,
        FactorKernel::EmaDiff,
        FactorKernel::Skew,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FactorKernel::Return => "return",
            FactorKernel::LogReturn => "log_return",
            FactorKernel::Volatility => "volatility",
            FactorKernel::Momentum => "momentum",
            FactorKernel::RollingMean => "rolling_mean",
            FactorKernel::RollingMax => "rolling_max",
            FactorKernel::RollingMin => "rolling_min",
            FactorKernel::VolumeZscore => "volume_zscore",
            FactorKernel::RangeRatio => "range_ratio",
            FactorKernel::ClosePosition => "close_position",
            FactorKernel::EmaDiff => "ema_diff",
            FactorKernel::Skew => "skew",
        }
    }

    /// Number of earlier bars the kernel needs; row `t` is defined iff
    /// `t >= lookback`.
    pub fn lookback(self, window: usize) -> usize {
        match self {
            FactorKernel::Return
            | FactorKernel::LogReturn
            | FactorKernel::Volatility
            | FactorKernel::Momentum
            | FactorKernel::Skew => window,
            _ => window - 1,
        }
    }
}

impl fmt::Display for FactorKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FactorKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::arg(format!("unknown factor kernel `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub kernel: FactorKernel,
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl FactorSpec {
    pub fn new(kernel: FactorKernel, window: usize) -> Self {
        Self { kernel, window, name: None }
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.kernel.id(), self.window))
    }
}

/// Every kernel over every default window: 48 factor columns.
pub fn default_factor_set() -> Vec<FactorSpec> {
    FactorKernel::ALL
        .iter()
        .flat_map(|&k| DEFAULT_WINDOWS.iter().map(move |&w| FactorSpec::new(k, w)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    columns: Vec<String>,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureMatrix {
    /// Builds a matrix from row-major values. Rows flagged valid must be
    /// finite.
    pub fn from_rows(columns: Vec<String>, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let c = columns.len();
        if c == 0 || values.len() != c * valid.len() {
            return Err(Error::arg("feature matrix shape mismatch"));
        }
        for (r, ok) in valid.iter().enumerate() {
            if *ok && values[r * c..(r + 1) * c].iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("valid row {r} contains undefined values")));
            }
        }
        Ok(Self { columns, values, valid })
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_valid(&self, r: usize) -> bool {
        self.valid.get(r).copied().unwrap_or(false)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    /// First valid row, if any.
    pub fn first_valid(&self) -> Option<usize> {
        self.valid.iter().position(|v| *v)
    }

    pub fn write_csv(&self, series: &BarSeries, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "timestamp,valid")?;
        for name in &self.columns {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for r in 0..self.rows() {
            write!(out, "{},{}", series.bars()[r].timestamp, u8::from(self.valid[r]))?;
            for v in self.row(r) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn negligible(std: f64, scale: f64) -> bool {
    std <= 1e-12 * (1.0 + scale.abs())
}

fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let sd = pop_std(xs);
    if negligible(sd, m) {
        return 0.0;
    }
    xs.iter().map(|x| ((x - m) / sd).powi(3)).sum::<f64>() / xs.len() as f64
}

fn kernel_column(series: &BarSeries, spec: &FactorSpec) -> Vec<f64> {
    let bars = series.bars();
    let n = bars.len();
    let k = spec.window;
    let close: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let ret1: Vec<f64> = (0..n)
        .map(|t| if t == 0 { f64::NAN } else { close[t] / close[t - 1] - 1.0 })
        .collect();
    let lookback = spec.kernel.lookback(k);
    let mut out = vec![f64::NAN; n];

    if spec.kernel == FactorKernel::EmaDiff {
        let alpha = 2.0 / (k as f64 + 1.0);
        let mut ema = close[0];
        for t in 0..n {
            ema += alpha * (close[t] - ema);
            if t >= lookback {
                out[t] = close[t] - ema;
            }
        }
        return out;
    }

    for t in lookback..n {
        let lo = t + 1 - k.min(t + 1);
        out[t] = match spec.kernel {
            FactorKernel::Return => close[t] / close[t - k] - 1.0,
            FactorKernel::LogReturn => (close[t] / close[t - k]).ln(),
            FactorKernel::Momentum => close[t] - close[t - k],
            FactorKernel::Volatility => pop_std(&ret1[t + 1 - k..=t]),
            FactorKernel::Skew => skewness(&ret1[t + 1 - k..=t]),
            FactorKernel::RollingMean => mean(&close[lo..=t]),
            FactorKernel::RollingMax => close[lo..=t].iter().copied().fold(f64::MIN, f64::max),
            FactorKernel::RollingMin => close[lo..=t].iter().copied().fold(f64::MAX, f64::min),
            FactorKernel::VolumeZscore => {
                let vols: Vec<f64> = bars[lo..=t].iter().map(|b| b.volume).collect();
                let m = mean(&vols);
                let sd = pop_std(&vols);
                if negligible(sd, m) {
                    0.0
                } else {
                    (bars[t].volume - m) / sd
                }
            }
            FactorKernel::RangeRatio | FactorKernel::ClosePosition => {
                let hh = bars[lo..=t].iter().map(|b| b.high).fold(f64::MIN, f64::max);
                let ll = bars[lo..=t].iter().map(|b| b.low).fold(f64::MAX, f64::min);
                if spec.kernel == FactorKernel::RangeRatio {
                    (hh - ll) / close[t]
                } else if hh > ll {
                    (close[t] - ll) / (hh - ll)
                } else {
                    0.5
                }
            }
            FactorKernel::EmaDiff => unreachable!(),
        };
    }
    out
}

/// Computes the raw fields plus one column per factor. Rows where any
/// factor's lookback is unfilled are marked invalid.
pub fn compute_features(series: &BarSeries, factors: &[FactorSpec]) -> Result<FeatureMatrix> {
    let n = series.len();
    if n == 0 {
        return Err(Error::arg("cannot compute features of an empty series"));
    }
    let mut names: Vec<String> = RAW_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut seen = HashSet::new();
    for f in factors {
        if f.window == 0 {
            return Err(Error::arg(format!("factor `{}` has window 0", f.name())));
        }
        if f.window > n {
            return Err(Error::arg(format!(
                "factor `{}` window {} exceeds series length {n}",
                f.name(),
                f.window
            )));
        }
        if !seen.insert(f.name()) {
            return Err(Error::arg(format!("duplicate factor name `{}`", f.name())));
        }
        names.push(f.name());
    }

    let columns: Vec<Vec<f64>> = factors.iter().map(|f| kernel_column(series, f)).collect();
    let warmup = factors.iter().map(|f| f.kernel.lookback(f.window)).max().unwrap_or(0);
    let c = names.len();
    let mut values = Vec::with_capacity(n * c);
    let mut valid = Vec::with_capacity(n);
    for (t, b) in series.bars().iter().enumerate() {
        values.extend_from_slice(&[b.open, b.high, b.low, b.close, b.volume, b.amount]);
        values.extend(columns.iter().map(|col| col[t]));
        let ok = t >= warmup && values[t * c..].iter().all(|v| v.is_finite());
        valid.push(ok);
    }
    Ok(FeatureMatrix {
        columns: names,
        values,
        valid,
    })
}

/// Rolling z-score of every column over the trailing `norm_window` valid
/// rows (fewer while the history is shorter), clipped to `[-10, 10]`.
/// Zero-variance windows map to 0.
pub fn normalize(matrix: &FeatureMatrix, norm_window: usize) -> Result<FeatureMatrix> {
    if norm_window < 2 {
        return Err(Error::arg("normalization window must be at least 2"));
    }
    let c = matrix.cols();
    let mut values = vec![f64::NAN; matrix.values.len()];
    let mut history: Vec<usize> = Vec::new();
    let mut buf = Vec::with_capacity(norm_window);
    for r in 0..matrix.rows() {
        if !matrix.valid[r] {
            continue;
        }
        history.push(r);
        let window = &history[history.len().saturating_sub(norm_window)..];
        for j in 0..c {
            buf.clear();
            buf.extend(window.iter().map(|&w| matrix.get(w, j)));
            let m = mean(&buf);
            let sd = pop_std(&buf);
            let z = if negligible(sd, m) {
                0.0
            } else {
                ((matrix.get(r, j) - m) / sd).clamp(-Z_CLIP, Z_CLIP)
            };
            values[r * c + j] = z;
        }
    }
    Ok(FeatureMatrix {
        columns: matrix.columns.clone(),
        values,
        valid: matrix.valid.clone(),
    })
}

/// `L` consecutive feature rows ending at bar `end`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StateWindow {
    end: usize,
    len: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StateWindow {
    pub fn new(end: usize, len: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 || cols == 0 || data.len() != len * cols {
            return Err(Error::arg("state window shape mismatch"));
        }
        Ok(Self { end, len, cols, data })
    }

    /// Index of the last bar in the window.
    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn build_state(matrix: &FeatureMatrix, t: usize, len: usize) -> Result<StateWindow> {
    if len == 0 {
        return Err(Error::arg("state window length must be positive"));
    }
    if t >= matrix.rows() {
        return Err(Error::StateUnavailable {
            index: t,
            reason: "past the end of the feature matrix".into(),
        });
    }
    if t + 1 < len {
        return Err(Error::StateUnavailable {
            index: t,
            reason: format!("fewer than {len} rows of history"),
        });
    }
    let start = t + 1 - len;
    if let Some(bad) = (start..=t).find(|&r| !matrix.valid[r]) {
        return Err(Error::StateUnavailable {
            index: t,
            reason: format!("row {bad} is still warming up"),
        });
    }
    let c = matrix.cols();
    let data = matrix.values[start * c..(t + 1) * c].to_vec();
    StateWindow::new(t, len, c, data)
}

/// Earliest bar at which a window of length `len` is available.
pub fn first_state_index(matrix: &FeatureMatrix, len: usize) -> Option<usize> {
    let first = matrix.first_valid()?;
    let t = first + len.max(1) - 1;
    (t < matrix.rows() && (first..=t).all(|r| matrix.valid[r])).then_some(t)
}
