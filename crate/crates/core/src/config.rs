//! Run configuration: a TOML file with one table per subsystem. Unknown keys
//! are rejected, and the fully resolved configuration (defaults included)
//! is what gets hashed and echoed into every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::StopLossParams;
use crate::baselines::{DualThrustParams, MacdParams};
use crate::env::{EnvConfig, RewardMode, DEFAULT_COST_RATE};
use crate::error::{Error, Result};
use crate::features::{default_factor_set, FactorSpec};
use crate::training::TrainConfig;

/// Bar periods, in minutes, the pipeline accepts.
pub const SUPPORTED_FREQUENCIES: [u32; 8] = [1, 3, 5, 10, 15, 30, 60, 120];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExpertTd,
    Dqn,
    Bc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ExpertTd, Method::Dqn, Method::Bc];

    pub fn name(self) -> &'static str {
        match self {
            Method::ExpertTd => "expert_td",
            Method::Dqn => "dqn",
            Method::Bc => "bc",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Bar CSV, relative to the config file's directory.
    pub path: PathBuf,
    /// Bar period of the file in minutes.
    #[serde(default = "one")]
    pub frequency: u32,
    /// Bar period the strategies trade at.
    #[serde(default = "five")]
    pub trading_frequency: u32,
    /// Root of run directories, relative to the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn one() -> u32 {
    1
}

fn five() -> u32 {
    5
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Train and test ranges as epoch-second bounds, half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_start: Option<i64>,
    pub train_end: i64,
    /// Defaults to `train_end`.
    pub test_start: Option<i64>,
    pub test_end: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub window_len: usize,
    pub norm_window: usize,
    pub factors: Vec<FactorSpec>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            window_len: 20,
            norm_window: 60,
            factors: default_factor_set(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub cost_rate: f64,
    pub force_flat_at_session_end: bool,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            cost_rate: DEFAULT_COST_RATE,
            force_flat_at_session_end: true,
        }
    }
}

/// `[train]`: the learner plus its hyperparameters in one flat table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub method: Method,
    pub params: TrainConfig,
}

impl Serialize for TrainSection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut table = toml::Table::try_from(&self.params).map_err(serde::ser::Error::custom)?;
        table.insert("method".into(), toml::Value::String(self.method.name().into()));
        table.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut table = toml::Table::deserialize(deserializer)?;
        let method = match table.remove("method") {
            None => Method::ExpertTd,
            Some(toml::Value::String(s)) => Method::parse(&s)
                .ok_or_else(|| D::Error::custom(format!("unknown method `{s}`")))?,
            Some(other) => return Err(D::Error::custom(format!("method must be a string, got {other}"))),
        };
        let params = TrainConfig::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?;
        Ok(Self { method, params })
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: Method::ExpertTd,
            params: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    pub strategies: Vec<String>,
}

pub const ALL_STRATEGIES: [&str; 6] = ["expert_td", "dqn", "bc", "buy_and_hold", "macd", "dual_thrust"];

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            strategies: ALL_STRATEGIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub split: SplitSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub stop_loss: StopLossParams,
    #[serde(default)]
    pub macd: MacdParams,
    #[serde(default)]
    pub dual_thrust: DualThrustParams,
    #[serde(default)]
    pub backtest: BacktestSection,
    /// Directory the config was read from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.data.frequency, self.data.trading_frequency] {
            if !SUPPORTED_FREQUENCIES.contains(&f) {
                return Err(Error::Config(format!(
                    "frequency {f} not in supported set {SUPPORTED_FREQUENCIES:?}"
                )));
            }
        }
        if self.data.trading_frequency % self.data.frequency != 0 {
            return Err(Error::Config("trading frequency must be a multiple of the data frequency".into()));
        }
        let s = &self.split;
        if let Some(start) = s.train_start {
            if start >= s.train_end {
                return Err(Error::Config("train range is empty".into()));
            }
        }
        let test_start = self.test_start();
        if test_start < s.train_end {
            return Err(Error::Config("test range must start after the train range ends".into()));
        }
        if let Some(end) = s.test_end {
            if end <= test_start {
                return Err(Error::Config("test range is empty".into()));
            }
        }
        if self.features.window_len == 0 || self.features.norm_window < 2 {
            return Err(Error::Config("window_len must be >= 1 and norm_window >= 2".into()));
        }
        self.env_config(RewardMode::Testing).validate()?;
        self.train.params.validate()?;
        self.stop_loss.validate()?;
        self.macd.validate()?;
        self.dual_thrust.validate()?;
        for name in &self.backtest.strategies {
            if !ALL_STRATEGIES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown strategy `{name}`")));
            }
        }
        Ok(())
    }

    pub fn test_start(&self) -> i64 {
        self.split.test_start.unwrap_or(self.split.train_end)
    }

    pub fn env_config(&self, reward_mode: RewardMode) -> EnvConfig {
        EnvConfig {
            cost_rate: self.env.cost_rate,
            reward_mode,
            force_flat_at_session_end: self.env.force_flat_at_session_end,
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.base_dir.join(&self.data.path)
    }

    /// Canonical TOML of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.base_dir
            .join(&self.data.out_dir)
            .join(format!("run-{}", self.hash()))
    }
}
