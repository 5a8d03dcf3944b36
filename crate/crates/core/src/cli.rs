//! Command-line front end: `synth`, `train`, `backtest` and `sweep`.
//!
//! Every output lands under `<out_dir>/run-<hash>/`, where the hash is taken
//! over the resolved configuration, so identical configs share a run
//! directory and reruns overwrite it byte for byte.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backtest::{run_backtest, BacktestReport, Policy};
use crate::baselines::{buy_and_hold, dual_thrust_signals, macd_signals, train_bc, train_dqn, SignalSeries};
use crate::config::{Method, RunConfig, ALL_STRATEGIES};
use crate::env::{EnvConfig, RewardMode};
use crate::expert::{expert_trajectory, ExpertTrajectory};
use crate::features::{compute_features, first_state_index, normalize, FeatureMatrix};
use crate::market_data::{aggregate, load_bars, synth_series, write_bars, BarSeries, SynthKind, SynthSpec};
use crate::qnet::Checkpoint;
use crate::training::{train_with, Dataset, Learner, TrainOutput};

#[derive(Debug, Parser)]
#[command(name = "expert-td", version, about = "Expert-trajectory reinforcement learning for intraday futures trading")]
pub struct Cli {
    /// Write the normalized feature matrix to <run>/features.csv.
    #[arg(long, global = true)]
    pub dump_features: bool,
    /// Write the expert trajectory to <run>/expert.csv.
    #[arg(long, global = true)]
    pub dump_expert: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bar CSV.
    Synth(SynthArgs),
    /// Train a Q-network (expert_td, dqn or bc).
    Train(TrainArgs),
    /// Evaluate strategies on the test range.
    Backtest(BacktestArgs),
    /// Re-run one strategy's backtest across parameter values.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Sine,
    Trend,
    RandomWalk,
    RegimeSwitch,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Sine => SynthKind::Sine,
            KindArg::Trend => SynthKind::Trend,
            KindArg::RandomWalk => SynthKind::RandomWalk,
            KindArg::RegimeSwitch => SynthKind::RegimeSwitch,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "sine")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 1000)]
    pub length: usize,
    #[arg(long, default_value_t = 4000.0)]
    pub base: f64,
    #[arg(long, default_value_t = 20.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 20.0)]
    pub period: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub drift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub volatility: f64,
    #[arg(long, default_value_t = 240)]
    pub bars_per_day: usize,
    /// Bar period in minutes.
    #[arg(long, default_value_t = 1)]
    pub frequency: u32,
    /// Epoch seconds of the first bar.
    #[arg(long, default_value_t = 1_577_928_600)]
    pub start: i64,
    #[arg(long, default_value_t = 0.0)]
    pub wick: f64,
    #[arg(long, default_value_t = 200.0)]
    pub regime_length: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            kind: self.kind.into(),
            length: self.length,
            base_price: self.base,
            amplitude: self.amplitude,
            period: self.period,
            drift: self.drift,
            volatility: self.volatility,
            bars_per_day: self.bars_per_day,
            frequency: self.frequency,
            start: self.start,
            wick: self.wick,
            regime_length: self.regime_length,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides `[train] method`.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Comma-separated strategies; defaults to `[backtest] strategies`.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<String>,
    /// Evaluate this checkpoint as strategy `model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    StopLossK,
    Frequency,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::StopLossK => "stop_loss_k",
            SweepParam::Frequency => "frequency",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<u32>,
    #[arg(long, default_value = "expert_td")]
    pub strategy: String,
}

/// Data prepared for one configuration: aggregated bars, normalized
/// features, the expert trajectory and the train/test index ranges.
pub struct Pipeline {
    pub config: RunConfig,
    pub series: BarSeries,
    pub features: FeatureMatrix,
    pub expert: ExpertTrajectory,
    pub train_range: Range<usize>,
    pub test_range: Range<usize>,
}

impl Pipeline {
    pub fn prepare(config: RunConfig) -> anyhow::Result<Self> {
        let path = config.data_path();
        if !path.exists() {
            bail!("data file {} does not exist", path.display());
        }
        let raw = load_bars(&path, config.data.frequency)
            .with_context(|| format!("loading {}", path.display()))?;
        let series = aggregate(&raw, config.data.trading_frequency)?;
        let matrix = compute_features(&series, &config.features.factors)?;
        let features = normalize(&matrix, config.features.norm_window)?;
        let expert = expert_trajectory(&series);
        let split = &config.split;
        let train_range = series.index_range(split.train_start, Some(split.train_end));
        let test_range = series.index_range(Some(config.test_start()), split.test_end);
        Ok(Self {
            config,
            series,
            features,
            expert,
            train_range,
            test_range,
        })
    }

    fn dataset(&self, range: Range<usize>) -> Dataset<'_> {
        Dataset {
            series: &self.series,
            features: &self.features,
            window_len: self.config.features.window_len,
            range,
        }
    }

    pub fn train_data(&self) -> Dataset<'_> {
        self.dataset(self.train_range.clone())
    }

    pub fn test_data(&self) -> anyhow::Result<Dataset<'_>> {
        let r = self.test_range.clone();
        if r.is_empty() {
            bail!("test range contains no bars");
        }
        let warm = first_state_index(&self.features, self.config.features.window_len);
        match warm {
            Some(w) if w <= r.start => Ok(self.dataset(r)),
            Some(w) => bail!(
                "test range starts at bar {} but features and the {}-bar state window are not warmed up until bar {w}",
                r.start,
                self.config.features.window_len
            ),
            None => bail!("features never warm up; the series is too short for the factor set"),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &buf)
}

fn write_run_config(p: &Pipeline) -> anyhow::Result<()> {
    write_file(&p.run_dir().join("config.toml"), p.config.canonical().as_bytes())
}

fn write_dumps(cli: &Cli, p: &Pipeline) -> anyhow::Result<()> {
    let dir = p.run_dir();
    if cli.dump_features {
        write_with(&dir.join("features.csv"), |b| p.features.write_csv(&p.series, b))?;
    }
    if cli.dump_expert {
        write_with(&dir.join("expert.csv"), |b| p.expert.write_csv(&p.series, b))?;
    }
    Ok(())
}

fn checkpoint_path(p: &Pipeline, method: Method) -> PathBuf {
    p.run_dir().join(method.name()).join("checkpoint.json")
}

/// Trains `method` on the pipeline's train range and writes its checkpoint
/// and training log.
pub fn train_method(p: &Pipeline, method: Method) -> anyhow::Result<Checkpoint> {
    let cfg = &p.config;
    let data = p.train_data();
    let dir = p.run_dir().join(method.name());
    let columns = p.features.columns().to_vec();
    let window_len = cfg.features.window_len;
    let env = cfg.env_config(RewardMode::Training);
    let mut last_saved: Option<PathBuf> = None;
    let result: crate::Result<TrainOutput> = match method {
        Method::ExpertTd => train_with(
            &cfg.train.params,
            &data,
            &env,
            Learner::expert_td(),
            Some(&p.expert),
            |update, params| {
                let path = dir.join(format!("checkpoint-{update:06}.json"));
                fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
                Checkpoint::new(params.clone(), window_len, columns.clone()).save(&path)?;
                last_saved = Some(path);
                Ok(())
            },
        ),
        Method::Dqn => train_dqn(&cfg.train.params, &data, &cfg.env_config(RewardMode::Testing)),
        Method::Bc => train_bc(&cfg.train.params, &data, &p.expert),
    };
    let out = result.map_err(|e| match &last_saved {
        Some(path) => anyhow::anyhow!("training aborted: {e}; last checkpoint {}", path.display()),
        None => anyhow::anyhow!("training aborted: {e}"),
    })?;
    let ck = Checkpoint::new(out.params, window_len, columns);
    write_file(&dir.join("checkpoint.json"), ck.to_json().as_bytes())?;
    write_with(&dir.join("training_log.csv"), |b| out.log.write_csv(b))?;
    Ok(ck)
}

fn load_or_train(p: &Pipeline, method: Method) -> anyhow::Result<Checkpoint> {
    let path = checkpoint_path(p, method);
    if path.exists() {
        return Ok(Checkpoint::load(&path)?);
    }
    train_method(p, method)
}

fn check_compatible(p: &Pipeline, ck: &Checkpoint) -> anyhow::Result<()> {
    if ck.columns != p.features.columns() {
        bail!("checkpoint feature columns do not match the configured factor set");
    }
    if ck.window_len != p.config.features.window_len {
        bail!(
            "checkpoint window length {} differs from configured {}",
            ck.window_len,
            p.config.features.window_len
        );
    }
    Ok(())
}

fn baseline_signals(p: &Pipeline, name: &str) -> anyhow::Result<SignalSeries> {
    Ok(match name {
        "buy_and_hold" => buy_and_hold(&p.series),
        "macd" => macd_signals(&p.series, &p.config.macd)?,
        "dual_thrust" => dual_thrust_signals(&p.series, &p.config.dual_thrust)?,
        other => bail!("`{other}` is not a signal baseline"),
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a BacktestReport,
    run_config: &'a RunConfig,
}

/// Runs one strategy over the test range. Model strategies load their
/// checkpoint from the run directory, or from `checkpoint` when given.
pub fn evaluate(
    p: &Pipeline,
    strategy: &str,
    checkpoint: Option<&Checkpoint>,
    stop: &crate::backtest::StopLossParams,
) -> anyhow::Result<(BacktestReport, Option<SignalSeries>)> {
    let data = p.test_data()?;
    let env: EnvConfig = p.config.env_config(RewardMode::Testing);
    if let Some(method) = Method::parse(strategy) {
        let ck = match checkpoint {
            Some(ck) => ck.clone(),
            None => {
                let path = checkpoint_path(p, method);
                if !path.exists() {
                    bail!(
                        "no checkpoint for `{strategy}` at {}; run `train --method {strategy}` first",
                        path.display()
                    );
                }
                Checkpoint::load(&path)?
            }
        };
        check_compatible(p, &ck)?;
        let report = run_backtest(strategy, Policy::Greedy(&ck.params), &data, &env, stop)?;
        return Ok((report, None));
    }
    if strategy == "model" {
        let Some(ck) = checkpoint else {
            bail!("strategy `model` needs --checkpoint");
        };
        check_compatible(p, ck)?;
        let report = run_backtest(strategy, Policy::Greedy(&ck.params), &data, &env, stop)?;
        return Ok((report, None));
    }
    let sig = baseline_signals(p, strategy)?;
    let report = run_backtest(strategy, Policy::Signals(&sig), &data, &env, stop)?;
    Ok((report, Some(sig)))
}

fn write_report(p: &Pipeline, dir: &Path, report: &BacktestReport) -> anyhow::Result<()> {
    let file = ReportFile {
        report,
        run_config: &p.config,
    };
    let json = serde_json::to_string_pretty(&file)?;
    write_file(&dir.join(format!("{}.json", report.strategy)), json.as_bytes())?;
    write_with(&dir.join(format!("{}_equity.csv", report.strategy)), |b| report.write_equity_csv(b))
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let series = synth_series(&args.spec(), args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_bars(&series, &args.out)?;
    println!("wrote {} bars to {}", series.len(), args.out.display());
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let method = match &args.method {
        Some(m) => Method::parse(m).with_context(|| format!("unknown method `{m}`"))?,
        None => config.train.method,
    };
    let p = Pipeline::prepare(config)?;
    write_run_config(&p)?;
    write_dumps(cli, &p)?;
    train_method(&p, method)?;
    println!("trained {} -> {}", method.name(), checkpoint_path(&p, method).display());
    Ok(())
}

fn cmd_backtest(cli: &Cli, args: &BacktestArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let checkpoint = match &args.checkpoint {
        Some(path) => Some(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    let strategies = if !args.strategies.is_empty() {
        args.strategies.clone()
    } else if checkpoint.is_some() {
        vec!["model".to_string()]
    } else {
        config.backtest.strategies.clone()
    };
    for s in &strategies {
        if s != "model" && !ALL_STRATEGIES.contains(&s.as_str()) {
            bail!("unknown strategy `{s}`");
        }
    }
    let p = Pipeline::prepare(config)?;
    write_run_config(&p)?;
    write_dumps(cli, &p)?;
    let dir = p.run_dir().join("backtest");
    for s in &strategies {
        let explicit = if s == "model" { checkpoint.as_ref() } else { None };
        let (report, signals) = evaluate(&p, s, explicit, &p.config.stop_loss)?;
        write_report(&p, &dir, &report)?;
        if let Some(sig) = signals {
            write_with(&dir.join(format!("{s}_signals.csv")), |b| sig.write_csv(&p.series, b))?;
        }
        println!(
            "{s}: profit {:.4} sharpe {:.4} sortino {:.4}",
            report.metrics.accumulated_profit, report.metrics.sharpe_per_step, report.metrics.sortino_per_step
        );
    }
    Ok(())
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: u32,
    pub profit: f64,
    pub sharpe: f64,
    pub sortino: f64,
}

pub fn write_sweep_table(rows: &[SweepRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "value,profit,sharpe,sortino")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.value, r.profit, r.sharpe, r.sortino)?;
    }
    Ok(())
}

fn sweep_point(p: &Pipeline, strategy: &str, stop: &crate::backtest::StopLossParams) -> anyhow::Result<BacktestReport> {
    let ck = match Method::parse(strategy) {
        Some(m) => Some(load_or_train(p, m)?),
        None => None,
    };
    Ok(evaluate(p, strategy, ck.as_ref(), stop)?.0)
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    if args.values.is_empty() {
        bail!("sweep needs at least one value");
    }
    if !ALL_STRATEGIES.contains(&args.strategy.as_str()) {
        bail!("unknown strategy `{}`", args.strategy);
    }
    let config = load_config(&args.config)?;
    let base = Pipeline::prepare(config.clone())?;
    write_run_config(&base)?;
    let mut rows = Vec::with_capacity(args.values.len());
    for &value in &args.values {
        let report = match args.param {
            SweepParam::StopLossK => {
                let stop = crate::backtest::StopLossParams {
                    k: value as usize,
                    enabled: true,
                };
                sweep_point(&base, &args.strategy, &stop)?
            }
            SweepParam::Frequency => {
                let mut cfg = config.clone();
                cfg.data.trading_frequency = value;
                cfg.validate().with_context(|| format!("frequency {value}"))?;
                let p = Pipeline::prepare(cfg)?;
                write_run_config(&p)?;
                sweep_point(&p, &args.strategy, &p.config.stop_loss)?
            }
        };
        rows.push(SweepRow {
            value,
            profit: report.metrics.accumulated_profit,
            sharpe: report.metrics.sharpe_per_step,
            sortino: report.metrics.sortino_per_step,
        });
    }
    let path = base.run_dir().join(format!("sweep_{}_{}.csv", args.param.name(), args.strategy));
    write_with(&path, |b| write_sweep_table(&rows, b))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_cli(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Backtest(a) => cmd_backtest(cli, a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run_cli(&cli)
}
