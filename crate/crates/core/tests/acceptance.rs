mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use expert_td::backtest::{accumulated_profit, run_backtest, sharpe, sortino, Policy, StopLossParams};
use expert_td::baselines::{
    dual_thrust_lines, dual_thrust_signals, macd_lines, macd_signals, DualThrustParams, MacdParams, SignalSeries,
};
use expert_td::cli::{run, train_method, Pipeline};
use expert_td::config::{Method, RunConfig};
use expert_td::env::{Action, EnvConfig, RewardMode, TradingEnv};
use expert_td::expert::expert_trajectory;
use expert_td::features::{compute_features, StateWindow};
use expert_td::market_data::{synth_series, write_bars, SynthKind, SynthSpec};
use expert_td::qnet::{forward, QNetParams};
use expert_td::training::{
    agent_loss, expert_loss, greedy_actions, td_loss_and_gradient, total_loss, train_with, Dataset, Learner,
    LossKind, TrainConfig, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-7;
const GRAD_NETWORKS: usize = 60;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const EXPERT_SERIES: usize = 120;
const EXPERT_TIME_LIMIT: Duration = Duration::from_secs(30);
const LOSS_TOL: f64 = 1e-10;
const LOSS_BATCHES: usize = 1000;
const SINE_AGREEMENT: f64 = 0.90;
const SINE_PROFIT_RATIO: f64 = 0.80;
const SINE_TIME_LIMIT: Duration = Duration::from_secs(300);
const BASELINE_TOL: f64 = 1e-10;
const BASELINE_SERIES: usize = 100;
const SHARPE_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_window(rng: &mut ChaCha8Rng, len: usize, cols: usize) -> StateWindow {
    let data = (0..len * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    StateWindow::new(len - 1, len, cols, data).unwrap()
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    Action::ALL[rng.random_range(0..3)]
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, cols: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            state: random_window(rng, len, cols),
            action: random_action(rng),
            expert_action: random_action(rng),
            reward: rng.random_range(-2.0..2.0),
            expert_reward: rng.random_range(-2.0..2.0),
            next_state: rng.random_bool(0.8).then(|| random_window(rng, len, cols)),
        })
        .collect()
}

fn random_params(rng: &mut ChaCha8Rng, cols: usize, hidden: usize) -> QNetParams {
    let mut p = QNetParams::init(cols, hidden, rng.random()).unwrap();
    let flat: Vec<f64> = p.to_flat().iter().map(|_| rng.random_range(-0.8..0.8)).collect();
    p.set_flat(&flat).unwrap();
    p
}

/// The semi-gradient objective: targets are frozen at the expansion point.
fn frozen_loss(
    params: &QNetParams,
    batch: &[Transition],
    targets: &[(f64, f64)],
    kind: u8,
) -> f64 {
    let n = batch.len() as f64;
    let (mut sa, mut se) = (0.0, 0.0);
    for (t, (ya, ye)) in batch.iter().zip(targets) {
        let q = forward(params, &t.state).unwrap();
        sa += (ya - q.get(t.action)).powi(2);
        se += (ye - q.get(t.expert_action)).powi(2);
    }
    match kind {
        0 => sa / n,
        1 => se / n,
        _ => (sa / n + se / n) / 2.0,
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..GRAD_NETWORKS {
        let cols = rng.random_range(1..=4);
        let hidden = rng.random_range(1..=4);
        let len = rng.random_range(1..=5);
        let params = random_params(&mut rng, cols, hidden);
        let size = rng.random_range(1..=6);
        let batch = random_batch(&mut rng, size, len, cols);
        let gamma = rng.random_range(0.5..1.0);
        let targets: Vec<(f64, f64)> = batch
            .iter()
            .map(|t| {
                let boot = t
                    .next_state
                    .as_ref()
                    .map_or(0.0, |s| gamma * forward(&params, s).unwrap().max());
                (t.reward + boot, t.expert_reward + boot)
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        // The expert loss alone is the agent-only loss with the expert
        // fields moved into the agent slots.
        let swapped: Vec<Transition> = batch
            .iter()
            .map(|t| Transition {
                action: t.expert_action,
                reward: t.expert_reward,
                ..t.clone()
            })
            .collect();
        let swapped_refs: Vec<&Transition> = swapped.iter().collect();
        let analytic = [
            td_loss_and_gradient(&params, &refs, gamma, LossKind::AgentOnly).unwrap().1.to_flat(),
            td_loss_and_gradient(&params, &swapped_refs, gamma, LossKind::AgentOnly).unwrap().1.to_flat(),
            td_loss_and_gradient(&params, &refs, gamma, LossKind::ExpertTd).unwrap().1.to_flat(),
        ];
        let theta = params.to_flat();
        let h = 1e-6;
        for (kind, grad) in analytic.iter().enumerate() {
            for i in 0..theta.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut v = theta.clone();
                v[i] += h;
                plus.set_flat(&v).unwrap();
                v[i] = theta[i] - h;
                minus.set_flat(&v).unwrap();
                let numeric = (frozen_loss(&plus, &batch, &targets, kind as u8)
                    - frozen_loss(&minus, &batch, &targets, kind as u8))
                    / (2.0 * h);
                let diff = (grad[i] - numeric).abs();
                let scale = grad[i].abs().max(numeric.abs());
                let rel = if scale > 0.0 { diff / scale } else { 0.0 };
                worst_abs = worst_abs.max(diff);
                if scale >= 1e-3 {
                    worst = worst.max(rel);
                }
                check(diff <= GRAD_ABS_FLOOR || rel <= GRAD_REL_TOL, || {
                    format!("loss {kind} param {i}: analytic {} numeric {numeric} rel {rel:e}", grad[i])
                })?;
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    check(elapsed < GRAD_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{GRAD_NETWORKS} networks, {checked} partials, worst abs err {worst_abs:.2e}, worst rel err {worst:.2e} where |g| >= 1e-3, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

/// Total testing reward of holding `actions[t]` over bar t..t+1 and
/// closing at the last bar, booked trade by trade.
fn ledger_total(closes: &[f64], actions: &[Action], c: f64) -> f64 {
    let mut pos = 0.0;
    let mut total = 0.0;
    for (t, &p) in closes.iter().enumerate() {
        let target = if t < actions.len() { actions[t].as_f64() } else { 0.0 };
        total -= c * p * (target - pos).abs();
        pos = target;
        if t + 1 < closes.len() {
            total += pos * (closes[t + 1] - p);
        }
    }
    total
}

fn env_total(series: &expert_td::market_data::BarSeries, actions: &[Action], c: f64) -> f64 {
    let features = compute_features(series, &[]).unwrap();
    let cfg = EnvConfig {
        cost_rate: c,
        reward_mode: RewardMode::Testing,
        force_flat_at_session_end: true,
    };
    let mut env = TradingEnv::new(series, &features, cfg, 1).unwrap();
    env.reset(0).unwrap();
    let mut total = 0.0;
    for &a in actions {
        total += env.step(a).unwrap().reward;
    }
    total
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut sequences = 0u64;
    for _ in 0..EXPERT_SERIES {
        let steps = rng.random_range(1..=10usize);
        let closes: Vec<f64> = (0..=steps).map(|_| rng.random_range(0..6) as f64 + 100.0).collect();
        let series = common::series(&[closes.clone()]);
        let expert: Vec<Action> = expert_trajectory(&series).actions()[..steps].to_vec();
        let best_expert = ledger_total(&closes, &expert, 0.0);
        let via_env = env_total(&series, &expert, 0.0);
        check((via_env - best_expert).abs() < 1e-9, || {
            format!("env total {via_env} differs from ledger {best_expert}")
        })?;
        let mut seq = vec![Action::Short; steps];
        for code in 0..3usize.pow(steps as u32) {
            let mut k = code;
            for a in seq.iter_mut() {
                *a = Action::ALL[k % 3];
                k /= 3;
            }
            let total = ledger_total(&closes, &seq, 0.0);
            check(total <= best_expert + 1e-9, || {
                format!("{seq:?} earns {total} > expert {best_expert} on {closes:?}")
            })?;
            sequences += 1;
        }
        // The environment's bookkeeping also matches the ledger with costs.
        let c = rng.random_range(0.0..0.01);
        let random: Vec<Action> = (0..steps).map(|_| random_action(&mut rng)).collect();
        let (a, b) = (env_total(&series, &random, c), ledger_total(&closes, &random, c));
        check((a - b).abs() < 1e-9, || format!("with cost {c}: env {a} ledger {b}"))?;
    }
    let elapsed = started.elapsed();
    check(elapsed < EXPERT_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{EXPERT_SERIES} series, {sequences} sequences searched, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn oracle_losses(params: &QNetParams, batch: &[Transition], gamma: f64) -> (f64, f64, f64) {
    let mut la = 0.0;
    let mut le = 0.0;
    for t in batch {
        let q = forward(params, &t.state).unwrap().0;
        let next_max = match &t.next_state {
            Some(s) => {
                let qn = forward(params, s).unwrap().0;
                qn[0].max(qn[1]).max(qn[2])
            }
            None => 0.0,
        };
        let ia = (t.action.value() + 1) as usize;
        let ie = (t.expert_action.value() + 1) as usize;
        let ya = t.reward + gamma * next_max;
        let ye = t.expert_reward + gamma * next_max;
        la += (ya - q[ia]) * (ya - q[ia]);
        le += (ye - q[ie]) * (ye - q[ie]);
    }
    let n = batch.len() as f64;
    let (la, le) = (la / n, le / n);
    (la, le, 0.5 * (la + le))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..LOSS_BATCHES {
        let cols = rng.random_range(1..=5);
        let hidden = rng.random_range(1..=6);
        let len = rng.random_range(1..=4);
        let params = random_params(&mut rng, cols, hidden);
        let size = rng.random_range(1..=16);
        let batch = random_batch(&mut rng, size, len, cols);
        let gamma = rng.random_range(0.0..1.0);
        let refs: Vec<&Transition> = batch.iter().collect();
        let (oa, oe, ot) = oracle_losses(&params, &batch, gamma);
        let got = [
            agent_loss(&refs, &params, gamma).unwrap(),
            expert_loss(&refs, &params, gamma).unwrap(),
            total_loss(&refs, &params, gamma).unwrap(),
        ];
        let (breakdown, _) = td_loss_and_gradient(&params, &refs, gamma, LossKind::ExpertTd).unwrap();
        let fused = [breakdown.agent, breakdown.expert.unwrap(), breakdown.total];
        for (i, want) in [oa, oe, ot].into_iter().enumerate() {
            for v in [got[i], fused[i]] {
                let d = (v - want).abs();
                worst = worst.max(d);
                check(d <= LOSS_TOL, || format!("loss {i}: got {v} want {want}"))?;
            }
        }
    }
    Ok(format!("{LOSS_BATCHES} batches, worst abs err {worst:.2e}"))
}

fn tiny_config(episodes: usize, steps: usize, capacity: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        episodes,
        steps_per_episode: steps,
        buffer_capacity: capacity,
        batch_size: batch,
        hidden_size: 3,
        ..TrainConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let closes = common::random_closes(&mut rng, 200);
    let series = common::series(&[closes[..100].to_vec(), closes[100..].to_vec()]);
    let features = compute_features(&series, &[]).unwrap();
    let traj = expert_trajectory(&series);
    let data = Dataset {
        series: &series,
        features: &features,
        window_len: 2,
        range: 0..series.len(),
    };
    let out = train_with(
        &tiny_config(1, 4, 4, 4),
        &data,
        &EnvConfig::default(),
        Learner::expert_td(),
        Some(&traj),
        |_, _| Ok(()),
    )
    .map_err(|e| e.to_string())?;
    check(out.log.entries.len() == 1, || format!("{} updates", out.log.entries.len()))?;
    check(out.final_buffer_len == 0, || format!("buffer holds {}", out.final_buffer_len))?;
    check(out.log.entries[0].batch_size == 4, || "batch size".into())?;

    let decisions = data.decision_bars().unwrap().len();
    let mut pairs = 0;
    for _ in 0..40 {
        let steps = rng.random_range(1..=60);
        let capacity = rng.random_range(1..=20);
        let batch = rng.random_range(1..=capacity);
        let episodes = rng.random_range(1..=4);
        let cfg = TrainConfig {
            seed: rng.random(),
            ..tiny_config(episodes, steps, capacity, batch)
        };
        let out = train_with(&cfg, &data, &EnvConfig::default(), Learner::expert_td(), Some(&traj), |_, _| Ok(()))
            .map_err(|e| e.to_string())?;
        // Episodes walk the decision bars in order and restart from the
        // first one once the range is exhausted.
        let mut cursor = 0;
        for (&s, &u) in out.steps_per_episode.iter().zip(&out.updates_per_episode) {
            if cursor >= decisions {
                cursor = 0;
            }
            let expected = steps.min(decisions - cursor);
            cursor += expected;
            check(s == expected, || format!("episode of {s} steps, expected {expected}"))?;
            check(u == s.div_ceil(capacity), || format!("T={s} N_c={capacity}: {u} updates"))?;
        }
        check(out.final_buffer_len == 0, || "buffer not cleared".into())?;
        check(
            out.log.entries.iter().all(|e| e.batch_size <= batch),
            || "oversized batch".into(),
        )?;
        pairs += 1;
    }
    Ok(format!("single update with empty buffer; {pairs} random (T, N_c) pairs match ceil(T/N_c)"))
}

fn sine_workspace(dir: &Path) -> PathBuf {
    let text = include_str!("../configs/sine.toml");
    let cfg_path = dir.join("sine.toml");
    fs::write(&cfg_path, text).unwrap();
    let spec = SynthSpec {
        kind: SynthKind::Sine,
        length: 2880,
        period: 20.0,
        ..SynthSpec::default()
    };
    write_bars(&synth_series(&spec, 0).unwrap(), dir.join("sine.csv")).unwrap();
    cfg_path
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(sine_workspace(dir.path())).map_err(|e| e.to_string())?;
    check(cfg.train.params.episodes == 200, || "config must train 200 episodes".into())?;
    let p = Pipeline::prepare(cfg).map_err(|e| e.to_string())?;
    let ck = train_method(&p, Method::ExpertTd).map_err(|e| e.to_string())?;
    let test = p.test_data().map_err(|e| e.to_string())?;
    let greedy = greedy_actions(&ck.params, &test).map_err(|e| e.to_string())?;
    let agree = greedy.iter().filter(|(t, a)| p.expert.action(*t) == *a).count();
    let agreement = agree as f64 / greedy.len() as f64;

    let env = p.config.env_config(RewardMode::Testing);
    let stop = StopLossParams {
        enabled: false,
        ..StopLossParams::default()
    };
    let model = run_backtest("expert_td", Policy::Greedy(&ck.params), &test, &env, &stop).map_err(|e| e.to_string())?;
    let expert_signals = SignalSeries {
        name: "expert".into(),
        params: String::new(),
        actions: p.expert.actions().to_vec(),
    };
    let reference =
        run_backtest("expert", Policy::Signals(&expert_signals), &test, &env, &stop).map_err(|e| e.to_string())?;
    let ratio = model.metrics.accumulated_profit / reference.metrics.accumulated_profit;
    let elapsed = started.elapsed();
    let summary = format!(
        "agreement {:.1}% over {} steps, profit {:.2} vs expert {:.2} ({:.1}%), {:.1}s",
        100.0 * agreement,
        greedy.len(),
        model.metrics.accumulated_profit,
        reference.metrics.accumulated_profit,
        100.0 * ratio,
        elapsed.as_secs_f64()
    );
    check(agreement >= SINE_AGREEMENT, || summary.clone())?;
    check(ratio >= SINE_PROFIT_RATIO, || summary.clone())?;
    check(elapsed < SINE_TIME_LIMIT, || summary.clone())?;
    Ok(summary)
}

fn brute_ema(xs: &[f64], period: usize) -> f64 {
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut e = xs[0];
    for &x in xs {
        e = alpha * x + (1.0 - alpha) * e;
    }
    e
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let params = MacdParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..BASELINE_SERIES {
        let n = rng.random_range(30..120);
        let closes = common::random_closes(&mut rng, n);
        let lines = macd_lines(&closes, &params);
        let difs: Vec<f64> = (0..n)
            .map(|t| brute_ema(&closes[..=t], params.short) - brute_ema(&closes[..=t], params.long))
            .collect();
        for t in 0..n {
            let dea = brute_ema(&difs[..=t], params.signal);
            let d = (lines.dif[t] - difs[t]).abs().max((lines.dea[t] - dea).abs());
            worst = worst.max(d);
            check(d <= BASELINE_TOL, || format!("MACD bar {t}: off by {d:e}"))?;
        }

        let sessions = rng.random_range(2..6);
        let per = rng.random_range(3..30);
        let series = common::ohlc_series(&mut rng, sessions, per);
        let dt = DualThrustParams::default();
        for (s, line) in dual_thrust_lines(&series, &dt).into_iter().enumerate() {
            if s == 0 {
                check(line.is_none(), || "first session has no lookback".into())?;
                continue;
            }
            let line = line.ok_or("missing Dual Thrust lines")?;
            let prev = &series.bars()[(s - 1) * per..s * per];
            let mut hh = f64::NEG_INFINITY;
            let mut ll = f64::INFINITY;
            let mut hc = f64::NEG_INFINITY;
            let mut lc = f64::INFINITY;
            for b in prev {
                hh = hh.max(b.high);
                ll = ll.min(b.low);
                hc = hc.max(b.close);
                lc = lc.min(b.close);
            }
            let r = if hh - lc > hc - ll { hh - lc } else { hc - ll };
            let open = series.bars()[s * per].open;
            let d = (line.range - r)
                .abs()
                .max((line.buy_line - (open + 0.5 * r)).abs())
                .max((line.sell_line - (open - 0.5 * r)).abs());
            worst = worst.max(d);
            check(d <= BASELINE_TOL, || format!("Dual Thrust session {s}: off by {d:e}"))?;
        }
    }
    let flat = common::series(&[vec![50.0; 80], vec![50.0; 80]]);
    let m = macd_signals(&flat, &params).map_err(|e| e.to_string())?;
    let d = dual_thrust_signals(&flat, &DualThrustParams::default()).map_err(|e| e.to_string())?;
    check(m.actions.iter().all(|a| *a == Action::Flat), || "MACD trades a constant price".into())?;
    check(d.actions.iter().all(|a| *a == Action::Flat), || "Dual Thrust trades a constant price".into())?;
    Ok(format!("{BASELINE_SERIES} series each, worst abs err {worst:.2e}; constant price gives no signals"))
}

fn criterion_7() -> Outcome {
    let s = sharpe(&[1.0, -1.0, 1.0, 1.0]);
    check((s - 0.5774).abs() <= SHARPE_TOL, || format!("Sharpe {s}"))?;
    check(sharpe(&[0.1, 0.1, 0.1]) == 0.0, || "constant Sharpe".into())?;
    check((sortino(&[2.0, -1.0, -3.0]) + 2.0 / 3.0).abs() < 1e-12, || "Sortino hand case".into())?;
    check(sortino(&[0.0, 1.0, 2.0]) == 0.0, || "Sortino without losses".into())?;
    check(sortino(&[5.0, -1.0, 2.0]) == 0.0, || "Sortino with one loss".into())?;
    check(accumulated_profit(&[1.0, -1.0, 2.0]) == 2.0, || "profit hand case".into())?;
    check(accumulated_profit(&[]) == 0.0, || "empty profit".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..50 {
        let (days, per) = (rng.random_range(1..4), rng.random_range(30..60));
        let series = common::ohlc_series(&mut rng, days, per);
        let features = compute_features(&series, &[]).unwrap();
        let data = Dataset {
            series: &series,
            features: &features,
            window_len: 1,
            range: 0..series.len(),
        };
        let flat = SignalSeries {
            name: "flat".into(),
            params: String::new(),
            actions: vec![Action::Flat; series.len()],
        };
        let env = EnvConfig {
            cost_rate: rng.random_range(0.0..0.01),
            ..EnvConfig::default()
        };
        let r = run_backtest("flat", Policy::Signals(&flat), &data, &env, &StopLossParams::default())
            .map_err(|e| e.to_string())?;
        let m = &r.metrics;
        check(
            m.accumulated_profit == 0.0 && m.sharpe_per_step == 0.0 && m.sortino_per_step == 0.0,
            || format!("flat policy metrics {m:?}"),
        )?;
    }
    Ok(format!("Sharpe([1,-1,1,1]) = {s:.4}; hand cases hold; flat policy yields 0/0/0 on 50 series"))
}

fn sweep_workspace(dir: &Path) -> PathBuf {
    let cfg_path = dir.join("sweep.toml");
    fs::write(&cfg_path, include_str!("../configs/sweep.toml")).unwrap();
    run([
        "expert-td",
        "synth",
        "--kind",
        "regime-switch",
        "--length",
        "9600",
        "--drift",
        "0.05",
        "--volatility",
        "1.0",
        "--wick",
        "0.5",
        "--seed",
        "3",
        "--out",
        dir.join("bars.csv").to_str().unwrap(),
    ])
    .unwrap();
    cfg_path
}

fn run_sweeps(cfg: &Path) -> Result<Vec<PathBuf>, String> {
    let c = cfg.to_str().unwrap();
    run(["expert-td", "sweep", "-c", c, "--param", "stop-loss-k", "--values", "5,15,25,35"]).map_err(|e| e.to_string())?;
    run(["expert-td", "sweep", "-c", c, "--param", "frequency", "--values", "3,5,30"]).map_err(|e| e.to_string())?;
    let run_dir = RunConfig::load(cfg).map_err(|e| e.to_string())?.run_dir();
    Ok(vec![
        run_dir.join("sweep_stop_loss_k_expert_td.csv"),
        run_dir.join("sweep_frequency_expert_td.csv"),
    ])
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = sweep_workspace(dir.path());
    let tables = run_sweeps(&cfg)?;
    for (path, values) in tables.iter().zip([vec!["5", "15", "25", "35"], vec!["3", "5", "30"]]) {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let lines: Vec<&str> = text.lines().collect();
        check(lines[0] == "value,profit,sharpe,sortino", || format!("header {}", lines[0]))?;
        check(lines.len() == values.len() + 1, || format!("{} rows", lines.len() - 1))?;
        for (line, v) in lines[1..].iter().zip(&values) {
            let cells: Vec<&str> = line.split(',').collect();
            check(cells.len() == 4 && cells[0] == *v, || format!("row `{line}`"))?;
            for cell in &cells[1..] {
                let x: f64 = cell.parse().map_err(|_| format!("cell `{cell}`"))?;
                check(x.is_finite(), || format!("non-finite cell `{cell}`"))?;
            }
        }
    }
    let rejected = run(["expert-td", "sweep", "-c", cfg.to_str().unwrap(), "--param", "frequency", "--values", ""]);
    check(rejected.is_err(), || "empty value list accepted".into())?;
    Ok("k sweep 4 rows, frequency sweep 3 rows, value,profit,sharpe,sortino; empty list rejected".into())
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn full_pipeline(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let cfg = sweep_workspace(dir);
    let c = cfg.to_str().unwrap();
    for method in ["expert_td", "dqn", "bc"] {
        run(["expert-td", "--dump-features", "--dump-expert", "train", "-c", c, "--method", method])
            .map_err(|e| e.to_string())?;
    }
    run(["expert-td", "backtest", "-c", c]).map_err(|e| e.to_string())?;
    run_sweeps(&cfg)?;
    Ok(snapshot(dir))
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = full_pipeline(a.path())?;
    let second = full_pipeline(b.path())?;
    check(first.keys().eq(second.keys()), || "different file sets".into())?;
    for (path, bytes) in &first {
        check(second[path] == *bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!("synth/train x3/backtest/sweep x2 twice: {} files byte-identical", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", criterion_1),
        ("expert optimality", criterion_2),
        ("loss formula oracles", criterion_3),
        ("training loop fidelity", criterion_4),
        ("learning sanity on a sine wave", criterion_5),
        ("baseline oracles", criterion_6),
        ("metric oracles", criterion_7),
        ("sweep harness", criterion_8),
        ("determinism", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
