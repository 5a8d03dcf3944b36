mod common;

use expert_td::backtest::{sharpe, sortino, stop_loss_check};
use expert_td::env::{Action, EnvConfig, RewardMode, TradingEnv};
use expert_td::expert::expert_trajectory;
use expert_td::features::{compute_features, default_factor_set, normalize};
use expert_td::market_data::{aggregate, read_bars, synth_series, write_bars_to, Bar, BarSeries, SynthKind, SynthSpec};
use proptest::prelude::*;

fn bars_with_sessions(lens: &[usize], seed: u64) -> BarSeries {
    let mut bars = Vec::new();
    let mut x = seed;
    let mut p = 100.0;
    for (d, &n) in lens.iter().enumerate() {
        for i in 0..n {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let step = ((x >> 33) % 7) as f64 - 3.0;
            let open = p;
            p += step;
            bars.push(Bar {
                timestamp: common::DAY0 + d as i64 * 86_400 + i as i64 * 60,
                open,
                high: open.max(p) + 1.0,
                low: open.min(p) - 1.0,
                close: p,
                volume: ((x >> 20) % 100) as f64,
                amount: ((x >> 40) % 1000) as f64,
            });
        }
    }
    BarSeries::new(bars, 1).unwrap()
}

fn kind_strategy() -> impl Strategy<Value = SynthKind> {
    prop_oneof![
        Just(SynthKind::Sine),
        Just(SynthKind::Trend),
        Just(SynthKind::RandomWalk),
        Just(SynthKind::RegimeSwitch),
    ]
}

fn action_strategy() -> impl Strategy<Value = Action> {
    prop_oneof![Just(Action::Short), Just(Action::Flat), Just(Action::Long)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn aggregation_composes(a in 2u32..4, b in 2u32..4, groups in prop::collection::vec(1usize..12, 1..4), seed: u64) {
        let lens: Vec<usize> = groups.iter().map(|g| g * a as usize).collect();
        let s = bars_with_sessions(&lens, seed);
        let two_step = aggregate(&aggregate(&s, a).unwrap(), a * b).unwrap();
        let direct = aggregate(&s, a * b).unwrap();
        prop_assert_eq!(two_step, direct);
    }

    #[test]
    fn aggregation_preserves_totals(ratio in 1u32..7, lens in prop::collection::vec(1usize..40, 1..4), seed: u64) {
        let s = bars_with_sessions(&lens, seed);
        let agg = aggregate(&s, ratio).unwrap();
        let vol = |x: &BarSeries| x.bars().iter().map(|b| b.volume).sum::<f64>();
        prop_assert_eq!(vol(&agg), vol(&s));
        prop_assert_eq!(agg.sessions().len(), s.sessions().len());
        prop_assert_eq!(agg.close(agg.len() - 1), s.close(s.len() - 1));
        let hi = |x: &BarSeries| x.bars().iter().map(|b| b.high).fold(f64::MIN, f64::max);
        prop_assert_eq!(hi(&agg), hi(&s));
    }

    #[test]
    fn synthetic_series_are_valid(kind in kind_strategy(), length in 1usize..600, seed: u64, wick in 0.0f64..2.0) {
        let spec = SynthSpec { kind, length, wick, ..SynthSpec::default() };
        let s = synth_series(&spec, seed).unwrap();
        prop_assert_eq!(s.len(), length);
        for b in s.bars() {
            prop_assert!(b.low <= b.open.min(b.close) && b.high >= b.open.max(b.close));
            prop_assert!(b.low > 0.0 && b.volume >= 0.0);
        }
        prop_assert!(s.bars().windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        let mut buf = Vec::new();
        write_bars_to(&s, &mut buf).unwrap();
        prop_assert_eq!(read_bars(buf.as_slice(), 1).unwrap(), s);
    }

    #[test]
    fn features_are_causal(cut in 30usize..200, seed: u64) {
        let s = synth_series(&SynthSpec { kind: SynthKind::RandomWalk, length: 200, wick: 0.5, ..SynthSpec::default() }, seed).unwrap();
        let truncated = BarSeries::new(s.bars()[..cut].to_vec(), 1).unwrap();
        let factors = default_factor_set();
        let full = normalize(&compute_features(&s, &factors).unwrap(), 20).unwrap();
        let part = normalize(&compute_features(&truncated, &factors).unwrap(), 20).unwrap();
        for t in 0..cut {
            prop_assert_eq!(full.is_valid(t), part.is_valid(t));
            let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(full.row(t)), bits(part.row(t)));
        }
    }

    #[test]
    fn normalized_features_are_clipped(seed: u64) {
        let s = synth_series(&SynthSpec { kind: SynthKind::RegimeSwitch, length: 300, wick: 1.0, ..SynthSpec::default() }, seed).unwrap();
        let m = normalize(&compute_features(&s, &default_factor_set()).unwrap(), 30).unwrap();
        for t in 0..m.rows() {
            if m.is_valid(t) {
                prop_assert!(m.row(t).iter().all(|v| v.is_finite() && v.abs() <= 10.0));
            }
        }
    }

    #[test]
    fn env_rewards_match_position_ledger(
        lens in prop::collection::vec(2usize..15, 1..4),
        seed: u64,
        actions in prop::collection::vec(action_strategy(), 60),
        c in 0.0f64..0.01,
    ) {
        let s = bars_with_sessions(&lens, seed);
        let f = compute_features(&s, &[]).unwrap();
        let cfg = EnvConfig { cost_rate: c, reward_mode: RewardMode::Testing, force_flat_at_session_end: true };
        let mut env = TradingEnv::new(&s, &f, cfg, 1).unwrap();
        let mut it = actions.iter().cycle();
        for range in s.sessions() {
            env.reset(range.start).unwrap();
            let mut total = 0.0;
            let mut taken = Vec::new();
            loop {
                let a = *it.next().unwrap();
                let r = env.step(a).unwrap();
                total += r.reward;
                taken.push(a);
                if r.done { break; }
            }
            // Ledger: trade at each close, carry the position to the next
            // close, flatten at the session's last close.
            let closes = &s.closes()[range.clone()];
            let mut pos = 0.0;
            let mut ledger = 0.0;
            for (i, &p) in closes.iter().enumerate() {
                let target = taken.get(i).map_or(0.0, |a| a.as_f64());
                ledger -= c * p * (target - pos).abs();
                pos = target;
                if let Some(next) = closes.get(i + 1) {
                    ledger += pos * (next - p);
                }
            }
            prop_assert!((total - ledger).abs() < 1e-9, "env {} ledger {}", total, ledger);
            prop_assert_eq!(env.position(), Action::Flat);
        }
    }

    #[test]
    fn expert_flips_under_price_reflection(closes in prop::collection::vec(90i32..110, 2..40)) {
        let up: Vec<f64> = closes.iter().map(|&c| c as f64).collect();
        let down: Vec<f64> = up.iter().map(|c| 200.0 - c).collect();
        let a = expert_trajectory(&common::series(&[up]));
        let b = expert_trajectory(&common::series(&[down]));
        for (x, y) in a.actions().iter().zip(b.actions()) {
            prop_assert_eq!(x.value(), -y.value());
        }
        prop_assert_eq!(*a.actions().last().unwrap(), Action::Flat);
    }

    #[test]
    fn expert_is_invariant_to_price_scale(closes in prop::collection::vec(1.0f64..100.0, 2..40), k in 0.1f64..10.0) {
        let scaled: Vec<f64> = closes.iter().map(|c| c * k).collect();
        let a = expert_trajectory(&common::series(&[closes]));
        let b = expert_trajectory(&common::series(&[scaled]));
        for (t, (x, y)) in a.actions().iter().zip(b.actions()).enumerate() {
            // Scaling can only create or break exact ties through rounding.
            if *x != Action::Flat && *y != Action::Flat {
                prop_assert_eq!(x, y, "bar {}", t);
            }
        }
    }

    #[test]
    fn ratios_are_scale_invariant(rewards in prop::collection::vec(-5.0f64..5.0, 2..50), k in 0.1f64..10.0) {
        let scaled: Vec<f64> = rewards.iter().map(|r| r * k).collect();
        let negated: Vec<f64> = rewards.iter().map(|r| -r).collect();
        prop_assert!((sharpe(&scaled) - sharpe(&rewards)).abs() < 1e-9);
        prop_assert!((sortino(&scaled) - sortino(&rewards)).abs() < 1e-9);
        prop_assert!((sharpe(&negated) + sharpe(&rewards)).abs() < 1e-9);
    }

    #[test]
    fn stop_loss_never_fires_when_flat(trailing in prop::collection::vec(1.0f64..200.0, 0..40), price in 0.0f64..500.0) {
        prop_assert!(!stop_loss_check(&trailing, Action::Flat, price));
    }

    #[test]
    fn stop_loss_is_one_sided(trailing in prop::collection::vec(90.0f64..110.0, 2..40), price in 50.0f64..150.0) {
        let long = stop_loss_check(&trailing, Action::Long, price);
        let short = stop_loss_check(&trailing, Action::Short, price);
        prop_assert!(!(long && short));
        let mean = trailing.iter().sum::<f64>() / trailing.len() as f64;
        if price >= mean { prop_assert!(!long); }
        if price <= mean { prop_assert!(!short); }
    }
}
