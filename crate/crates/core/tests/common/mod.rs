#![allow(dead_code)]

use expert_td::market_data::{Bar, BarSeries};
use rand::Rng;

pub const DAY0: i64 = 1_577_928_600;

/// One flat bar per close, one minute apart, a new calendar day per session.
pub fn series(sessions: &[Vec<f64>]) -> BarSeries {
    let mut bars = Vec::new();
    for (d, closes) in sessions.iter().enumerate() {
        for (i, &c) in closes.iter().enumerate() {
            bars.push(Bar {
                timestamp: DAY0 + d as i64 * 86_400 + i as i64 * 60,
                open: c,
                high: c,
                low: c,
                close: c,
                volume: 1.0,
                amount: c,
            });
        }
    }
    BarSeries::new(bars, 1).unwrap()
}

/// Bars with distinct open/high/low around each close.
pub fn ohlc_series<R: Rng>(rng: &mut R, sessions: usize, per_session: usize) -> BarSeries {
    let mut bars = Vec::new();
    let mut prev = 100.0;
    for d in 0..sessions {
        for i in 0..per_session {
            let close: f64 = prev + rng.random_range(-2.0..2.0);
            let open = prev;
            let high = open.max(close) + rng.random_range(0.0..1.0);
            let low = open.min(close) - rng.random_range(0.0..1.0);
            bars.push(Bar {
                timestamp: DAY0 + d as i64 * 86_400 + i as i64 * 60,
                open,
                high,
                low,
                close,
                volume: rng.random_range(1.0..100.0),
                amount: 1.0,
            });
            prev = close;
        }
    }
    BarSeries::new(bars, 1).unwrap()
}

pub fn random_closes<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut p = 100.0;
    (0..n)
        .map(|_| {
            p += rng.random_range(-1.0..1.0);
            p
        })
        .collect()
}
