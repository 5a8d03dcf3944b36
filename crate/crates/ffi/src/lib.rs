//! C ABI over the `expert_td` library.
//!
//! Every fallible function returns an [`ExtdStatus`]; on failure the message
//! is kept per thread and can be fetched with [`extd_last_error`]. Series
//! and models are opaque heap handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use expert_td::backtest::{accumulated_profit, run_backtest, sharpe, sortino, stop_loss_check, Policy, StopLossParams};
use expert_td::baselines::{buy_and_hold, dual_thrust_signals, macd_signals, DualThrustParams, MacdParams};
use expert_td::env::{Action, EnvConfig, RewardMode};
use expert_td::expert::expert_trajectory;
use expert_td::features::{compute_features, StateWindow};
use expert_td::market_data::{aggregate, load_bars, synth_series, BarSeries, SynthKind, SynthSpec};
use expert_td::qnet::{forward, Checkpoint};
use expert_td::training::Dataset;
use expert_td::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    State = 5,
    Numeric = 6,
    Checkpoint = 7,
    Panic = 8,
}

impl From<&Error> for ExtdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => ExtdStatus::Io,
            Error::Parse { .. } | Error::Validation { .. } | Error::Ordering { .. } => ExtdStatus::Parse,
            Error::InvalidArgument(_) | Error::Config(_) => ExtdStatus::InvalidArgument,
            Error::StateUnavailable { .. }
            | Error::SessionBoundary { .. }
            | Error::State(_)
            | Error::BufferFull { .. } => ExtdStatus::State,
            Error::Numeric(_) => ExtdStatus::Numeric,
            Error::Checkpoint(_) => ExtdStatus::Checkpoint,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: ExtdStatus, msg: impl Into<String>) -> ExtdStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), ExtdStatus>) -> ExtdStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExtdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ExtdStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> ExtdStatus {
    let status = ExtdStatus::from(&e);
    fail(status, e.to_string())
}

fn null() -> ExtdStatus {
    fail(ExtdStatus::NullPointer, "null pointer argument")
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, ExtdStatus> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ExtdStatus::InvalidArgument, "string is not valid UTF-8"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], ExtdStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize) -> Result<&'a mut [T], ExtdStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, ExtdStatus> {
    p.as_mut().ok_or_else(null)
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn extd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opaque bar series.
pub struct ExtdSeries(BarSeries);

/// Opaque Q-network checkpoint.
pub struct ExtdModel(Checkpoint);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtdSynthKind {
    Sine = 0,
    Trend = 1,
    RandomWalk = 2,
    RegimeSwitch = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ExtdSynthSpec {
    pub kind: ExtdSynthKind,
    pub length: usize,
    pub base_price: f64,
    pub amplitude: f64,
    pub period: f64,
    pub drift: f64,
    pub volatility: f64,
    pub bars_per_day: usize,
    pub frequency: u32,
    pub start: i64,
    pub wick: f64,
    pub regime_length: f64,
}

impl From<ExtdSynthSpec> for SynthSpec {
    fn from(s: ExtdSynthSpec) -> Self {
        SynthSpec {
            kind: match s.kind {
                ExtdSynthKind::Sine => SynthKind::Sine,
                ExtdSynthKind::Trend => SynthKind::Trend,
                ExtdSynthKind::RandomWalk => SynthKind::RandomWalk,
                ExtdSynthKind::RegimeSwitch => SynthKind::RegimeSwitch,
            },
            length: s.length,
            base_price: s.base_price,
            amplitude: s.amplitude,
            period: s.period,
            drift: s.drift,
            volatility: s.volatility,
            bars_per_day: s.bars_per_day,
            frequency: s.frequency,
            start: s.start,
            wick: s.wick,
            regime_length: s.regime_length,
        }
    }
}

/// Default synthetic series parameters.
#[no_mangle]
pub extern "C" fn extd_synth_spec_default() -> ExtdSynthSpec {
    let d = SynthSpec::default();
    ExtdSynthSpec {
        kind: ExtdSynthKind::Sine,
        length: d.length,
        base_price: d.base_price,
        amplitude: d.amplitude,
        period: d.period,
        drift: d.drift,
        volatility: d.volatility,
        bars_per_day: d.bars_per_day,
        frequency: d.frequency,
        start: d.start,
        wick: d.wick,
        regime_length: d.regime_length,
    }
}

fn emit_series(series: BarSeries, out: *mut *mut ExtdSeries) -> Result<(), ExtdStatus> {
    let slot = unsafe { out_ref(out)? };
    *slot = Box::into_raw(Box::new(ExtdSeries(series)));
    Ok(())
}

/// Loads a bar CSV recorded at `frequency` minutes.
#[no_mangle]
pub unsafe extern "C" fn extd_series_load(path: *const c_char, frequency: u32, out: *mut *mut ExtdSeries) -> ExtdStatus {
    guard(|| {
        let path = cstr(path)?;
        let s = load_bars(path, frequency).map_err(lib_err)?;
        emit_series(s, out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn extd_series_synth(spec: *const ExtdSynthSpec, seed: u64, out: *mut *mut ExtdSeries) -> ExtdStatus {
    guard(|| {
        let spec = *spec.as_ref().ok_or_else(null)?;
        let s = synth_series(&spec.into(), seed).map_err(lib_err)?;
        emit_series(s, out)
    })
}

/// Aggregates into bars of `target_frequency` minutes; `series` is untouched.
#[no_mangle]
pub unsafe extern "C" fn extd_series_aggregate(
    series: *const ExtdSeries,
    target_frequency: u32,
    out: *mut *mut ExtdSeries,
) -> ExtdStatus {
    guard(|| {
        let s = &series.as_ref().ok_or_else(null)?.0;
        let agg = aggregate(s, target_frequency).map_err(lib_err)?;
        emit_series(agg, out)
    })
}

/// Number of bars; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn extd_series_len(series: *const ExtdSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.len())
}

/// Writes the `len` closes into `out`; `len` must equal the series length.
#[no_mangle]
pub unsafe extern "C" fn extd_series_closes(series: *const ExtdSeries, out: *mut f64, len: usize) -> ExtdStatus {
    guard(|| {
        let s = &series.as_ref().ok_or_else(null)?.0;
        if len != s.len() {
            return Err(fail(ExtdStatus::InvalidArgument, "buffer length differs from series length"));
        }
        slice_mut(out, len)?.copy_from_slice(&s.closes());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn extd_series_free(series: *mut ExtdSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Writes the expert action (-1, 0, 1) for every bar into `out`.
#[no_mangle]
pub unsafe extern "C" fn extd_expert_trajectory(series: *const ExtdSeries, out: *mut i8, len: usize) -> ExtdStatus {
    guard(|| {
        let s = &series.as_ref().ok_or_else(null)?.0;
        if len != s.len() {
            return Err(fail(ExtdStatus::InvalidArgument, "buffer length differs from series length"));
        }
        let traj = expert_trajectory(s);
        for (o, a) in slice_mut(out, len)?.iter_mut().zip(traj.actions()) {
            *o = a.value();
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExtdMetrics {
    pub accumulated_profit: f64,
    pub sharpe: f64,
    pub sortino: f64,
    pub steps: usize,
}

fn metrics_of(rewards: &[f64]) -> ExtdMetrics {
    ExtdMetrics {
        accumulated_profit: accumulated_profit(rewards),
        sharpe: sharpe(rewards),
        sortino: sortino(rewards),
        steps: rewards.len(),
    }
}

/// Profit, per-step Sharpe and per-step Sortino of a reward sequence.
#[no_mangle]
pub unsafe extern "C" fn extd_metrics(rewards: *const f64, n: usize, out: *mut ExtdMetrics) -> ExtdStatus {
    guard(|| {
        let r = slice(rewards, n)?;
        *out_ref(out)? = metrics_of(r);
        Ok(())
    })
}

fn action_of(v: i8) -> Result<Action, ExtdStatus> {
    Action::try_from(v).map_err(|_| fail(ExtdStatus::InvalidArgument, format!("action {v} not in {{-1, 0, 1}}")))
}

/// Sets `*triggered` when `price` breaches the trailing band against
/// `position`.
#[no_mangle]
pub unsafe extern "C" fn extd_stop_loss_check(
    trailing: *const f64,
    n: usize,
    position: i8,
    price: f64,
    triggered: *mut bool,
) -> ExtdStatus {
    guard(|| {
        let t = slice(trailing, n)?;
        let pos = action_of(position)?;
        *out_ref(triggered)? = stop_loss_check(t, pos, price);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn extd_model_load(path: *const c_char, out: *mut *mut ExtdModel) -> ExtdStatus {
    guard(|| {
        let path = cstr(path)?;
        let ck = Checkpoint::load(path).map_err(lib_err)?;
        *out_ref(out)? = Box::into_raw(Box::new(ExtdModel(ck)));
        Ok(())
    })
}

/// Feature count per state row; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn extd_model_input_size(model: *const ExtdModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.input_size())
}

/// State window length the model was trained with; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn extd_model_window_len(model: *const ExtdModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.window_len)
}

/// Q-values for a row-major `rows x cols` state, oldest row first, written
/// to `q_out[0..3]` in the order short, flat, long.
#[no_mangle]
pub unsafe extern "C" fn extd_model_forward(
    model: *const ExtdModel,
    state: *const f64,
    rows: usize,
    cols: usize,
    q_out: *mut f64,
) -> ExtdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(null)?.0;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(ExtdStatus::InvalidArgument, "state size overflows"))?;
        let data = slice(state, n)?.to_vec();
        let window = StateWindow::new(rows.saturating_sub(1), rows, cols, data).map_err(lib_err)?;
        let q = forward(&m.params, &window).map_err(lib_err)?;
        slice_mut(q_out, 3)?.copy_from_slice(&q.0);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn extd_model_free(model: *mut ExtdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Backtests a signal baseline (`"buy_and_hold"`, `"macd"` or
/// `"dual_thrust"`, default parameters) over the whole series. `stop_k`
/// of 0 disables the stop-loss.
#[no_mangle]
pub unsafe extern "C" fn extd_baseline_backtest(
    series: *const ExtdSeries,
    strategy: *const c_char,
    cost_rate: f64,
    stop_k: usize,
    out: *mut ExtdMetrics,
) -> ExtdStatus {
    guard(|| {
        let s = &series.as_ref().ok_or_else(null)?.0;
        let name = cstr(strategy)?;
        let signals = match name {
            "buy_and_hold" => buy_and_hold(s),
            "macd" => macd_signals(s, &MacdParams::default()).map_err(lib_err)?,
            "dual_thrust" => dual_thrust_signals(s, &DualThrustParams::default()).map_err(lib_err)?,
            other => return Err(fail(ExtdStatus::InvalidArgument, format!("unknown baseline `{other}`"))),
        };
        let features = compute_features(s, &[]).map_err(lib_err)?;
        let data = Dataset {
            series: s,
            features: &features,
            window_len: 1,
            range: 0..s.len(),
        };
        let env = EnvConfig {
            cost_rate,
            reward_mode: RewardMode::Testing,
            force_flat_at_session_end: true,
        };
        let stop = StopLossParams {
            k: stop_k.max(2),
            enabled: stop_k > 0,
        };
        let report = run_backtest(name, Policy::Signals(&signals), &data, &env, &stop).map_err(lib_err)?;
        *out_ref(out)? = metrics_of(&report.rewards());
        Ok(())
    })
}
