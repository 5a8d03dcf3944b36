//! Q-network: a single LSTM layer over the state window followed by a linear
//! head with one output per action, trained with hand-derived
//! backpropagation through time and Adam.
//!
//! Gate blocks are stacked in the order input, forget, cell, output:
//!
//! ```text
//! z_t = W x_t + U h_{t-1} + b
//! i = sigma(z_i)   f = sigma(z_f)   g = tanh(z_g)   o = sigma(z_o)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! Q   = V h_L + q
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::features::StateWindow;

pub const NUM_ACTIONS: usize = 3;
pub const GATES: usize = 4;

pub const CHECKPOINT_FORMAT: &str = "expert-td-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Action values ordered short, flat, long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValues(pub [f64; NUM_ACTIONS]);

impl QValues {
    pub fn get(&self, a: Action) -> f64 {
        self.0[a.index()]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; ties go to the lowest index (short before flat before
    /// long).
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetParams {
    input_size: usize,
    hidden_size: usize,
    /// `4H x C`, row-major.
    w_input: Vec<f64>,
    /// `4H x H`, row-major.
    w_hidden: Vec<f64>,
    bias: Vec<f64>,
    /// `3 x H`, row-major.
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl QNetParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let g = GATES * hidden_size;
        Self {
            input_size,
            hidden_size,
            w_input: vec![0.0; g * input_size],
            w_hidden: vec![0.0; g * hidden_size],
            bias: vec![0.0; g],
            head_w: vec![0.0; NUM_ACTIONS * hidden_size],
            head_b: vec![0.0; NUM_ACTIONS],
        }
    }

    /// Weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`, forget-gate bias 1,
    /// every other bias 0.
    pub fn init(input_size: usize, hidden_size: usize, seed: u64) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::arg("input and hidden sizes must be at least 1"));
        }
        let mut p = Self::zeros(input_size, hidden_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden_size as f64).sqrt();
        for w in p
            .w_input
            .iter_mut()
            .chain(p.w_hidden.iter_mut())
            .chain(p.head_w.iter_mut())
        {
            *w = rng.random_range(-bound..=bound);
        }
        p.forget_bias_mut().fill(1.0);
        Ok(p)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forget_bias(&self) -> &[f64] {
        let h = self.hidden_size;
        &self.bias[h..2 * h]
    }

    fn forget_bias_mut(&mut self) -> &mut [f64] {
        let h = self.hidden_size;
        &mut self.bias[h..2 * h]
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_b
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        &mut self.head_b
    }

    pub fn w_input_mut(&mut self) -> &mut [f64] {
        &mut self.w_input
    }

    pub fn w_hidden_mut(&mut self) -> &mut [f64] {
        &mut self.w_hidden
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn head_w_mut(&mut self) -> &mut [f64] {
        &mut self.head_w
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.w_input, &self.w_hidden, &self.bias, &self.head_w, &self.head_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.w_input,
            &mut self.w_hidden,
            &mut self.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// All parameters in a fixed order: input weights, recurrent weights,
    /// gate biases, head weights, head bias.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::arg("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size, self.hidden_size)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.input_size == other.input_size && self.hidden_size == other.hidden_size
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shape(&self) -> Result<()> {
        let g = GATES * self.hidden_size;
        let ok = self.w_input.len() == g * self.input_size
            && self.w_hidden.len() == g * self.hidden_size
            && self.bias.len() == g
            && self.head_w.len() == NUM_ACTIONS * self.hidden_size
            && self.head_b.len() == NUM_ACTIONS;
        if ok && self.input_size > 0 && self.hidden_size > 0 {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter shapes are inconsistent".into()))
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: Vec<StepCache>,
    h_last: Vec<f64>,
    q: QValues,
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations `[i | f | g | o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl ForwardCache {
    pub fn q(&self) -> QValues {
        self.q
    }
}

fn check_state(params: &QNetParams, state: &StateWindow) -> Result<()> {
    if state.cols() != params.input_size {
        return Err(Error::arg(format!(
            "state has {} columns, network expects {}",
            state.cols(),
            params.input_size
        )));
    }
    Ok(())
}

pub fn forward(params: &QNetParams, state: &StateWindow) -> Result<QValues> {
    Ok(forward_cached(params, state)?.q)
}

pub fn forward_cached(params: &QNetParams, state: &StateWindow) -> Result<ForwardCache> {
    check_state(params, state)?;
    let (c_in, h) = (params.input_size, params.hidden_size);
    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut steps = Vec::with_capacity(state.len());
    let mut z = vec![0.0; GATES * h];
    for s in 0..state.len() {
        let x = state.row(s);
        for (r, zr) in z.iter_mut().enumerate() {
            let wx = &params.w_input[r * c_in..(r + 1) * c_in];
            let wh = &params.w_hidden[r * h..(r + 1) * h];
            let mut acc = params.bias[r];
            acc += wx.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            acc += wh.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>();
            *zr = acc;
        }
        let mut gates = vec![0.0; GATES * h];
        for j in 0..h {
            gates[j] = sigmoid(z[j]);
            gates[h + j] = sigmoid(z[h + j]);
            gates[2 * h + j] = z[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        let mut new_cell = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut new_hidden = vec![0.0; h];
        for j in 0..h {
            new_cell[j] = gates[h + j] * cell[j] + gates[j] * gates[2 * h + j];
            tanh_c[j] = new_cell[j].tanh();
            new_hidden[j] = gates[3 * h + j] * tanh_c[j];
        }
        steps.push(StepCache {
            h_prev: std::mem::replace(&mut hidden, new_hidden),
            c_prev: std::mem::replace(&mut cell, new_cell),
            gates,
            tanh_c,
        });
    }
    let mut q = [0.0; NUM_ACTIONS];
    for (a, qa) in q.iter_mut().enumerate() {
        let w = &params.head_w[a * h..(a + 1) * h];
        *qa = params.head_b[a] + w.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>();
    }
    Ok(ForwardCache {
        steps,
        h_last: hidden,
        q: QValues(q),
    })
}

/// Accumulates into `grads` the gradient of `sum_a dq[a] * Q(s, a)` with
/// respect to every parameter.
pub fn backward(
    params: &QNetParams,
    state: &StateWindow,
    cache: &ForwardCache,
    dq: &[f64; NUM_ACTIONS],
    grads: &mut QNetParams,
) {
    let (c_in, h) = (params.input_size, params.hidden_size);
    let mut dh = vec![0.0; h];
    for a in 0..NUM_ACTIONS {
        if dq[a] == 0.0 {
            continue;
        }
        grads.head_b[a] += dq[a];
        for j in 0..h {
            grads.head_w[a * h + j] += dq[a] * cache.h_last[j];
            dh[j] += dq[a] * params.head_w[a * h + j];
        }
    }
    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; GATES * h];
    for s in (0..cache.steps.len()).rev() {
        let st = &cache.steps[s];
        let x = state.row(s);
        let g = &st.gates;
        for j in 0..h {
            let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = st.tanh_c[j];
            let d_o = dh[j] * tc;
            let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
            dz[j] = dcj * gg * i * (1.0 - i);
            dz[h + j] = dcj * st.c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dcj * i * (1.0 - gg * gg);
            dz[3 * h + j] = d_o * o * (1.0 - o);
            dc[j] = dcj * f;
        }
        dh.fill(0.0);
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr == 0.0 {
                continue;
            }
            grads.bias[r] += dzr;
            let gx = &mut grads.w_input[r * c_in..(r + 1) * c_in];
            gx.iter_mut().zip(x).for_each(|(g, v)| *g += dzr * v);
            let gh = &mut grads.w_hidden[r * h..(r + 1) * h];
            gh.iter_mut().zip(&st.h_prev).for_each(|(g, v)| *g += dzr * v);
            let wh = &params.w_hidden[r * h..(r + 1) * h];
            dh.iter_mut().zip(wh).for_each(|(d, w)| *d += dzr * w);
        }
    }
}

/// One regression sample: push `Q(state, action)` towards `target`.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub state: &'a StateWindow,
    pub action: Action,
    pub target: f64,
}

/// Mean squared error over the batch and its gradient. Targets are
/// constants.
pub fn gradient(params: &QNetParams, batch: &[RegressionSample<'_>]) -> Result<(f64, QNetParams)> {
    if batch.is_empty() {
        return Err(Error::arg("gradient of an empty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for sample in batch {
        let cache = forward_cached(params, sample.state)?;
        let err = cache.q.get(sample.action) - sample.target;
        loss += err * err;
        let mut dq = [0.0; NUM_ACTIONS];
        dq[sample.action.index()] = 2.0 * err / n;
        backward(params, sample.state, &cache, &dq, &mut grads);
    }
    Ok((loss / n, grads))
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm(grads: &mut QNetParams, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &QNetParams, learning_rate: f64) -> Self {
        let n = params.param_count();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut QNetParams, grads: &QNetParams, opt: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grads) || opt.first_moment.len() != params.param_count() {
        return Err(Error::arg("optimizer, parameter and gradient shapes differ"));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut k = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (w, &gi) in p.iter_mut().zip(g) {
            let m = &mut opt.first_moment[k];
            let v = &mut opt.second_moment[k];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * gi;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon);
            k += 1;
        }
    }
    Ok(())
}

/// On-disk model: JSON carrying shape metadata, the state window length the
/// network was trained with, and the feature column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub window_len: usize,
    pub columns: Vec<String>,
    pub params: QNetParams,
}

impl Checkpoint {
    pub fn new(params: QNetParams, window_len: usize, columns: Vec<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            window_len,
            columns,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.params.check_shape()?;
        if !ck.params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        if ck.columns.len() != ck.params.input_size || ck.window_len == 0 {
            return Err(Error::Checkpoint("column list or window length inconsistent".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
