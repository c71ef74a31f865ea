//! The landmark regression network: three 1-D convolutions over the
//! window's time axis (feature channels 26 -> 32 -> 64 -> 64), each with
//! batch normalization and GELU, a bidirectional LSTM, additive
//! attention over the timesteps, and a dense head emitting 12 values
//! (four slots of center x, center y, radius).
//!
//! Everything is f64 with hand-written reverse-mode gradients; the GELU
//! uses the tanh form with its exact derivative so finite-difference
//! checks hold at machine precision.

use rayon::prelude::*;

use super::input::{DetectorInput, DETECTOR_INPUT_DIM};
use super::tensor::Tensor;
use crate::{Error, Result};

const KERNEL: usize = 3;
const BN_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

/// Architecture sizes. Defaults are the production constants; tests use
/// smaller ones for exhaustive gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub conv_channels: [usize; 3],
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    /// Window length T.
    pub window: usize,
    pub output_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: DETECTOR_INPUT_DIM,
            conv_channels: [32, 64, 64],
            lstm_hidden: 64,
            attention_dim: 64,
            window: 5,
            output_dim: 12,
        }
    }
}

impl NetworkConfig {
    /// Scaled-down variant for gradient-check tests.
    pub fn tiny() -> Self {
        Self {
            input_dim: DETECTOR_INPUT_DIM,
            conv_channels: [6, 8, 8],
            lstm_hidden: 4,
            attention_dim: 5,
            window: 3,
            output_dim: 12,
        }
    }
}

/// All parameters plus the frozen preprocessing constants.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    /// Per-feature standardization of the raw input (non-trainable).
    pub input_mean: Tensor,
    pub input_std: Tensor,
    /// Affine de-standardization of the 12 outputs (non-trainable):
    /// out = raw * output_std + output_mean.
    pub output_mean: Tensor,
    pub output_std: Tensor,
    pub conv_w: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub bn_gamma: [Tensor; 3],
    pub bn_beta: [Tensor; 3],
    pub bn_running_mean: [Tensor; 3],
    pub bn_running_var: [Tensor; 3],
    pub lstm_w_ih: [Tensor; 2],
    pub lstm_w_hh: [Tensor; 2],
    pub lstm_b: [Tensor; 2],
    pub attn_w: Tensor,
    pub attn_b: Tensor,
    pub attn_v: Tensor,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

/// Names and shapes of the trainable tensors, in optimizer order.
pub const TRAINABLE_NAMES: [&str; 23] = [
    "conv1.w", "conv1.b", "bn1.gamma", "bn1.beta", "conv2.w", "conv2.b", "bn2.gamma", "bn2.beta",
    "conv3.w", "conv3.b", "bn3.gamma", "bn3.beta", "lstm_fw.w_ih", "lstm_fw.w_hh", "lstm_fw.b",
    "lstm_bw.w_ih", "lstm_bw.w_hh", "lstm_bw.b", "attn.w", "attn.b", "attn.v", "dense.w",
    "dense.b",
];

impl NetworkParams {
    /// All tensors zero; standardization and running variance set to one
    /// so the forward pass stays defined.
    pub fn zeros(config: NetworkConfig) -> Self {
        let c = &config.conv_channels;
        let d = config.input_dim;
        let h = config.lstm_hidden;
        let a = config.attention_dim;
        let mut input_std = Tensor::zeros(&[d]);
        input_std.data.fill(1.0);
        let mut output_std = Tensor::zeros(&[config.output_dim]);
        output_std.data.fill(1.0);
        let bn_running_var = [
            filled(&[c[0]], 1.0),
            filled(&[c[1]], 1.0),
            filled(&[c[2]], 1.0),
        ];
        Self {
            config,
            input_mean: Tensor::zeros(&[d]),
            input_std,
            output_mean: Tensor::zeros(&[config.output_dim]),
            output_std,
            conv_w: [
                Tensor::zeros(&[c[0], d, KERNEL]),
                Tensor::zeros(&[c[1], c[0], KERNEL]),
                Tensor::zeros(&[c[2], c[1], KERNEL]),
            ],
            conv_b: [
                Tensor::zeros(&[c[0]]),
                Tensor::zeros(&[c[1]]),
                Tensor::zeros(&[c[2]]),
            ],
            bn_gamma: [
                Tensor::zeros(&[c[0]]),
                Tensor::zeros(&[c[1]]),
                Tensor::zeros(&[c[2]]),
            ],
            bn_beta: [
                Tensor::zeros(&[c[0]]),
                Tensor::zeros(&[c[1]]),
                Tensor::zeros(&[c[2]]),
            ],
            bn_running_mean: [
                Tensor::zeros(&[c[0]]),
                Tensor::zeros(&[c[1]]),
                Tensor::zeros(&[c[2]]),
            ],
            bn_running_var,
            lstm_w_ih: [
                Tensor::zeros(&[4 * h, c[2]]),
                Tensor::zeros(&[4 * h, c[2]]),
            ],
            lstm_w_hh: [Tensor::zeros(&[4 * h, h]), Tensor::zeros(&[4 * h, h])],
            lstm_b: [Tensor::zeros(&[4 * h]), Tensor::zeros(&[4 * h])],
            attn_w: Tensor::zeros(&[a, 2 * h]),
            attn_b: Tensor::zeros(&[a]),
            attn_v: Tensor::zeros(&[a]),
            dense_w: Tensor::zeros(&[config.output_dim, 2 * h]),
            dense_b: Tensor::zeros(&[config.output_dim]),
        }
    }

    /// Xavier-uniform initialization, deterministic in the seed. Gammas
    /// start at one, biases at zero.
    pub fn xavier(config: NetworkConfig, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(config);
        for g in &mut params.bn_gamma {
            g.data.fill(1.0);
        }
        let mut init = |t: &mut Tensor, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.gen_range(-limit..limit);
            }
        };
        let c = &config.conv_channels;
        let d = config.input_dim;
        let h = config.lstm_hidden;
        let a = config.attention_dim;
        init(&mut params.conv_w[0], d * KERNEL, c[0] * KERNEL);
        init(&mut params.conv_w[1], c[0] * KERNEL, c[1] * KERNEL);
        init(&mut params.conv_w[2], c[1] * KERNEL, c[2] * KERNEL);
        for dir in 0..2 {
            init(&mut params.lstm_w_ih[dir], c[2], 4 * h);
            init(&mut params.lstm_w_hh[dir], h, 4 * h);
        }
        init(&mut params.attn_w, 2 * h, a);
        init(&mut params.attn_v, a, 1);
        init(&mut params.dense_w, 2 * h, config.output_dim);
        params
    }

    /// Trainable tensors in the canonical order of [`TRAINABLE_NAMES`].
    pub fn trainable(&self) -> Vec<&Tensor> {
        vec![
            &self.conv_w[0], &self.conv_b[0], &self.bn_gamma[0], &self.bn_beta[0],
            &self.conv_w[1], &self.conv_b[1], &self.bn_gamma[1], &self.bn_beta[1],
            &self.conv_w[2], &self.conv_b[2], &self.bn_gamma[2], &self.bn_beta[2],
            &self.lstm_w_ih[0], &self.lstm_w_hh[0], &self.lstm_b[0],
            &self.lstm_w_ih[1], &self.lstm_w_hh[1], &self.lstm_b[1],
            &self.attn_w, &self.attn_b, &self.attn_v,
            &self.dense_w, &self.dense_b,
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let [cw0, cw1, cw2] = &mut self.conv_w;
        let [cb0, cb1, cb2] = &mut self.conv_b;
        let [g0, g1, g2] = &mut self.bn_gamma;
        let [be0, be1, be2] = &mut self.bn_beta;
        let [wih0, wih1] = &mut self.lstm_w_ih;
        let [whh0, whh1] = &mut self.lstm_w_hh;
        let [lb0, lb1] = &mut self.lstm_b;
        vec![
            cw0, cb0, g0, be0, cw1, cb1, g1, be1, cw2, cb2, g2, be2,
            wih0, whh0, lb0, wih1, whh1, lb1,
            &mut self.attn_w, &mut self.attn_b, &mut self.attn_v,
            &mut self.dense_w, &mut self.dense_b,
        ]
    }
}

fn filled(dims: &[usize], value: f64) -> Tensor {
    let mut t = Tensor::zeros(dims);
    t.data.fill(value);
    t
}

/// Gradients for every trainable tensor, in canonical order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    fn zeros_like(params: &NetworkParams) -> Self {
        Gradients(params.trainable().iter().map(|t| Tensor::zeros(&t.dims)).collect())
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-sample activations cached by the forward pass.
#[derive(Debug, Clone, Default)]
struct SampleCache {
    xs: Vec<Vec<f64>>,          // [T][D] standardized input
    pre: [Vec<Vec<f64>>; 3],    // conv outputs, pre-BN
    xhat: [Vec<Vec<f64>>; 3],   // BN-normalized
    post: [Vec<Vec<f64>>; 3],   // after GELU
    gates: [Vec<Vec<f64>>; 2],  // [T][4H] gate activations per direction
    cells: [Vec<Vec<f64>>; 2],  // [T][H]
    hidden: [Vec<Vec<f64>>; 2], // [T][H]
    fcat: Vec<Vec<f64>>,        // [T][2H]
    s_attn: Vec<Vec<f64>>,      // [T][A] tanh(u_t)
    alpha: Vec<f64>,            // [T]
    ctx: Vec<f64>,              // [2H]
    output: Vec<f64>,           // [12]
}

/// Batch-statistics used by one BN layer in training mode.
#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn validate_window(params: &NetworkParams, window: &[DetectorInput]) -> Result<()> {
    if window.len() != params.config.window {
        return Err(Error::ShapeMismatch {
            layer: "input".into(),
            detail: format!(
                "window length {} != configured T {}",
                window.len(),
                params.config.window
            ),
        });
    }
    Ok(())
}

/// Same-padded conv along the time axis: out[t][o] = b[o] + sum_k sum_i
/// w[o][i][k] in[t+k-1][i].
fn conv_forward(w: &Tensor, b: &Tensor, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_len = input.len();
    let (c_out, c_in) = (w.dims[0], w.dims[1]);
    let mut out = vec![vec![0.0; c_out]; t_len];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = b.data[o];
            for k in 0..KERNEL {
                let tt = t as isize + k as isize - 1;
                if tt < 0 || tt >= t_len as isize {
                    continue;
                }
                let row = &input[tt as usize];
                for i in 0..c_in {
                    acc += w.at3(o, i, k) * row[i];
                }
            }
            out[t][o] = acc;
        }
    }
    out
}

/// Gradient of [`conv_forward`] w.r.t. weights, bias, and input.
fn conv_backward(
    w: &Tensor,
    input: &[Vec<f64>],
    d_out: &[Vec<f64>],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<Vec<f64>> {
    let t_len = input.len();
    let (c_out, c_in) = (w.dims[0], w.dims[1]);
    let mut d_in = vec![vec![0.0; c_in]; t_len];
    for t in 0..t_len {
        for o in 0..c_out {
            let g = d_out[t][o];
            if g == 0.0 {
                continue;
            }
            db.data[o] += g;
            for k in 0..KERNEL {
                let tt = t as isize + k as isize - 1;
                if tt < 0 || tt >= t_len as isize {
                    continue;
                }
                let row = &input[tt as usize];
                let drow = &mut d_in[tt as usize];
                for i in 0..c_in {
                    *dw.at3_mut(o, i, k) += g * row[i];
                    drow[i] += g * w.at3(o, i, k);
                }
            }
        }
    }
    d_in
}

/// One LSTM direction over the full window; fills gate/cell/hidden caches.
fn lstm_forward(
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
    inputs: &[Vec<f64>],
    reverse: bool,
    gates: &mut Vec<Vec<f64>>,
    cells: &mut Vec<Vec<f64>>,
    hidden: &mut Vec<Vec<f64>>,
) {
    let t_len = inputs.len();
    let h = w_hh.dims[1];
    *gates = vec![vec![0.0; 4 * h]; t_len];
    *cells = vec![vec![0.0; h]; t_len];
    *hidden = vec![vec![0.0; h]; t_len];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for &t in &order {
        let mut a = b.data.clone();
        let ih = w_ih.matvec(&inputs[t]);
        let hh = w_hh.matvec(&h_prev);
        for j in 0..4 * h {
            a[j] += ih[j] + hh[j];
        }
        let g = &mut gates[t];
        for j in 0..h {
            g[j] = sigmoid(a[j]); // input gate
            g[h + j] = sigmoid(a[h + j]); // forget gate
            g[2 * h + j] = a[2 * h + j].tanh(); // candidate
            g[3 * h + j] = sigmoid(a[3 * h + j]); // output gate
        }
        for j in 0..h {
            cells[t][j] = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
            hidden[t][j] = g[3 * h + j] * cells[t][j].tanh();
        }
        h_prev = hidden[t].clone();
        c_prev = cells[t].clone();
    }
}

/// BPTT through one direction. `d_hidden` holds dL/dh_t from above.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    w_ih: &Tensor,
    w_hh: &Tensor,
    inputs: &[Vec<f64>],
    gates: &[Vec<f64>],
    cells: &[Vec<f64>],
    hidden: &[Vec<f64>],
    d_hidden: &[Vec<f64>],
    reverse: bool,
    dw_ih: &mut Tensor,
    dw_hh: &mut Tensor,
    db: &mut Tensor,
) -> Vec<Vec<f64>> {
    let t_len = inputs.len();
    let h = w_hh.dims[1];
    let mut d_inputs = vec![vec![0.0; w_ih.dims[1]]; t_len];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    // Walk in reverse topological order of the recurrence.
    let order: Vec<usize> = if reverse {
        (0..t_len).collect()
    } else {
        (0..t_len).rev().collect()
    };
    for (step, &t) in order.iter().enumerate() {
        let is_last_step = step + 1 == order.len();
        let (h_prev, c_prev) = if is_last_step {
            (vec![0.0; h], vec![0.0; h])
        } else {
            let tp = order[step + 1];
            (hidden[tp].clone(), cells[tp].clone())
        };
        let g = &gates[t];
        let mut da = vec![0.0; 4 * h];
        for j in 0..h {
            let dh = d_hidden[t][j] + dh_next[j];
            let tc = cells[t][j].tanh();
            let o = g[3 * h + j];
            let d_o = dh * tc;
            let mut dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            let i = g[j];
            let f = g[h + j];
            let cand = g[2 * h + j];
            let d_i = dc * cand;
            let d_f = dc * c_prev[j];
            let d_cand = dc * i;
            dc *= f;
            dc_next[j] = dc;
            da[j] = d_i * i * (1.0 - i);
            da[h + j] = d_f * f * (1.0 - f);
            da[2 * h + j] = d_cand * (1.0 - cand * cand);
            da[3 * h + j] = d_o * o * (1.0 - o);
        }
        // Accumulate parameter gradients and propagate to inputs/previous h.
        for j in 0..4 * h {
            let daj = da[j];
            if daj == 0.0 {
                continue;
            }
            db.data[j] += daj;
            let x = &inputs[t];
            for (i, xv) in x.iter().enumerate() {
                *dw_ih.at2_mut(j, i) += daj * xv;
            }
            for (i, hv) in h_prev.iter().enumerate() {
                *dw_hh.at2_mut(j, i) += daj * hv;
            }
        }
        let dx = w_ih.matvec_t(&da);
        for (i, v) in dx.into_iter().enumerate() {
            d_inputs[t][i] += v;
        }
        dh_next = w_hh.matvec_t(&da);
    }
    d_inputs
}

/// Forward through conv stack stage `l` up to the pre-BN activations.
fn stage_pre(params: &NetworkParams, cache: &mut SampleCache, layer: usize) {
    let input: &[Vec<f64>] = match layer {
        0 => &cache.xs,
        l => &cache.post[l - 1],
    };
    cache.pre[layer] = conv_forward(&params.conv_w[layer], &params.conv_b[layer], input);
}

/// Apply BN (with the given stats) and GELU for stage `l`.
fn stage_post(params: &NetworkParams, cache: &mut SampleCache, layer: usize, stats: &BnStats) {
    let t_len = cache.pre[layer].len();
    let ch = params.conv_w[layer].dims[0];
    let gamma = &params.bn_gamma[layer];
    let beta = &params.bn_beta[layer];
    cache.xhat[layer] = vec![vec![0.0; ch]; t_len];
    cache.post[layer] = vec![vec![0.0; ch]; t_len];
    for t in 0..t_len {
        for c in 0..ch {
            let xh = (cache.pre[layer][t][c] - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt();
            cache.xhat[layer][t][c] = xh;
            cache.post[layer][t][c] = gelu(gamma.data[c] * xh + beta.data[c]);
        }
    }
}

/// LSTM + attention + dense head.
fn stage_head(params: &NetworkParams, cache: &mut SampleCache) {
    let h = params.config.lstm_hidden;
    let t_len = cache.post[2].len();
    let (g0, c0, h0) = (&mut cache.gates[0], &mut cache.cells[0], &mut cache.hidden[0]);
    lstm_forward(&params.lstm_w_ih[0], &params.lstm_w_hh[0], &params.lstm_b[0], &cache.post[2], false, g0, c0, h0);
    let (g1, c1, h1) = (&mut cache.gates[1], &mut cache.cells[1], &mut cache.hidden[1]);
    lstm_forward(&params.lstm_w_ih[1], &params.lstm_w_hh[1], &params.lstm_b[1], &cache.post[2], true, g1, c1, h1);

    cache.fcat = (0..t_len)
        .map(|t| {
            let mut f = Vec::with_capacity(2 * h);
            f.extend_from_slice(&cache.hidden[0][t]);
            f.extend_from_slice(&cache.hidden[1][t]);
            f
        })
        .collect();

    // Additive attention over timesteps.
    let mut scores = Vec::with_capacity(t_len);
    cache.s_attn = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut u = params.attn_w.matvec(&cache.fcat[t]);
        for (j, b) in u.iter_mut().zip(&params.attn_b.data) {
            *j += b;
        }
        let s: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        let e: f64 = s.iter().zip(&params.attn_v.data).map(|(a, b)| a * b).sum();
        scores.push(e);
        cache.s_attn.push(s);
    }
    let max_e = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|e| (e - max_e).exp()).collect();
    let sum: f64 = exps.iter().sum();
    cache.alpha = exps.iter().map(|e| e / sum).collect();

    cache.ctx = vec![0.0; 2 * h];
    for t in 0..t_len {
        for j in 0..2 * h {
            cache.ctx[j] += cache.alpha[t] * cache.fcat[t][j];
        }
    }
    let mut out = params.dense_w.matvec(&cache.ctx);
    for (o, b) in out.iter_mut().zip(&params.dense_b.data) {
        *o += b;
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = *o * params.output_std.data[j] + params.output_mean.data[j];
    }
    cache.output = out;
}

fn standardize(params: &NetworkParams, window: &[DetectorInput]) -> Vec<Vec<f64>> {
    window
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - params.input_mean.data[i]) / params.input_std.data[i].max(1e-9))
                .collect()
        })
        .collect()
}

fn batch_stats(samples: &[SampleCache], layer: usize, ch: usize) -> BnStats {
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    let mut count = 0usize;
    for s in samples {
        for row in &s.pre[layer] {
            for c in 0..ch {
                mean[c] += row[c];
            }
        }
        count += s.pre[layer].len();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for s in samples {
        for row in &s.pre[layer] {
            for c in 0..ch {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count as f64; // biased, matching normalization use
    }
    BnStats { mean, var }
}

fn running_stats(params: &NetworkParams, layer: usize) -> BnStats {
    BnStats {
        mean: params.bn_running_mean[layer].data.clone(),
        var: params.bn_running_var[layer].data.clone(),
    }
}

/// Batch forward. In training mode BN uses batch statistics (returned so
/// the caller can update running stats); in inference mode it uses the
/// frozen running statistics, making the pass independent of batch
/// composition.
fn batch_forward(
    params: &NetworkParams,
    windows: &[&[DetectorInput]],
    training: bool,
) -> Result<(Vec<SampleCache>, [BnStats; 3])> {
    for w in windows {
        validate_window(params, w)?;
    }
    let mut samples: Vec<SampleCache> = windows
        .par_iter()
        .map(|w| {
            let mut c = SampleCache {
                xs: standardize(params, w),
                ..SampleCache::default()
            };
            stage_pre(params, &mut c, 0);
            c
        })
        .collect();

    let mut stats: Vec<BnStats> = Vec::with_capacity(3);
    for layer in 0..3 {
        let ch = params.conv_w[layer].dims[0];
        let st = if training {
            batch_stats(&samples, layer, ch)
        } else {
            running_stats(params, layer)
        };
        samples.par_iter_mut().for_each(|c| {
            stage_post(params, c, layer, &st);
            if layer < 2 {
                stage_pre(params, c, layer + 1);
            } else {
                stage_head(params, c);
            }
        });
        stats.push(st);
    }
    let stats: [BnStats; 3] = stats.try_into().expect("three BN layers");
    Ok((samples, stats))
}

/// Inference forward: 12 outputs for one window (frozen BN statistics).
pub fn forward(params: &NetworkParams, window: &[DetectorInput]) -> Result<Vec<f64>> {
    let (samples, _) = batch_forward(params, &[window], false)?;
    Ok(samples.into_iter().next().unwrap().output)
}

/// Masked MSE over the 12 outputs: slots whose target radius is the
/// sentinel contribute neither loss nor gradient. Loss is averaged over
/// the unmasked components of the whole batch.
pub fn masked_mse(outputs: &[Vec<f64>], targets: &[[f64; 12]]) -> (f64, Vec<Vec<f64>>, usize) {
    let mut count = 0usize;
    let mut loss = 0.0;
    let mut d_out: Vec<Vec<f64>> = Vec::with_capacity(outputs.len());
    for (out, tgt) in outputs.iter().zip(targets) {
        let mut d = vec![0.0; out.len()];
        for slot in 0..4 {
            if tgt[slot * 3 + 2] < 0.0 {
                continue; // sentinel slot
            }
            for j in slot * 3..slot * 3 + 3 {
                let e = out[j] - tgt[j];
                loss += e * e;
                d[j] = 2.0 * e;
                count += 1;
            }
        }
        d_out.push(d);
    }
    if count > 0 {
        loss /= count as f64;
        for d in &mut d_out {
            for v in d.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    (loss, d_out, count)
}

/// Per-sample backward stages between BN boundaries.
struct SampleGrad {
    grads: Gradients,
    /// Gradient flowing into the current BN layer's output (gamma*xhat+beta).
    d_bn_out: Vec<Vec<f64>>,
}

fn head_backward(params: &NetworkParams, cache: &SampleCache, d_output: &[f64]) -> SampleGrad {
    // Chain through the fixed output affine first.
    let d_output: Vec<f64> = d_output
        .iter()
        .enumerate()
        .map(|(j, d)| d * params.output_std.data[j])
        .collect();
    let d_output = &d_output[..];
    let h = params.config.lstm_hidden;
    let a_dim = params.config.attention_dim;
    let t_len = cache.fcat.len();
    let mut grads = Gradients::zeros_like(params);

    // dense: out = W ctx + b
    for o in 0..d_output.len() {
        grads.0[22].data[o] += d_output[o];
        for j in 0..2 * h {
            *grads.0[21].at2_mut(o, j) += d_output[o] * cache.ctx[j];
        }
    }
    let mut d_ctx = params.dense_w.matvec_t(d_output);

    // attention
    let mut d_fcat = vec![vec![0.0; 2 * h]; t_len];
    let mut d_alpha = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..2 * h {
            d_alpha[t] += cache.fcat[t][j] * d_ctx[j];
            d_fcat[t][j] += cache.alpha[t] * d_ctx[j];
        }
    }
    let dot: f64 = (0..t_len).map(|t| cache.alpha[t] * d_alpha[t]).sum();
    let d_e: Vec<f64> = (0..t_len)
        .map(|t| cache.alpha[t] * (d_alpha[t] - dot))
        .collect();
    for t in 0..t_len {
        let s = &cache.s_attn[t];
        let de = d_e[t];
        // e_t = v . s_t
        for j in 0..a_dim {
            grads.0[20].data[j] += de * s[j];
        }
        let du: Vec<f64> = (0..a_dim)
            .map(|j| de * params.attn_v.data[j] * (1.0 - s[j] * s[j]))
            .collect();
        for j in 0..a_dim {
            grads.0[19].data[j] += du[j];
            for k in 0..2 * h {
                *grads.0[18].at2_mut(j, k) += du[j] * cache.fcat[t][k];
            }
        }
        let dxf = params.attn_w.matvec_t(&du);
        for k in 0..2 * h {
            d_fcat[t][k] += dxf[k];
        }
    }
    d_ctx.clear();

    // Split fcat gradient into the two directions and run BPTT.
    let d_h_fw: Vec<Vec<f64>> = d_fcat.iter().map(|r| r[..h].to_vec()).collect();
    let d_h_bw: Vec<Vec<f64>> = d_fcat.iter().map(|r| r[h..].to_vec()).collect();
    let mut d_lstm_in = {
        let (wih, whh) = (&params.lstm_w_ih[0], &params.lstm_w_hh[0]);
        let (g12, g13, g14) = (12, 13, 14);
        let mut dw_ih = Tensor::zeros(&wih.dims);
        let mut dw_hh = Tensor::zeros(&whh.dims);
        let mut db = Tensor::zeros(&params.lstm_b[0].dims);
        let d_in = lstm_backward(
            wih, whh, &cache.post[2], &cache.gates[0], &cache.cells[0], &cache.hidden[0],
            &d_h_fw, false, &mut dw_ih, &mut dw_hh, &mut db,
        );
        grads.0[g12] = dw_ih;
        grads.0[g13] = dw_hh;
        grads.0[g14] = db;
        d_in
    };
    {
        let (wih, whh) = (&params.lstm_w_ih[1], &params.lstm_w_hh[1]);
        let mut dw_ih = Tensor::zeros(&wih.dims);
        let mut dw_hh = Tensor::zeros(&whh.dims);
        let mut db = Tensor::zeros(&params.lstm_b[1].dims);
        let d_in = lstm_backward(
            wih, whh, &cache.post[2], &cache.gates[1], &cache.cells[1], &cache.hidden[1],
            &d_h_bw, true, &mut dw_ih, &mut dw_hh, &mut db,
        );
        grads.0[15] = dw_ih;
        grads.0[16] = dw_hh;
        grads.0[17] = db;
        for (a, b) in d_lstm_in.iter_mut().zip(d_in) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    // Through GELU of stage 3 into the BN output.
    let gamma = &params.bn_gamma[2];
    let beta = &params.bn_beta[2];
    let d_bn_out: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            (0..gamma.len())
                .map(|c| {
                    let y = gamma.data[c] * cache.xhat[2][t][c] + beta.data[c];
                    d_lstm_in[t][c] * gelu_deriv(y)
                })
                .collect()
        })
        .collect();

    SampleGrad { grads, d_bn_out }
}

/// BN backward across the batch for one layer, then conv backward (and
/// GELU of the previous stage) per sample, returning the gradient at the
/// previous BN output (empty for layer 0).
fn bn_and_conv_backward(
    params: &NetworkParams,
    samples: &[SampleCache],
    stats: &BnStats,
    layer: usize,
    per_sample: &mut [SampleGrad],
) {
    let ch = params.conv_w[layer].dims[0];
    let gamma = &params.bn_gamma[layer];
    let m: usize = samples.iter().map(|s| s.pre[layer].len()).sum();

    // Channel sums of dy and dy * xhat across the whole batch.
    let mut sum_dy = vec![0.0; ch];
    let mut sum_dy_xhat = vec![0.0; ch];
    for (s, g) in samples.iter().zip(per_sample.iter()) {
        for (t, row) in g.d_bn_out.iter().enumerate() {
            for c in 0..ch {
                sum_dy[c] += row[c];
                sum_dy_xhat[c] += row[c] * s.xhat[layer][t][c];
            }
        }
    }

    let gamma_idx = 4 * layer + 2;
    let beta_idx = 4 * layer + 3;
    let w_idx = 4 * layer;
    let b_idx = 4 * layer + 1;

    per_sample
        .par_iter_mut()
        .zip(samples.par_iter())
        .for_each(|(g, s)| {
            let t_len = s.pre[layer].len();
            // Parameter gradients for gamma/beta from this sample's share.
            for t in 0..t_len {
                for c in 0..ch {
                    g.grads.0[gamma_idx].data[c] += g.d_bn_out[t][c] * s.xhat[layer][t][c];
                    g.grads.0[beta_idx].data[c] += g.d_bn_out[t][c];
                }
            }
            // dx through the normalization (training mode).
            let mut d_pre = vec![vec![0.0; ch]; t_len];
            for t in 0..t_len {
                for c in 0..ch {
                    let inv_std = 1.0 / (stats.var[c] + BN_EPS).sqrt();
                    let dy = g.d_bn_out[t][c];
                    d_pre[t][c] = gamma.data[c]
                        * inv_std
                        * (dy - sum_dy[c] / m as f64
                            - s.xhat[layer][t][c] * sum_dy_xhat[c] / m as f64);
                }
            }
            // Conv backward into the previous stage.
            let input: &[Vec<f64>] = if layer == 0 { &s.xs } else { &s.post[layer - 1] };
            let mut dw = Tensor::zeros(&params.conv_w[layer].dims);
            let mut db = Tensor::zeros(&params.conv_b[layer].dims);
            let d_in = conv_backward(&params.conv_w[layer], input, &d_pre, &mut dw, &mut db);
            for (a, b) in g.grads.0[w_idx].data.iter_mut().zip(&dw.data) {
                *a += b;
            }
            for (a, b) in g.grads.0[b_idx].data.iter_mut().zip(&db.data) {
                *a += b;
            }

            if layer > 0 {
                // Continue through the previous GELU into its BN output.
                let prev = layer - 1;
                let pg = &params.bn_gamma[prev];
                let pb = &params.bn_beta[prev];
                g.d_bn_out = d_in
                    .iter()
                    .enumerate()
                    .map(|(t, row)| {
                        (0..pg.len())
                            .map(|c| {
                                let y = pg.data[c] * s.xhat[prev][t][c] + pb.data[c];
                                row[c] * gelu_deriv(y)
                            })
                            .collect()
                    })
                    .collect();
            } else {
                g.d_bn_out.clear();
            }
        });
}

/// Batch statistics observed during one training step, used to advance
/// the running statistics.
#[derive(Debug, Clone)]
pub struct BatchStatsUpdate {
    means: [Vec<f64>; 3],
    vars: [Vec<f64>; 3],
}

/// Fold one batch's statistics into the frozen running statistics.
pub fn apply_running_stats(params: &mut NetworkParams, update: &BatchStatsUpdate) {
    for layer in 0..3 {
        let n = params.bn_running_mean[layer].len();
        for c in 0..n {
            params.bn_running_mean[layer].data[c] = (1.0 - RUNNING_MOMENTUM)
                * params.bn_running_mean[layer].data[c]
                + RUNNING_MOMENTUM * update.means[layer][c];
            params.bn_running_var[layer].data[c] = (1.0 - RUNNING_MOMENTUM)
                * params.bn_running_var[layer].data[c]
                + RUNNING_MOMENTUM * update.vars[layer][c];
        }
    }
}

/// Training-mode loss and exact gradients over a mini-batch. Also
/// returns the batch statistics so the trainer can update running stats.
pub fn loss_and_gradients(
    params: &NetworkParams,
    windows: &[&[DetectorInput]],
    targets: &[[f64; 12]],
) -> Result<(f64, Gradients, BatchStatsUpdate)> {
    let (samples, stats) = batch_forward(params, windows, true)?;
    let outputs: Vec<Vec<f64>> = samples.iter().map(|s| s.output.clone()).collect();
    let (loss, d_out, _) = masked_mse(&outputs, targets);

    let mut per_sample: Vec<SampleGrad> = samples
        .par_iter()
        .zip(d_out.par_iter())
        .map(|(s, d)| head_backward(params, s, d))
        .collect();
    for layer in (0..3).rev() {
        bn_and_conv_backward(params, &samples, &stats[layer], layer, &mut per_sample);
    }

    let mut total = Gradients::zeros_like(params);
    for g in &per_sample {
        total.add_assign(&g.grads);
    }
    let update = BatchStatsUpdate {
        means: [
            stats[0].mean.clone(),
            stats[1].mean.clone(),
            stats[2].mean.clone(),
        ],
        vars: [
            stats[0].var.clone(),
            stats[1].var.clone(),
            stats[2].var.clone(),
        ],
    };
    Ok((loss, total, update))
}

/// Training-mode loss only (used by finite-difference checks).
pub fn loss_only(
    params: &NetworkParams,
    windows: &[&[DetectorInput]],
    targets: &[[f64; 12]],
) -> Result<f64> {
    let (samples, _) = batch_forward(params, windows, true)?;
    let outputs: Vec<Vec<f64>> = samples.iter().map(|s| s.output.clone()).collect();
    Ok(masked_mse(&outputs, targets).0)
}

/// Attention weights for one window (diagnostics and tests).
pub fn attention_weights(params: &NetworkParams, window: &[DetectorInput]) -> Result<Vec<f64>> {
    let (samples, _) = batch_forward(params, &[window], false)?;
    Ok(samples.into_iter().next().unwrap().alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, t: usize) -> Vec<DetectorInput> {
        (0..t)
            .map(|_| {
                let mut row = [0.0; DETECTOR_INPUT_DIM];
                for v in &mut row {
                    *v = rng.gen_range(-1.0..1.0);
                }
                row
            })
            .collect()
    }

    #[test]
    fn zero_params_output_dense_bias() {
        let mut params = NetworkParams::zeros(NetworkConfig::tiny());
        params.dense_b.data = (0..12).map(|i| i as f64 * 0.5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window = random_window(&mut rng, params.config.window);
        let out = forward(&params, &window).unwrap();
        assert_eq!(out, params.dense_b.data);
    }

    #[test]
    fn uniform_scores_give_uniform_attention() {
        // attn_v = 0 makes every alignment score equal.
        let params = NetworkParams::xavier(NetworkConfig::tiny(), 3);
        let mut p = params.clone();
        p.attn_v.data.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let window = random_window(&mut rng, p.config.window);
        let alpha = attention_weights(&p, &window).unwrap();
        let t = p.config.window as f64;
        for a in alpha {
            assert_relative_eq!(a, 1.0 / t, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let params = NetworkParams::xavier(NetworkConfig::tiny(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let window = random_window(&mut rng, params.config.window);
            let alpha = attention_weights(&params, &window).unwrap();
            let sum: f64 = alpha.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(alpha.iter().all(|a| *a >= 0.0));
        }
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        // Straight-line re-implementation of the whole forward pass,
        // kept deliberately free of the production helpers.
        let cfg = NetworkConfig::tiny();
        let params = NetworkParams::xavier(cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let window = random_window(&mut rng, cfg.window);
        let got = forward(&params, &window).unwrap();

        let t_len = cfg.window;
        // standardize
        let mut x: Vec<Vec<f64>> = window
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - params.input_mean.data[i]) / params.input_std.data[i])
                    .collect()
            })
            .collect();
        // conv / bn(eval) / gelu x3
        for l in 0..3 {
            let c_out = params.conv_w[l].dims[0];
            let c_in = params.conv_w[l].dims[1];
            let mut y = vec![vec![0.0; c_out]; t_len];
            for t in 0..t_len {
                for o in 0..c_out {
                    let mut acc = params.conv_b[l].data[o];
                    for k in 0..3usize {
                        let tt = t as isize + k as isize - 1;
                        if tt < 0 || tt >= t_len as isize {
                            continue;
                        }
                        for i in 0..c_in {
                            acc += params.conv_w[l].at3(o, i, k) * x[tt as usize][i];
                        }
                    }
                    let xh = (acc - params.bn_running_mean[l].data[o])
                        / (params.bn_running_var[l].data[o] + BN_EPS).sqrt();
                    let z = params.bn_gamma[l].data[o] * xh + params.bn_beta[l].data[o];
                    let u = (2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z);
                    y[t][o] = 0.5 * z * (1.0 + u.tanh());
                }
            }
            x = y;
        }
        // bilstm
        let h = cfg.lstm_hidden;
        let run = |dir: usize, rev: bool| -> Vec<Vec<f64>> {
            let mut hs = vec![vec![0.0; h]; t_len];
            let mut hp = vec![0.0; h];
            let mut cp = vec![0.0; h];
            let order: Vec<usize> = if rev { (0..t_len).rev().collect() } else { (0..t_len).collect() };
            for &t in &order {
                let mut a = params.lstm_b[dir].data.clone();
                for j in 0..4 * h {
                    for (i, v) in x[t].iter().enumerate() {
                        a[j] += params.lstm_w_ih[dir].at2(j, i) * v;
                    }
                    for (i, v) in hp.iter().enumerate() {
                        a[j] += params.lstm_w_hh[dir].at2(j, i) * v;
                    }
                }
                let mut hn = vec![0.0; h];
                let mut cn = vec![0.0; h];
                for j in 0..h {
                    let ig = 1.0 / (1.0 + (-a[j]).exp());
                    let fg = 1.0 / (1.0 + (-a[h + j]).exp());
                    let gg = a[2 * h + j].tanh();
                    let og = 1.0 / (1.0 + (-a[3 * h + j]).exp());
                    cn[j] = fg * cp[j] + ig * gg;
                    hn[j] = og * cn[j].tanh();
                }
                hs[t] = hn.clone();
                hp = hn;
                cp = cn;
            }
            hs
        };
        let fw = run(0, false);
        let bw = run(1, true);
        // attention + dense
        let mut scores = vec![0.0; t_len];
        let mut feats: Vec<Vec<f64>> = Vec::new();
        for t in 0..t_len {
            let mut f = fw[t].clone();
            f.extend_from_slice(&bw[t]);
            let mut e = 0.0;
            for j in 0..cfg.attention_dim {
                let mut u = params.attn_b.data[j];
                for (k, v) in f.iter().enumerate() {
                    u += params.attn_w.at2(j, k) * v;
                }
                e += params.attn_v.data[j] * u.tanh();
            }
            scores[t] = e;
            feats.push(f);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|e| (e - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ctx = vec![0.0; 2 * h];
        for t in 0..t_len {
            for j in 0..2 * h {
                ctx[j] += exps[t] / z * feats[t][j];
            }
        }
        let want: Vec<f64> = (0..cfg.output_dim)
            .map(|o| {
                let mut acc = params.dense_b.data[o];
                for (j, v) in ctx.iter().enumerate() {
                    acc += params.dense_w.at2(o, j) * v;
                }
                acc * params.output_std.data[o] + params.output_mean.data[o]
            })
            .collect();

        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(g, w, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_loss_means_zero_gradients() {
        let cfg = NetworkConfig::tiny();
        let params = NetworkParams::xavier(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let window = random_window(&mut rng, cfg.window);
        let out = {
            // Training-mode output to build the exact-match target.
            let (samples, _) = batch_forward(&params, &[&window], true).unwrap();
            samples[0].output.clone()
        };
        let mut target = [0.0; 12];
        target.copy_from_slice(&out);
        let (loss, grads, _) = loss_and_gradients(&params, &[&window], &[target]).unwrap();
        assert!(loss < 1e-24);
        for t in &grads.0 {
            for v in &t.data {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn masked_slots_contribute_zero_gradient() {
        let cfg = NetworkConfig::tiny();
        let params = NetworkParams::xavier(cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let window = random_window(&mut rng, cfg.window);
        let mut target = [0.5; 12];
        // Slots 2 and 3 absent.
        target[8] = -1.0;
        target[11] = -1.0;
        let (l1, g1, _) = loss_and_gradients(&params, &[&window], &[target]).unwrap();
        // Perturbing a masked slot's target leaves everything unchanged.
        let mut target2 = target;
        target2[6] = 99.0;
        target2[7] = -42.0;
        let (l2, g2, _) = loss_and_gradients(&params, &[&window], &[target2]).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        let cfg = NetworkConfig::tiny();
        let params = NetworkParams::xavier(cfg, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let windows: Vec<Vec<DetectorInput>> =
            (0..2).map(|_| random_window(&mut rng, cfg.window)).collect();
        let window_refs: Vec<&[DetectorInput]> = windows.iter().map(|w| w.as_slice()).collect();
        let mut targets = Vec::new();
        for _ in 0..2 {
            let mut t = [0.0; 12];
            for v in &mut t {
                *v = rng.gen_range(-0.5..0.5);
            }
            t[11] = -1.0; // one masked slot
            targets.push(t);
        }

        let (_, grads, _) = loss_and_gradients(&params, &window_refs, &targets).unwrap();
        let eps = 1e-5;
        for (ti, tensor) in params.trainable().iter().enumerate() {
            for vi in 0..tensor.len() {
                let mut plus = params.clone();
                plus.trainable_mut()[ti].data[vi] += eps;
                let lp = loss_only(&plus, &window_refs, &targets).unwrap();
                let mut minus = params.clone();
                minus.trainable_mut()[ti].data[vi] -= eps;
                let lm = loss_only(&minus, &window_refs, &targets).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let analytic = grads.0[ti].data[vi];
                let denom = fd.abs().max(analytic.abs());
                if denom < 1e-10 {
                    continue;
                }
                let rel = (fd - analytic).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{}[{}]: fd={fd:.12e} analytic={analytic:.12e} rel={rel:.3e}",
                    TRAINABLE_NAMES[ti],
                    vi
                );
            }
        }
    }

    #[test]
    fn inference_is_independent_of_batch_composition() {
        let cfg = NetworkConfig::tiny();
        let params = NetworkParams::xavier(cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w1 = random_window(&mut rng, cfg.window);
        let w2 = random_window(&mut rng, cfg.window);
        let alone = forward(&params, &w1).unwrap();
        let (batched, _) = batch_forward(&params, &[&w1, &w2], false).unwrap();
        assert_eq!(alone, batched[0].output);
    }

    #[test]
    fn wrong_window_length_names_the_layer() {
        let params = NetworkParams::zeros(NetworkConfig::tiny());
        let window = vec![[0.0; DETECTOR_INPUT_DIM]; 2];
        match forward(&params, &window) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, "input"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
