//! Differentiable building blocks with explicit forward caches and
//! reverse-mode backward passes.
//!
//! Backward functions accumulate parameter gradients into caller-provided
//! gradient containers (same type as the weights) and return input
//! gradients.
//!
//! LSTM gate layout inside every `4H` block is `[input, forget, candidate,
//! output]`; input, forget and output gates use the logistic sigmoid, the
//! candidate uses tanh:
//!
//! ```text
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, glorot_init, sigmoid, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    /// `4H x D`
    pub w_x: Tensor,
    /// `4H x H`
    pub w_h: Tensor,
    /// `4H x 1`
    pub bias: Tensor,
}

impl LstmWeights {
    /// Glorot weights, zero bias except the forget gate at 1.0.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let w_x = glorot_init(4 * hidden, input, rng)?;
        let w_h = glorot_init(4 * hidden, hidden, rng)?;
        let mut bias = Tensor::zeros(4 * hidden, 1);
        for v in &mut bias.as_mut_slice()[hidden..2 * hidden] {
            *v = 1.0;
        }
        Ok(LstmWeights { w_x, w_h, bias })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights {
            w_x: Tensor::zeros(4 * hidden, input),
            w_h: Tensor::zeros(4 * hidden, hidden),
            bias: Tensor::zeros(4 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_h.rows() != 4 * h || self.w_x.rows() != 4 * h || self.bias.shape() != (4 * h, 1) {
            return Err(Error::invalid(format!(
                "inconsistent LSTM weights: w_x {:?}, w_h {:?}, bias {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LstmStep {
    pos: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    inputs: Vec<Vec<f64>>,
    steps: Vec<LstmStep>,
    hidden: usize,
}

/// Runs one LSTM direction over `inputs`. Returned states are indexed by
/// input position regardless of direction.
pub fn lstm_scan(inputs: &[Vec<f64>], w: &LstmWeights, reverse: bool) -> Result<(Vec<Vec<f64>>, LstmCache)> {
    w.validate()?;
    let hd = w.hidden();
    if let Some(bad) = inputs.iter().find(|x| x.len() != w.input()) {
        return Err(Error::invalid(format!(
            "LSTM expects {}-dim inputs, got {}",
            w.input(),
            bad.len()
        )));
    }
    let n = inputs.len();
    let mut states = vec![Vec::new(); n];
    let mut steps = Vec::with_capacity(n);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for pos in order {
        let mut a = w.bias.as_slice().to_vec();
        w.w_x.matvec_acc(&inputs[pos], &mut a);
        w.w_h.matvec_acc(&h, &mut a);
        for (j, v) in a.iter_mut().enumerate() {
            *v = if (2 * hd..3 * hd).contains(&j) { v.tanh() } else { sigmoid(*v) };
        }
        let mut c_new = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h_new = vec![0.0; hd];
        for j in 0..hd {
            c_new[j] = a[hd + j] * c[j] + a[j] * a[2 * hd + j];
            tanh_c[j] = c_new[j].tanh();
            h_new[j] = a[3 * hd + j] * tanh_c[j];
        }
        steps.push(LstmStep {
            pos,
            h_prev: std::mem::replace(&mut h, h_new.clone()),
            c_prev: std::mem::replace(&mut c, c_new),
            gates: a,
            tanh_c,
        });
        states[pos] = h_new;
    }
    Ok((
        states,
        LstmCache {
            inputs: inputs.to_vec(),
            steps,
            hidden: hd,
        },
    ))
}

/// Backward through one direction. `d_states` is indexed by position.
/// Parameter gradients accumulate into `grads`; input gradients are returned
/// indexed by position.
pub fn lstm_scan_backward(
    cache: &LstmCache,
    w: &LstmWeights,
    d_states: &[Vec<f64>],
    grads: &mut LstmWeights,
) -> Result<Vec<Vec<f64>>> {
    let hd = cache.hidden;
    if w.hidden() != hd || d_states.len() != cache.steps.len() || d_states.iter().any(|d| d.len() != hd) {
        return Err(Error::contract("LSTM backward called with a mismatched cache"));
    }
    let mut d_inputs = vec![vec![0.0; w.input()]; cache.inputs.len()];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = vec![0.0; 4 * hd];
    for step in cache.steps.iter().rev() {
        let g = &step.gates;
        for j in 0..hd {
            let dh = d_states[step.pos][j] + dh_next[j];
            let (gi, gf, gg, go) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let tc = step.tanh_c[j];
            let dc = dh * go * (1.0 - tc * tc) + dc_next[j];
            da[j] = dc * gg * gi * (1.0 - gi);
            da[hd + j] = dc * step.c_prev[j] * gf * (1.0 - gf);
            da[2 * hd + j] = dc * gi * (1.0 - gg * gg);
            da[3 * hd + j] = dh * tc * go * (1.0 - go);
            dc_next[j] = dc * gf;
        }
        grads.w_x.add_outer(1.0, &da, &cache.inputs[step.pos]);
        grads.w_h.add_outer(1.0, &da, &step.h_prev);
        axpy(1.0, &da, grads.bias.as_mut_slice());
        w.w_x.tmatvec_acc(&da, &mut d_inputs[step.pos]);
        dh_next = w.w_h.tmatvec(&da);
    }
    Ok(d_inputs)
}

#[derive(Clone, Debug)]
pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

/// Forward and backward LSTMs from zero state; state `i` is
/// `[forward_i, backward_i]` of width `2H`.
pub fn bilstm_forward(
    inputs: &[Vec<f64>],
    fwd: &LstmWeights,
    bwd: &LstmWeights,
) -> Result<(Vec<Vec<f64>>, BiLstmCache)> {
    if inputs.is_empty() {
        return Err(Error::invalid("BiLSTM over an empty sequence"));
    }
    if fwd.hidden() != bwd.hidden() || fwd.input() != bwd.input() {
        return Err(Error::invalid("BiLSTM directions disagree on dimensions"));
    }
    let (hf, cf) = lstm_scan(inputs, fwd, false)?;
    let (hb, cb) = lstm_scan(inputs, bwd, true)?;
    let states = hf
        .into_iter()
        .zip(hb)
        .map(|(mut f, b)| {
            f.extend(b);
            f
        })
        .collect();
    Ok((states, BiLstmCache { fwd: cf, bwd: cb }))
}

pub fn bilstm_backward(
    cache: &BiLstmCache,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
    d_states: &[Vec<f64>],
    g_fwd: &mut LstmWeights,
    g_bwd: &mut LstmWeights,
) -> Result<Vec<Vec<f64>>> {
    let hd = cache.fwd.hidden;
    if d_states.iter().any(|d| d.len() != 2 * hd) {
        return Err(Error::contract("BiLSTM upstream width does not match cache"));
    }
    let (df, db): (Vec<_>, Vec<_>) = d_states
        .iter()
        .map(|d| (d[..hd].to_vec(), d[hd..].to_vec()))
        .unzip();
    let mut dx = lstm_scan_backward(&cache.fwd, fwd, &df, g_fwd)?;
    let dxb = lstm_scan_backward(&cache.bwd, bwd, &db, g_bwd)?;
    for (a, b) in dx.iter_mut().zip(&dxb) {
        axpy(1.0, b, a);
    }
    Ok(dx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    /// `1 x 2H` scoring row.
    pub w: Tensor,
}

impl AttentionWeights {
    pub fn init(width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(AttentionWeights {
            w: glorot_init(1, width, rng)?,
        })
    }

    pub fn zeros(width: usize) -> Self {
        AttentionWeights {
            w: Tensor::zeros(1, width),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    states: Vec<Vec<f64>>,
    scores: Vec<f64>,
    weights: Vec<f64>,
}

/// `e_i = tanh(w . h_i)`, `v = softmax(e)`, `pooled = sum_i v_i h_i`.
pub fn attention_pool(states: &[Vec<f64>], att: &AttentionWeights) -> Result<(Vec<f64>, Vec<f64>, AttentionCache)> {
    if states.is_empty() {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    let width = att.w.cols();
    if att.w.rows() != 1 || states.iter().any(|h| h.len() != width) {
        return Err(Error::invalid(format!("attention expects {width}-dim states")));
    }
    let scores: Vec<f64> = states.iter().map(|h| dot(att.w.row(0), h).tanh()).collect();
    let weights = softmax(&scores);
    let mut pooled = vec![0.0; width];
    for (h, &v) in states.iter().zip(&weights) {
        axpy(v, h, &mut pooled);
    }
    let cache = AttentionCache {
        states: states.to_vec(),
        scores,
        weights: weights.clone(),
    };
    Ok((pooled, weights, cache))
}

pub fn attention_backward(
    cache: &AttentionCache,
    att: &AttentionWeights,
    d_pooled: &[f64],
    grads: &mut AttentionWeights,
) -> Result<Vec<Vec<f64>>> {
    let width = att.w.cols();
    if d_pooled.len() != width || cache.states.first().is_none_or(|h| h.len() != width) {
        return Err(Error::contract("attention backward called with a mismatched cache"));
    }
    let dv: Vec<f64> = cache.states.iter().map(|h| dot(d_pooled, h)).collect();
    let mean = dot(&cache.weights, &dv);
    let mut d_states = Vec::with_capacity(cache.states.len());
    for (i, h) in cache.states.iter().enumerate() {
        let v = cache.weights[i];
        let e = cache.scores[i];
        let ds = v * (dv[i] - mean) * (1.0 - e * e);
        let mut dh: Vec<f64> = d_pooled.iter().map(|d| v * d).collect();
        axpy(ds, att.w.row(0), &mut dh);
        axpy(ds, h, grads.w.as_mut_slice());
        d_states.push(dh);
    }
    Ok(d_states)
}

/// Filters sharing one window size. Row `r` of `weights` is filter `r`,
/// laid out as `window` consecutive token rows of width `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvGroup {
    pub window: usize,
    /// `count x (window * k)`
    pub weights: Tensor,
    /// `count x 1`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFilterBank {
    pub embed_dim: usize,
    pub groups: Vec<ConvGroup>,
}

impl ConvFilterBank {
    /// `windows` lists `(window size, filter count)` pairs.
    pub fn init(embed_dim: usize, windows: &[(usize, usize)], rng: &mut Rng) -> Result<Self> {
        Self::validate_windows(windows)?;
        let groups = windows
            .iter()
            .map(|&(h, n)| {
                Ok(ConvGroup {
                    window: h,
                    weights: glorot_init(n, h * embed_dim, rng)?,
                    bias: Tensor::zeros(n, 1),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConvFilterBank { embed_dim, groups })
    }

    pub fn zeros(embed_dim: usize, windows: &[(usize, usize)]) -> Self {
        let groups = windows
            .iter()
            .map(|&(h, n)| ConvGroup {
                window: h,
                weights: Tensor::zeros(n, h * embed_dim),
                bias: Tensor::zeros(n, 1),
            })
            .collect();
        ConvFilterBank { embed_dim, groups }
    }

    fn validate_windows(windows: &[(usize, usize)]) -> Result<()> {
        if windows.is_empty() || windows.iter().any(|&(h, n)| h == 0 || n == 0) {
            return Err(Error::invalid(format!("bad convolution windows {windows:?}")));
        }
        Ok(())
    }

    /// Total number of filters, i.e. the output width.
    pub fn feature_count(&self) -> usize {
        self.groups.iter().map(|g| g.weights.rows()).sum()
    }

    pub fn max_window(&self) -> usize {
        self.groups.iter().map(|g| g.window).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    /// Right-padded token rows, flattened.
    padded: Vec<f64>,
    tokens: usize,
    /// Winning window start per filter, bank order.
    argmax: Vec<usize>,
    features: Vec<f64>,
}

/// Per filter, `tanh(W . window + b)` at every window start, then the max
/// over starts. Sequences shorter than the largest window are right-padded
/// with zero rows. Equal maxima resolve to the earliest start.
pub fn conv_max_pool(tokens: &[Vec<f64>], bank: &ConvFilterBank) -> Result<(Vec<f64>, ConvCache)> {
    let k = bank.embed_dim;
    if tokens.is_empty() {
        return Err(Error::invalid("convolution over an empty utterance"));
    }
    if let Some(bad) = tokens.iter().find(|t| t.len() != k) {
        return Err(Error::invalid(format!(
            "filter width {k} does not match token width {}",
            bad.len()
        )));
    }
    let n = tokens.len().max(bank.max_window());
    let mut padded = vec![0.0; n * k];
    for (i, t) in tokens.iter().enumerate() {
        padded[i * k..(i + 1) * k].copy_from_slice(t);
    }
    let mut features = Vec::with_capacity(bank.feature_count());
    let mut argmax = Vec::with_capacity(bank.feature_count());
    for g in &bank.groups {
        let span = g.window * k;
        for f in 0..g.weights.rows() {
            let row = g.weights.row(f);
            let b = g.bias.as_slice()[f];
            let mut best = (0, f64::NEG_INFINITY);
            for p in 0..=(n - g.window) {
                let c = (dot(row, &padded[p * k..p * k + span]) + b).tanh();
                if c > best.1 {
                    best = (p, c);
                }
            }
            argmax.push(best.0);
            features.push(best.1);
        }
    }
    let cache = ConvCache {
        padded,
        tokens: tokens.len(),
        argmax,
        features: features.clone(),
    };
    Ok((features, cache))
}

/// Routes each feature's gradient to its winning window only. Gradients
/// that land on padding rows are dropped.
pub fn conv_backward(
    cache: &ConvCache,
    bank: &ConvFilterBank,
    d_features: &[f64],
    grads: &mut ConvFilterBank,
) -> Result<Vec<Vec<f64>>> {
    let k = bank.embed_dim;
    if d_features.len() != cache.features.len() || bank.feature_count() != cache.features.len() {
        return Err(Error::contract("convolution backward called with a mismatched cache"));
    }
    let n = cache.padded.len() / k;
    let mut d_padded = vec![0.0; n * k];
    let mut idx = 0;
    for (g, gg) in bank.groups.iter().zip(grads.groups.iter_mut()) {
        let span = g.window * k;
        for f in 0..g.weights.rows() {
            let c = cache.features[idx];
            let dz = d_features[idx] * (1.0 - c * c);
            let p = cache.argmax[idx];
            idx += 1;
            if dz == 0.0 {
                continue;
            }
            axpy(dz, &cache.padded[p * k..p * k + span], gg.weights.row_mut(f));
            gg.bias.as_mut_slice()[f] += dz;
            axpy(dz, g.weights.row(f), &mut d_padded[p * k..p * k + span]);
        }
    }
    Ok(d_padded
        .chunks(k)
        .take(cache.tokens)
        .map(|c| c.to_vec())
        .collect())
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub input: Vec<f64>,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// `W . x + b`. A missing bias means a bias-free map.
pub fn linear(input: &[f64], w: &Tensor, bias: Option<&[f64]>) -> Result<(Vec<f64>, LinearCache)> {
    if input.len() != w.cols() {
        return Err(Error::invalid(format!(
            "linear map {:?} applied to {}-dim input",
            w.shape(),
            input.len()
        )));
    }
    let mut out = match bias {
        Some(b) if b.len() != w.rows() => {
            return Err(Error::invalid(format!(
                "bias of length {} for {} outputs",
                b.len(),
                w.rows()
            )))
        }
        Some(b) => b.to_vec(),
        None => vec![0.0; w.rows()],
    };
    w.matvec_acc(input, &mut out);
    Ok((out, LinearCache { input: input.to_vec() }))
}

pub fn linear_backward(cache: &LinearCache, w: &Tensor, upstream: &[f64]) -> Result<LinearGrads> {
    if upstream.len() != w.rows() || cache.input.len() != w.cols() {
        return Err(Error::contract("linear backward called with a mismatched cache"));
    }
    let mut weight = Tensor::zeros(w.rows(), w.cols());
    weight.add_outer(1.0, upstream, &cache.input);
    Ok(LinearGrads {
        input: w.tmatvec(upstream),
        weight,
        bias: upstream.to_vec(),
    })
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(softmax(logits))` without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}
