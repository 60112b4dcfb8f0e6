//! The assembled network: three encoders, the bottleneck autoencoder that
//! maps their concatenation into the shared act-flow space, and the two
//! bias-free softmax heads trained jointly.
//!
//! Per-sample loss:
//!
//! ```text
//! L = -alpha * log p_act(gold_act) - (1 - alpha) * log p_utt(gold_utt)
//!     + recon_weight * 0.5 * |W_r f(h) - r_input|^2
//! ```
//!
//! The utterance term is dropped when the gold utterance is not a
//! candidate. A batch loss is the mean over samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{
    act_sequence_backward, encode_act_sequence, encode_history, encode_user_utterance, history_backward,
    user_utterance_backward, EncodedTriple, HistoryCache, SeqEncoderCache, SeqEncoderWeights, UserCache,
};
use crate::error::{Error, Result};
use crate::layers::{log_softmax, ConvFilterBank};
use crate::numerics::{argmax, axpy, glorot_init, sigmoid, ParamSet, Rng, Tensor};

/// Architecture sizes. `hidden` is the per-direction LSTM width, so every
/// encoder emits `2 * hidden` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_acts: usize,
    pub n_candidates: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub conv_windows: Vec<(usize, usize)>,
    pub ae_hidden: usize,
    pub ae_out: usize,
}

impl ModelDims {
    pub fn repr_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Width of the concatenated encoder outputs.
    pub fn input_dim(&self) -> usize {
        3 * self.repr_dim()
    }

    pub fn conv_features(&self) -> usize {
        self.conv_windows.iter().map(|w| w.1).sum()
    }

    pub fn head_input(&self, use_autoencoder: bool) -> usize {
        if use_autoencoder {
            self.ae_out
        } else {
            self.input_dim()
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_acts", self.n_acts),
            ("n_candidates", self.n_candidates),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("ae_hidden", self.ae_hidden),
            ("ae_out", self.ae_out),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model dimension {name} must be positive")));
        }
        if self.conv_windows.is_empty() || self.conv_windows.iter().any(|&(h, n)| h == 0 || n == 0) {
            return Err(Error::invalid(format!("bad convolution windows {:?}", self.conv_windows)));
        }
        Ok(())
    }
}

/// Which parts of the network are active and how the two tasks are weighed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub use_act_encoder: bool,
    pub use_autoencoder: bool,
    /// Weight of the act task; `1 - alpha` goes to the utterance task.
    pub alpha: f64,
    /// Weight of the optional reconstruction term. Zero disables it.
    pub recon_weight: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Variant::Full.config(0.5)
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.recon_weight >= 0.0) {
            return Err(Error::invalid("recon_weight must be >= 0"));
        }
        if self.recon_weight > 0.0 && !self.use_autoencoder {
            return Err(Error::invalid("reconstruction needs the autoencoder"));
        }
        Ok(())
    }
}

/// Named points of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAct,
    NoAutoencoder,
    SingleAct,
    SingleUtt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAct,
        Variant::NoAutoencoder,
        Variant::SingleAct,
        Variant::SingleUtt,
    ];

    /// Variant flags; `alpha` only applies to the multi-task variants.
    pub fn config(self, alpha: f64) -> VariantConfig {
        let (use_act_encoder, use_autoencoder, alpha) = match self {
            Variant::Full => (true, true, alpha),
            Variant::NoAct => (false, true, alpha),
            Variant::NoAutoencoder => (true, false, alpha),
            Variant::SingleAct => (true, true, 1.0),
            Variant::SingleUtt => (true, true, 0.0),
        };
        VariantConfig {
            use_act_encoder,
            use_autoencoder,
            alpha,
            recon_weight: 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAct => "no-act",
            Variant::NoAutoencoder => "no-autoencoder",
            Variant::SingleAct => "single-act",
            Variant::SingleUtt => "single-utt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderWeights {
    /// `d x input_dim`
    pub encode: Tensor,
    /// `s x d`
    pub decode: Tensor,
    /// `input_dim x d`, present only when reconstruction is enabled.
    pub reconstruct: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// `C_a x head_input`
    pub act: Tensor,
    /// `C_u x head_input`
    pub utt: Tensor,
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embeddings: Tensor,
    pub act_encoder: SeqEncoderWeights,
    pub history_conv: ConvFilterBank,
    pub history_encoder: SeqEncoderWeights,
    pub user_encoder: SeqEncoderWeights,
    pub autoencoder: Option<AutoencoderWeights>,
    pub heads: HeadWeights,
}

impl ModelParams {
    /// Fresh parameters. Without `embeddings`, token vectors are drawn
    /// Glorot-uniform; row 0 (the unknown token) is always zero.
    pub fn init(dims: ModelDims, variant: &VariantConfig, embeddings: Option<Tensor>, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        variant.validate()?;
        let embeddings = match embeddings {
            Some(e) => {
                if e.shape() != (dims.vocab_size, dims.embed_dim) {
                    return Err(Error::invalid(format!(
                        "embedding table {:?} does not match vocabulary {}x{}",
                        e.shape(),
                        dims.vocab_size,
                        dims.embed_dim
                    )));
                }
                e
            }
            None => {
                let mut e = glorot_init(dims.vocab_size, dims.embed_dim, rng)?;
                e.row_mut(0).fill(0.0);
                e
            }
        };
        let repr = dims.repr_dim();
        let act_encoder = SeqEncoderWeights::init(dims.n_acts, dims.hidden, rng)?;
        let history_conv = ConvFilterBank::init(dims.embed_dim, &dims.conv_windows, rng)?;
        let history_encoder = SeqEncoderWeights::init(dims.conv_features(), dims.hidden, rng)?;
        let user_encoder = SeqEncoderWeights::init(dims.embed_dim, dims.hidden, rng)?;
        let autoencoder = if variant.use_autoencoder {
            Some(AutoencoderWeights {
                encode: glorot_init(dims.ae_hidden, 3 * repr, rng)?,
                decode: glorot_init(dims.ae_out, dims.ae_hidden, rng)?,
                reconstruct: if variant.recon_weight > 0.0 {
                    Some(glorot_init(3 * repr, dims.ae_hidden, rng)?)
                } else {
                    None
                },
            })
        } else {
            None
        };
        let head_in = dims.head_input(variant.use_autoencoder);
        let heads = HeadWeights {
            act: glorot_init(dims.n_acts, head_in, rng)?,
            utt: glorot_init(dims.n_candidates, head_in, rng)?,
        };
        Ok(ModelParams {
            dims,
            embeddings,
            act_encoder,
            history_conv,
            history_encoder,
            user_encoder,
            autoencoder,
            heads,
        })
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn check_variant(&self, variant: &VariantConfig) -> Result<()> {
        variant.validate()?;
        match (&self.autoencoder, variant.use_autoencoder) {
            (None, true) => return Err(Error::invalid("variant needs an autoencoder the parameters lack")),
            (Some(_), false) => return Err(Error::invalid("parameters carry an autoencoder the variant disables")),
            (Some(ae), true) if variant.recon_weight > 0.0 && ae.reconstruct.is_none() => {
                return Err(Error::invalid("variant needs reconstruction weights the parameters lack"))
            }
            _ => {}
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embeddings".to_string(), &self.embeddings)];
        self.act_encoder.named_tensors("act", &mut out);
        for g in &self.history_conv.groups {
            out.push((format!("history.conv{}.w", g.window), &g.weights));
            out.push((format!("history.conv{}.b", g.window), &g.bias));
        }
        self.history_encoder.named_tensors("history", &mut out);
        self.user_encoder.named_tensors("user", &mut out);
        if let Some(ae) = &self.autoencoder {
            out.push(("autoencoder.encode".into(), &ae.encode));
            out.push(("autoencoder.decode".into(), &ae.decode));
            if let Some(r) = &ae.reconstruct {
                out.push(("autoencoder.reconstruct".into(), r));
            }
        }
        out.push(("head.act".into(), &self.heads.act));
        out.push(("head.utt".into(), &self.heads.utt));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embeddings];
        self.act_encoder.tensors_mut(&mut out);
        for g in &mut self.history_conv.groups {
            out.push(&mut g.weights);
            out.push(&mut g.bias);
        }
        self.history_encoder.tensors_mut(&mut out);
        self.user_encoder.tensors_mut(&mut out);
        if let Some(ae) = &mut self.autoencoder {
            out.push(&mut ae.encode);
            out.push(&mut ae.decode);
            if let Some(r) = &mut ae.reconstruct {
                out.push(r);
            }
        }
        out.push(&mut self.heads.act);
        out.push(&mut self.heads.utt);
        out
    }
}

/// Model inputs for one prediction point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub hist_acts: Vec<usize>,
    pub hist_utts: Vec<Vec<usize>>,
    pub current_user_utt: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TransformCache {
    r_input: Vec<f64>,
    /// `sigmoid(h)`; empty without the autoencoder.
    activated: Vec<f64>,
    recon_residual: Vec<f64>,
}

/// Concatenates the encoder outputs (the act slot zeroed when the act
/// encoder is off) and, with the autoencoder on, computes
/// `W_d . sigmoid(W_e . r_input)`. Without it the concatenation passes
/// through unchanged.
pub fn transform(
    triple: &EncodedTriple,
    ae: Option<&AutoencoderWeights>,
    variant: &VariantConfig,
) -> Result<(Vec<f64>, TransformCache)> {
    let width = triple.r_u.len();
    if triple.r_a.len() != width || triple.r_c.len() != width {
        return Err(Error::invalid("encoder outputs disagree in width"));
    }
    let mut r_input = Vec::with_capacity(3 * width);
    if variant.use_act_encoder {
        r_input.extend_from_slice(&triple.r_a);
    } else {
        r_input.extend(std::iter::repeat_n(0.0, width));
    }
    r_input.extend_from_slice(&triple.r_u);
    r_input.extend_from_slice(&triple.r_c);

    if !variant.use_autoencoder {
        let v = r_input.clone();
        return Ok((
            v,
            TransformCache {
                r_input,
                activated: Vec::new(),
                recon_residual: Vec::new(),
            },
        ));
    }
    let ae = ae.ok_or_else(|| Error::invalid("autoencoder weights missing"))?;
    if ae.encode.cols() != r_input.len() || ae.decode.cols() != ae.encode.rows() {
        return Err(Error::invalid(format!(
            "autoencoder {:?}/{:?} does not fit a {}-dim input",
            ae.encode.shape(),
            ae.decode.shape(),
            r_input.len()
        )));
    }
    let activated: Vec<f64> = ae.encode.matvec(&r_input).into_iter().map(sigmoid).collect();
    let v = ae.decode.matvec(&activated);
    let recon_residual = match (&ae.reconstruct, variant.recon_weight > 0.0) {
        (Some(w_r), true) => {
            let mut res = w_r.matvec(&activated);
            axpy(-1.0, &r_input, &mut res);
            res
        }
        _ => Vec::new(),
    };
    Ok((
        v,
        TransformCache {
            r_input,
            activated,
            recon_residual,
        },
    ))
}

/// Softmax over `W_act . v` and its argmax (lowest index on ties).
pub fn predict_act(v: &[f64], heads: &HeadWeights) -> Result<(Vec<f64>, usize)> {
    if v.len() != heads.act.cols() {
        return Err(Error::invalid("act head width does not match representation"));
    }
    let probs: Vec<f64> = log_softmax(&heads.act.matvec(v)).into_iter().map(f64::exp).collect();
    let best = argmax(&probs);
    Ok((probs, best))
}

/// Candidate ids ordered by descending probability, ties to the lower id.
pub fn rank_candidates(probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids
}

/// Top-`k` candidate ids with their probabilities.
pub fn predict_utterance(v: &[f64], heads: &HeadWeights, k: usize) -> Result<Vec<(usize, f64)>> {
    let n = heads.utt.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must lie in [1, {n}], got {k}")));
    }
    if v.len() != heads.utt.cols() {
        return Err(Error::invalid("utterance head width does not match representation"));
    }
    let probs: Vec<f64> = log_softmax(&heads.utt.matvec(v)).into_iter().map(f64::exp).collect();
    Ok(rank_candidates(&probs).into_iter().take(k).map(|i| (i, probs[i])).collect())
}

#[derive(Clone, Debug)]
struct ForwardCache {
    act: Option<SeqEncoderCache>,
    history: Option<HistoryCache>,
    user: UserCache,
    transform: TransformCache,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub representation: Vec<f64>,
    pub act_log_probs: Vec<f64>,
    pub utt_log_probs: Vec<f64>,
    pub predicted_act: usize,
    cache: ForwardCache,
}

impl Forward {
    pub fn act_probs(&self) -> Vec<f64> {
        self.act_log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn utt_probs(&self) -> Vec<f64> {
        self.utt_log_probs.iter().map(|l| l.exp()).collect()
    }

    /// All candidate ids, best first.
    pub fn ranked_candidates(&self) -> Vec<usize> {
        rank_candidates(&self.utt_log_probs)
    }

    /// Attention distribution of the act, history and user encoders (empty
    /// when that encoder saw no input).
    pub fn attention(&self) -> [Vec<f64>; 3] {
        [
            self.cache.act.as_ref().map(|c| c.attention_weights().to_vec()).unwrap_or_default(),
            self.cache.history.as_ref().map(|c| c.attention_weights().to_vec()).unwrap_or_default(),
            self.cache.user.attention_weights().to_vec(),
        ]
    }

    fn recon_penalty(&self, variant: &VariantConfig) -> f64 {
        let r = &self.cache.transform.recon_residual;
        0.5 * variant.recon_weight * r.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Gold labels of one sample; `utt` is `None` when the gold utterance is not
/// in the candidate set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gold {
    pub act: usize,
    pub utt: Option<usize>,
}

pub fn forward(ctx: &DialogueContext, params: &ModelParams, variant: &VariantConfig) -> Result<Forward> {
    params.check_variant(variant)?;
    let dims = &params.dims;
    let (r_a, act) = if variant.use_act_encoder {
        encode_act_sequence(&ctx.hist_acts, dims.n_acts, &params.act_encoder)?
    } else {
        (vec![0.0; dims.repr_dim()], None)
    };
    let (r_u, history) = encode_history(
        &ctx.hist_utts,
        &params.embeddings,
        &params.history_conv,
        &params.history_encoder,
    )?;
    let (r_c, user) = encode_user_utterance(&ctx.current_user_utt, &params.embeddings, &params.user_encoder)?;
    let triple = EncodedTriple { r_a, r_u, r_c };
    let (v, transform_cache) = transform(&triple, params.autoencoder.as_ref(), variant)?;
    if v.len() != params.heads.act.cols() || v.len() != params.heads.utt.cols() {
        return Err(Error::invalid("head width does not match the representation"));
    }
    let act_log_probs = log_softmax(&params.heads.act.matvec(&v));
    let utt_log_probs = log_softmax(&params.heads.utt.matvec(&v));
    let predicted_act = argmax(&act_log_probs);
    Ok(Forward {
        representation: v,
        act_log_probs,
        utt_log_probs,
        predicted_act,
        cache: ForwardCache {
            act,
            history,
            user,
            transform: transform_cache,
        },
    })
}

fn check_gold(fwd: &Forward, gold: &Gold) -> Result<()> {
    if gold.act >= fwd.act_log_probs.len() {
        return Err(Error::invalid(format!("gold act {} outside {} classes", gold.act, fwd.act_log_probs.len())));
    }
    if let Some(u) = gold.utt {
        if u >= fwd.utt_log_probs.len() {
            return Err(Error::invalid(format!("gold utterance {u} outside candidate set")));
        }
    }
    Ok(())
}

/// Loss of one sample.
pub fn sample_loss(fwd: &Forward, gold: &Gold, variant: &VariantConfig) -> Result<f64> {
    check_gold(fwd, gold)?;
    let alpha = variant.alpha;
    let mut loss = -alpha * fwd.act_log_probs[gold.act];
    if let Some(u) = gold.utt {
        loss -= (1.0 - alpha) * fwd.utt_log_probs[u];
    }
    Ok(loss + fwd.recon_penalty(variant))
}

/// Mean per-sample loss over a batch.
pub fn joint_loss(batch: &[Forward], golds: &[Gold], variant: &VariantConfig) -> Result<f64> {
    if batch.is_empty() || batch.len() != golds.len() {
        return Err(Error::invalid("joint loss needs a non-empty batch with one gold per sample"));
    }
    let total = batch
        .iter()
        .zip(golds)
        .map(|(f, g)| sample_loss(f, g, variant))
        .sum::<Result<f64>>()?;
    Ok(total / batch.len() as f64)
}

/// Controls which gradients [`backward`] materializes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Frozen embeddings skip the (dense, vocabulary-sized) embedding
    /// gradient; it stays zero.
    pub embedding_grads: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions { embedding_grads: true }
    }
}

/// Reverse pass for one sample; gradients accumulate into `grads`, scaled by
/// `scale`.
pub fn backward(
    fwd: &Forward,
    gold: &Gold,
    params: &ModelParams,
    variant: &VariantConfig,
    scale: f64,
    opts: BackwardOptions,
    grads: &mut ModelParams,
) -> Result<()> {
    check_gold(fwd, gold)?;
    let alpha = variant.alpha;
    let v = &fwd.representation;

    // Fused softmax cross-entropy: d logits = weight * (p - onehot).
    let mut d_act: Vec<f64> = fwd.act_log_probs.iter().map(|l| scale * alpha * l.exp()).collect();
    d_act[gold.act] -= scale * alpha;
    let d_utt: Vec<f64> = match gold.utt {
        Some(u) if alpha < 1.0 => {
            let w = scale * (1.0 - alpha);
            let mut d: Vec<f64> = fwd.utt_log_probs.iter().map(|l| w * l.exp()).collect();
            d[u] -= w;
            d
        }
        _ => vec![0.0; fwd.utt_log_probs.len()],
    };
    grads.heads.act.add_outer(1.0, &d_act, v);
    grads.heads.utt.add_outer(1.0, &d_utt, v);
    let mut dv = params.heads.act.tmatvec(&d_act);
    params.heads.utt.tmatvec_acc(&d_utt, &mut dv);

    let tc = &fwd.cache.transform;
    let d_input = match (&params.autoencoder, &mut grads.autoencoder) {
        (Some(ae), Some(gae)) if variant.use_autoencoder => {
            gae.decode.add_outer(1.0, &dv, &tc.activated);
            let mut d_act_h = ae.decode.tmatvec(&dv);
            let mut d_input = vec![0.0; tc.r_input.len()];
            if let (Some(w_r), Some(g_r), false) = (&ae.reconstruct, &mut gae.reconstruct, tc.recon_residual.is_empty())
            {
                let d_res: Vec<f64> = tc.recon_residual.iter().map(|r| scale * variant.recon_weight * r).collect();
                g_r.add_outer(1.0, &d_res, &tc.activated);
                w_r.tmatvec_acc(&d_res, &mut d_act_h);
                axpy(-1.0, &d_res, &mut d_input);
            }
            let dh: Vec<f64> = d_act_h
                .iter()
                .zip(&tc.activated)
                .map(|(d, a)| d * a * (1.0 - a))
                .collect();
            gae.encode.add_outer(1.0, &dh, &tc.r_input);
            ae.encode.tmatvec_acc(&dh, &mut d_input);
            d_input
        }
        (None, None) if !variant.use_autoencoder => dv,
        _ => return Err(Error::contract("gradient container does not match the parameters")),
    };

    let w = params.dims.repr_dim();
    let (d_a, rest) = d_input.split_at(w);
    let (d_u, d_c) = rest.split_at(w);
    if variant.use_act_encoder {
        if let Some(c) = &fwd.cache.act {
            act_sequence_backward(c, &params.act_encoder, d_a, &mut grads.act_encoder)?;
        }
    }
    let mut g_emb = opts.embedding_grads.then_some(&mut grads.embeddings);
    if let Some(c) = &fwd.cache.history {
        history_backward(
            c,
            &params.history_conv,
            &params.history_encoder,
            d_u,
            &mut grads.history_conv,
            &mut grads.history_encoder,
            g_emb.as_deref_mut(),
        )?;
    }
    user_utterance_backward(
        &fwd.cache.user,
        &params.user_encoder,
        d_c,
        &mut grads.user_encoder,
        g_emb,
    )?;
    Ok(())
}

/// Loss, full gradient and predictions for one sample.
#[derive(Clone, Debug)]
pub struct ForwardBackward {
    pub loss: f64,
    pub grads: ModelParams,
    pub forward: Forward,
}

pub fn forward_backward(
    ctx: &DialogueContext,
    gold: &Gold,
    params: &ModelParams,
    variant: &VariantConfig,
) -> Result<ForwardBackward> {
    let fwd = forward(ctx, params, variant)?;
    let loss = sample_loss(&fwd, gold, variant)?;
    let mut grads = params.zeros_like();
    backward(&fwd, gold, params, variant, 1.0, BackwardOptions::default(), &mut grads)?;
    Ok(ForwardBackward {
        loss,
        grads,
        forward: fwd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, max_relative_error};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            n_acts: 3,
            n_candidates: 10,
            vocab_size: 12,
            embed_dim: 8,
            hidden: 6,
            conv_windows: vec![(2, 2), (3, 2)],
            ae_hidden: 5,
            ae_out: 7,
        }
    }

    fn tiny_ctx() -> DialogueContext {
        DialogueContext {
            hist_acts: vec![0, 2],
            hist_utts: vec![vec![1, 2, 3, 4], vec![5, 6]],
            current_user_utt: vec![5, 6],
        }
    }

    fn params_for(v: &VariantConfig, seed: u64) -> ModelParams {
        ModelParams::init(tiny_dims(), v, None, &mut Rng::seed(seed)).unwrap()
    }

    fn seeded_triple(rng: &mut Rng, w: usize) -> EncodedTriple {
        let mut r = || (0..w).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        EncodedTriple { r_a: r(), r_u: r(), r_c: r() }
    }

    #[test]
    fn transform_zero_weights() {
        let ae = AutoencoderWeights {
            encode: Tensor::zeros(5, 12),
            decode: Tensor::zeros(7, 5),
            reconstruct: None,
        };
        let triple = seeded_triple(&mut Rng::seed(1), 4);
        let (v, _) = transform(&triple, Some(&ae), &VariantConfig::default()).unwrap();
        assert_eq!(v, vec![0.0; 7]);
    }

    #[test]
    fn transform_identity_gives_sigmoid_of_input() {
        let ae = AutoencoderWeights {
            encode: Tensor::identity(6),
            decode: Tensor::identity(6),
            reconstruct: None,
        };
        let triple = seeded_triple(&mut Rng::seed(2), 2);
        let (v, _) = transform(&triple, Some(&ae), &VariantConfig::default()).unwrap();
        let input = [triple.r_a.clone(), triple.r_u.clone(), triple.r_c.clone()].concat();
        for (a, x) in v.iter().zip(input) {
            assert!((a - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn transform_matches_formula() {
        let mut rng = Rng::seed(3);
        let ae = AutoencoderWeights {
            encode: glorot_init(5, 12, &mut rng).unwrap(),
            decode: glorot_init(7, 5, &mut rng).unwrap(),
            reconstruct: None,
        };
        let triple = seeded_triple(&mut rng, 4);
        let (v, _) = transform(&triple, Some(&ae), &VariantConfig::default()).unwrap();
        let input = [triple.r_a.clone(), triple.r_u.clone(), triple.r_c.clone()].concat();
        let h: Vec<f64> = (0..5)
            .map(|i| {
                let s: f64 = (0..12).map(|j| ae.encode.get(i, j) * input[j]).sum();
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        for i in 0..7 {
            let e: f64 = (0..5).map(|j| ae.decode.get(i, j) * h[j]).sum();
            assert!((v[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn transform_passthrough_and_act_masking() {
        let triple = seeded_triple(&mut Rng::seed(4), 3);
        let v = Variant::NoAutoencoder.config(0.5);
        let (out, _) = transform(&triple, None, &v).unwrap();
        assert_eq!(out, [triple.r_a.clone(), triple.r_u.clone(), triple.r_c.clone()].concat());
        let mut no_act = v;
        no_act.use_act_encoder = false;
        let (out, _) = transform(&triple, None, &no_act).unwrap();
        assert_eq!(&out[..3], &[0.0; 3]);
    }

    #[test]
    fn transform_dimension_mismatch() {
        let ae = AutoencoderWeights {
            encode: Tensor::zeros(5, 11),
            decode: Tensor::zeros(7, 5),
            reconstruct: None,
        };
        let triple = seeded_triple(&mut Rng::seed(1), 4);
        assert!(matches!(
            transform(&triple, Some(&ae), &VariantConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn predict_act_cases() {
        let heads = HeadWeights {
            act: Tensor::zeros(9, 4),
            utt: Tensor::zeros(3, 4),
        };
        let (p, best) = predict_act(&[0.3, 0.1, -2.0, 1.0], &heads).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 9.0).abs() < 1e-15));
        assert_eq!(best, 0);

        let mut act = Tensor::zeros(3, 1);
        act.set(2, 0, 1000.0);
        let heads = HeadWeights { act, utt: Tensor::zeros(1, 1) };
        let (p, best) = predict_act(&[1.0], &heads).unwrap();
        assert_eq!(best, 2);
        assert!((p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_act_matches_softmax_oracle() {
        let mut rng = Rng::seed(5);
        let heads = HeadWeights {
            act: glorot_init(4, 6, &mut rng).unwrap(),
            utt: Tensor::zeros(1, 6),
        };
        let v: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (p, best) = predict_act(&v, &heads).unwrap();
        let logits: Vec<f64> = (0..4).map(|r| dot(heads.act.row(r), &v)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (a, l) in p.iter().zip(&logits) {
            assert!((a - l.exp() / z).abs() < 1e-14);
        }
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        assert_eq!(best, argmax(&shifted));
    }

    #[test]
    fn predict_utterance_cases() {
        let heads = HeadWeights {
            act: Tensor::zeros(1, 3),
            utt: Tensor::zeros(6, 3),
        };
        let top: Vec<usize> = predict_utterance(&[1.0, 2.0, 3.0], &heads, 4).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(top, vec![0, 1, 2, 3]);
        assert!(predict_utterance(&[1.0, 2.0, 3.0], &heads, 0).is_err());
        assert!(predict_utterance(&[1.0, 2.0, 3.0], &heads, 7).is_err());

        let mut rng = Rng::seed(6);
        let heads = HeadWeights {
            act: Tensor::zeros(1, 3),
            utt: glorot_init(6, 3, &mut rng).unwrap(),
        };
        let v = [0.5, -1.0, 2.0];
        let all: Vec<usize> = predict_utterance(&v, &heads, 6).unwrap().iter().map(|x| x.0).collect();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());

        // Brute force: full softmax, then repeatedly pull the max.
        let logits: Vec<f64> = (0..6).map(|r| dot(heads.utt.row(r), &v)).collect();
        let mut remaining: Vec<usize> = (0..6).collect();
        let mut expected = vec![];
        for _ in 0..3 {
            let (pos, _) = remaining
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &id)| if logits[id] > b.1 { (i, logits[id]) } else { b });
            expected.push(remaining.remove(pos));
        }
        let top3: Vec<usize> = predict_utterance(&v, &heads, 3).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(top3, expected);
    }

    #[test]
    fn joint_loss_uniform_heads() {
        // 0.5 ln 9 + 0.5 ln 100
        let mut dims = tiny_dims();
        dims.n_acts = 9;
        dims.n_candidates = 100;
        let variant = VariantConfig::default();
        let mut p = ModelParams::init(dims, &variant, None, &mut Rng::seed(1)).unwrap();
        p.heads.act.fill(0.0);
        p.heads.utt.fill(0.0);
        let f = forward(&tiny_ctx(), &p, &variant).unwrap();
        let loss = joint_loss(&[f], &[Gold { act: 4, utt: Some(17) }], &variant).unwrap();
        let expected = 0.5 * 9f64.ln() + 0.5 * 100f64.ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - 3.4012).abs() < 1e-4);
    }

    #[test]
    fn joint_loss_perfect_predictor_is_zero() {
        let variant = VariantConfig::default();
        let mut p = params_for(&variant, 2);
        let f = forward(&tiny_ctx(), &p, &variant).unwrap();
        // Make the gold rows dominate.
        let v = f.representation.clone();
        for (head, gold) in [(&mut p.heads.act, 1), (&mut p.heads.utt, 3)] {
            head.fill(0.0);
            for (j, x) in v.iter().enumerate() {
                head.set(gold, j, 1e4 * x.signum());
            }
        }
        let f = forward(&tiny_ctx(), &p, &variant).unwrap();
        let loss = joint_loss(&[f], &[Gold { act: 1, utt: Some(3) }], &variant).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn joint_loss_errors() {
        let variant = VariantConfig::default();
        let p = params_for(&variant, 2);
        let f = forward(&tiny_ctx(), &p, &variant).unwrap();
        assert!(joint_loss(&[], &[], &variant).is_err());
        assert!(matches!(
            joint_loss(&[f], &[Gold { act: 3, utt: None }], &variant),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn alpha_one_ignores_utterance_head() {
        let variant = Variant::SingleAct.config(0.5);
        let p = params_for(&variant, 3);
        let gold = Gold { act: 2, utt: Some(4) };
        let base = sample_loss(&forward(&tiny_ctx(), &p, &variant).unwrap(), &gold, &variant).unwrap();
        let mut q = p.clone();
        q.heads.utt.as_mut_slice().iter_mut().for_each(|x| *x += 0.7);
        let moved = sample_loss(&forward(&tiny_ctx(), &q, &variant).unwrap(), &gold, &variant).unwrap();
        assert_eq!(base, moved);
        let fb = forward_backward(&tiny_ctx(), &gold, &p, &variant).unwrap();
        assert_eq!(fb.grads.heads.utt.max_abs(), 0.0);
    }

    #[test]
    fn alpha_zero_silences_act_head() {
        let variant = Variant::SingleUtt.config(0.5);
        let p = params_for(&variant, 3);
        let fb = forward_backward(&tiny_ctx(), &Gold { act: 2, utt: Some(4) }, &p, &variant).unwrap();
        assert_eq!(fb.grads.heads.act.max_abs(), 0.0);
    }

    #[test]
    fn missing_gold_utterance_drops_term() {
        let variant = VariantConfig::default();
        let p = params_for(&variant, 4);
        let f = forward(&tiny_ctx(), &p, &variant).unwrap();
        let loss = sample_loss(&f, &Gold { act: 1, utt: None }, &variant).unwrap();
        assert!((loss + 0.5 * f.act_log_probs[1]).abs() < 1e-15);
        let fb = forward_backward(&tiny_ctx(), &Gold { act: 1, utt: None }, &p, &variant).unwrap();
        assert_eq!(fb.grads.heads.utt.max_abs(), 0.0);
    }

    #[test]
    fn no_act_variant_zero_act_grads() {
        let variant = Variant::NoAct.config(0.5);
        let p = params_for(&variant, 5);
        let fb = forward_backward(&tiny_ctx(), &Gold { act: 0, utt: Some(1) }, &p, &variant).unwrap();
        let mut t = Vec::new();
        fb.grads.act_encoder.named_tensors("act", &mut t);
        assert!(t.iter().all(|(_, x)| x.max_abs() == 0.0));
    }

    #[test]
    fn output_dims_independent_of_history_length() {
        let variant = VariantConfig::default();
        let p = params_for(&variant, 6);
        for n in 0..4 {
            let ctx = DialogueContext {
                hist_acts: vec![1; n],
                hist_utts: vec![vec![2, 3]; n],
                current_user_utt: vec![4],
            };
            let f = forward(&ctx, &p, &variant).unwrap();
            assert_eq!(f.representation.len(), 7);
        }
    }

    fn gradcheck(variant: VariantConfig, seed: u64) {
        let p = params_for(&variant, seed);
        let ctx = tiny_ctx();
        let gold = Gold { act: 1, utt: Some(7) };
        let fb = forward_backward(&ctx, &gold, &p, &variant).unwrap();
        let numeric = finite_diff_grad(
            |q: &ModelParams| sample_loss(&forward(&ctx, q, &variant).unwrap(), &gold, &variant).unwrap(),
            &p,
            1e-5,
        )
        .unwrap();
        let (err, at) = max_relative_error(&fb.grads, &numeric).unwrap();
        assert!(err < 1e-4, "{variant:?}: {err} at {at}");
    }

    #[test]
    fn gradcheck_full() {
        gradcheck(Variant::Full.config(0.5), 11);
    }

    #[test]
    fn gradcheck_with_reconstruction() {
        let mut v = Variant::Full.config(0.3);
        v.recon_weight = 0.7;
        gradcheck(v, 12);
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let mut v = VariantConfig::default();
        v.recon_weight = 0.1;
        let mut p = params_for(&v, 1);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape()).collect();
        let shapes_mut: Vec<_> = p.tensors_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, shapes_mut);
    }
}
