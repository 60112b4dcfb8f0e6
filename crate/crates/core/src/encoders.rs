//! The act-sequence, dialogue-history and current-user-utterance encoders,
//! plus the vocabularies that index their inputs.
//!
//! Every encoder ends in a BiLSTM followed by attention pooling and emits a
//! `2H` representation. Empty act or utterance histories encode to the zero
//! vector; the current user utterance must be non-empty.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    attention_backward, attention_pool, bilstm_backward, bilstm_forward, conv_backward, conv_max_pool,
    AttentionCache, AttentionWeights, BiLstmCache, ConvCache, ConvFilterBank, LstmWeights,
};
use crate::numerics::{axpy, Rng, Tensor};

/// Reserved token for anything outside the vocabulary. Always index 0 and
/// always a zero embedding.
pub const UNK: &str = "<unk>";

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Lowercase with runs of whitespace collapsed to one space and trimmed.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ActVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for ActVocabulary {
    fn from(labels: Vec<String>) -> Self {
        ActVocabulary::from_labels(labels)
    }
}

impl From<ActVocabulary> for Vec<String> {
    fn from(v: ActVocabulary) -> Self {
        v.labels
    }
}

impl ActVocabulary {
    /// Distinct labels in first-occurrence order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = ActVocabulary::default();
        for l in labels {
            v.insert(l.into());
        }
        v
    }

    pub fn insert(&mut self, label: String) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(label.clone(), i);
        self.labels.push(label);
        i
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Token index with out-of-vocabulary flags. Index 0 is [`UNK`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    oov: Vec<bool>,
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        let mut index = HashMap::new();
        index.insert(UNK.to_string(), 0);
        TokenVocabulary {
            tokens: vec![UNK.to_string()],
            index,
            oov: vec![true],
        }
    }
}

impl TokenVocabulary {
    /// Vocabulary over `texts`, tokens in first-occurrence order. Nothing is
    /// flagged OOV until embeddings are attached.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut v = TokenVocabulary::default();
        for text in texts {
            for tok in tokenize(text) {
                v.insert(tok);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its stored token list (first entry must be
    /// [`UNK`]) and OOV flags.
    pub fn from_parts(tokens: Vec<String>, oov: Vec<bool>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) || tokens.len() != oov.len() {
            return Err(Error::invalid("token list must start with <unk> and match its OOV flags"));
        }
        let index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::invalid("duplicate tokens in vocabulary"));
        }
        Ok(TokenVocabulary { tokens, index, oov })
    }

    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.clone(), i);
        self.tokens.push(token);
        self.oov.push(false);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token ids of `text`; unknown tokens map to [`UNK`] but keep their
    /// position.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(0)).collect()
    }

    pub fn is_oov(&self, id: usize) -> bool {
        self.oov.get(id).copied().unwrap_or(true)
    }

    pub fn oov_flags(&self) -> &[bool] {
        &self.oov
    }

    pub fn set_oov_flags(&mut self, flags: Vec<bool>) -> Result<()> {
        if flags.len() != self.tokens.len() || !flags[0] {
            return Err(Error::invalid("OOV flags must cover the vocabulary with <unk> flagged"));
        }
        self.oov = flags;
        Ok(())
    }
}

/// BiLSTM plus attention scorer shared by all three encoders' shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqEncoderWeights {
    pub fwd: LstmWeights,
    pub bwd: LstmWeights,
    pub attn: AttentionWeights,
}

impl SeqEncoderWeights {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SeqEncoderWeights {
            fwd: LstmWeights::init(input, hidden, rng)?,
            bwd: LstmWeights::init(input, hidden, rng)?,
            attn: AttentionWeights::init(2 * hidden, rng)?,
        })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        SeqEncoderWeights {
            fwd: LstmWeights::zeros(input, hidden),
            bwd: LstmWeights::zeros(input, hidden),
            attn: AttentionWeights::zeros(2 * hidden),
        }
    }

    /// Output width `2H`.
    pub fn width(&self) -> usize {
        2 * self.fwd.hidden()
    }

    pub(crate) fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (dir, w) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            out.push((format!("{prefix}.{dir}.w_x"), &w.w_x));
            out.push((format!("{prefix}.{dir}.w_h"), &w.w_h));
            out.push((format!("{prefix}.{dir}.bias"), &w.bias));
        }
        out.push((format!("{prefix}.attn"), &self.attn.w));
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for w in [&mut self.fwd, &mut self.bwd] {
            out.push(&mut w.w_x);
            out.push(&mut w.w_h);
            out.push(&mut w.bias);
        }
        out.push(&mut self.attn.w);
    }
}

#[derive(Clone, Debug)]
pub struct SeqEncoderCache {
    bilstm: BiLstmCache,
    attention: AttentionCache,
    weights: Vec<f64>,
    len: usize,
}

impl SeqEncoderCache {
    /// Attention distribution over the encoded positions.
    pub fn attention_weights(&self) -> &[f64] {
        &self.weights
    }
}

fn encode_sequence(inputs: &[Vec<f64>], w: &SeqEncoderWeights) -> Result<(Vec<f64>, SeqEncoderCache)> {
    let (states, bilstm) = bilstm_forward(inputs, &w.fwd, &w.bwd)?;
    let (pooled, weights, attention) = attention_pool(&states, &w.attn)?;
    Ok((
        pooled,
        SeqEncoderCache {
            bilstm,
            attention,
            weights,
            len: inputs.len(),
        },
    ))
}

fn encode_sequence_backward(
    cache: &SeqEncoderCache,
    w: &SeqEncoderWeights,
    d_repr: &[f64],
    grads: &mut SeqEncoderWeights,
) -> Result<Vec<Vec<f64>>> {
    let d_states = attention_backward(&cache.attention, &w.attn, d_repr, &mut grads.attn)?;
    bilstm_backward(&cache.bilstm, &w.fwd, &w.bwd, &d_states, &mut grads.fwd, &mut grads.bwd)
}

fn embed(tokens: &[usize], embeddings: &Tensor) -> Result<Vec<Vec<f64>>> {
    tokens
        .iter()
        .map(|&t| {
            if t >= embeddings.rows() {
                Err(Error::invalid(format!(
                    "token id {t} outside embedding table of {} rows",
                    embeddings.rows()
                )))
            } else {
                Ok(embeddings.row(t).to_vec())
            }
        })
        .collect()
}

fn scatter_embedding_grads(tokens: &[usize], d_tokens: &[Vec<f64>], g_emb: &mut Tensor) {
    for (&t, d) in tokens.iter().zip(d_tokens) {
        axpy(1.0, d, g_emb.row_mut(t));
    }
}

/// One-hot act history through BiLSTM and attention. `None` cache means the
/// history was empty and the output is zero.
pub fn encode_act_sequence(
    acts: &[usize],
    n_acts: usize,
    w: &SeqEncoderWeights,
) -> Result<(Vec<f64>, Option<SeqEncoderCache>)> {
    if acts.is_empty() {
        return Ok((vec![0.0; w.width()], None));
    }
    if w.fwd.input() != n_acts {
        return Err(Error::invalid(format!(
            "act encoder expects {} acts, configured for {n_acts}",
            w.fwd.input()
        )));
    }
    let inputs = acts
        .iter()
        .map(|&a| {
            if a >= n_acts {
                return Err(Error::invalid(format!("act index {a} outside vocabulary of {n_acts}")));
            }
            let mut one_hot = vec![0.0; n_acts];
            one_hot[a] = 1.0;
            Ok(one_hot)
        })
        .collect::<Result<Vec<_>>>()?;
    let (r, cache) = encode_sequence(&inputs, w)?;
    Ok((r, Some(cache)))
}

pub fn act_sequence_backward(
    cache: &SeqEncoderCache,
    w: &SeqEncoderWeights,
    d_repr: &[f64],
    grads: &mut SeqEncoderWeights,
) -> Result<()> {
    encode_sequence_backward(cache, w, d_repr, grads).map(|_| ())
}

#[derive(Clone, Debug)]
pub struct HistoryCache {
    utterances: Vec<Vec<usize>>,
    conv: Vec<ConvCache>,
    seq: SeqEncoderCache,
}

impl HistoryCache {
    pub fn attention_weights(&self) -> &[f64] {
        self.seq.attention_weights()
    }
}

/// Each utterance to max-pooled convolution features, then the feature
/// sequence through BiLSTM and attention.
pub fn encode_history(
    utterances: &[Vec<usize>],
    embeddings: &Tensor,
    conv: &ConvFilterBank,
    w: &SeqEncoderWeights,
) -> Result<(Vec<f64>, Option<HistoryCache>)> {
    if utterances.is_empty() {
        return Ok((vec![0.0; w.width()], None));
    }
    let mut features = Vec::with_capacity(utterances.len());
    let mut caches = Vec::with_capacity(utterances.len());
    for u in utterances {
        if u.is_empty() {
            return Err(Error::invalid("empty utterance in history"));
        }
        let (f, c) = conv_max_pool(&embed(u, embeddings)?, conv)?;
        features.push(f);
        caches.push(c);
    }
    let (r, seq) = encode_sequence(&features, w)?;
    Ok((
        r,
        Some(HistoryCache {
            utterances: utterances.to_vec(),
            conv: caches,
            seq,
        }),
    ))
}

/// Gradients for the history encoder. Embedding gradients are only formed
/// when `g_emb` is given.
pub fn history_backward(
    cache: &HistoryCache,
    conv: &ConvFilterBank,
    w: &SeqEncoderWeights,
    d_repr: &[f64],
    g_conv: &mut ConvFilterBank,
    grads: &mut SeqEncoderWeights,
    mut g_emb: Option<&mut Tensor>,
) -> Result<()> {
    let d_features = encode_sequence_backward(&cache.seq, w, d_repr, grads)?;
    for ((u, c), d) in cache.utterances.iter().zip(&cache.conv).zip(&d_features) {
        let d_tokens = conv_backward(c, conv, d, g_conv)?;
        if let Some(g) = g_emb.as_deref_mut() {
            scatter_embedding_grads(u, &d_tokens, g);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct UserCache {
    tokens: Vec<usize>,
    seq: SeqEncoderCache,
}

impl UserCache {
    pub fn attention_weights(&self) -> &[f64] {
        self.seq.attention_weights()
    }
}

/// Raw token embeddings of the current user turn through BiLSTM and
/// attention.
pub fn encode_user_utterance(
    tokens: &[usize],
    embeddings: &Tensor,
    w: &SeqEncoderWeights,
) -> Result<(Vec<f64>, UserCache)> {
    if tokens.is_empty() {
        return Err(Error::invalid("current user utterance is empty"));
    }
    let (r, seq) = encode_sequence(&embed(tokens, embeddings)?, w)?;
    Ok((
        r,
        UserCache {
            tokens: tokens.to_vec(),
            seq,
        },
    ))
}

pub fn user_utterance_backward(
    cache: &UserCache,
    w: &SeqEncoderWeights,
    d_repr: &[f64],
    grads: &mut SeqEncoderWeights,
    g_emb: Option<&mut Tensor>,
) -> Result<()> {
    let d_tokens = encode_sequence_backward(&cache.seq, w, d_repr, grads)?;
    if let Some(g) = g_emb {
        scatter_embedding_grads(&cache.tokens, &d_tokens, g);
    }
    debug_assert_eq!(cache.seq.len, cache.tokens.len());
    Ok(())
}

/// The three encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTriple {
    pub r_a: Vec<f64>,
    pub r_u: Vec<f64>,
    pub r_c: Vec<f64>,
}
