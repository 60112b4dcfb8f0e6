//! Minibatch SGD training, evaluation and dialogue-level cross-validation.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{
    build_samples, load_pretrained_embeddings, CandidateSet, DialogueSession, Speaker, TurnSample, Turn, Vocabularies,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_retrieval, macro_f1_declared, micro_f1, per_class_scores, BleuOptions, EvalReport, REPORT_KS,
};
use crate::model::{backward, forward, sample_loss, BackwardOptions, DialogueContext, ModelDims, ModelParams, Variant, VariantConfig};
use crate::numerics::{sgd_step, ParamSet, Rng};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

/// Hyperparameters and run options. Serializes to flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub variant: Variant,
    pub recon_weight: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    /// `(window, filter count)` pairs.
    pub conv_windows: Vec<(usize, usize)>,
    pub ae_hidden: usize,
    pub ae_out: usize,
    pub trainable_embeddings: bool,
    /// Whitespace-separated `token v1 .. vk` file; random vectors when absent.
    pub embeddings: Option<PathBuf>,
    /// Fraction of dialogues held out for per-epoch validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 32,
            lr: 0.05,
            clip_norm: 5.0,
            epochs: 40,
            alpha: 0.5,
            variant: Variant::Full,
            recon_weight: 0.0,
            hidden: 80,
            embed_dim: 300,
            conv_windows: vec![(3, 11), (4, 11), (5, 10)],
            ae_hidden: 128,
            ae_out: 160,
            trainable_embeddings: false,
            embeddings: None,
            val_fraction: 0.1,
            seed: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_windows(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let (w, c) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("conv window {part:?} must look like window:count")))?;
            Ok((parse_value("conv_windows", w.trim())?, parse_value("conv_windows", c.trim())?))
        })
        .collect()
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "minibatch_size",
        "lr",
        "clip_norm",
        "epochs",
        "alpha",
        "variant",
        "recon_weight",
        "hidden",
        "embed_dim",
        "conv_windows",
        "ae_hidden",
        "ae_out",
        "trainable_embeddings",
        "embeddings",
        "val_fraction",
        "seed",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "minibatch_size" => self.minibatch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "variant" => self.variant = v.parse()?,
            "recon_weight" => self.recon_weight = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "conv_windows" => self.conv_windows = parse_windows(v)?,
            "ae_hidden" => self.ae_hidden = parse_value(key, v)?,
            "ae_out" => self.ae_out = parse_value(key, v)?,
            "trainable_embeddings" => self.trainable_embeddings = parse_value(key, v)?,
            "embeddings" => self.embeddings = (!v.is_empty()).then(|| PathBuf::from(v)),
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key = value, got {line:?}")))?;
            cfg.set(k, v).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        let windows: Vec<String> = self.conv_windows.iter().map(|(w, c)| format!("{w}:{c}")).collect();
        let mut s = String::new();
        let _ = writeln!(s, "minibatch_size = {}", self.minibatch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "recon_weight = {}", self.recon_weight);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "conv_windows = {}", windows.join(","));
        let _ = writeln!(s, "ae_hidden = {}", self.ae_hidden);
        let _ = writeln!(s, "ae_out = {}", self.ae_out);
        let _ = writeln!(s, "trainable_embeddings = {}", self.trainable_embeddings);
        if let Some(p) = &self.embeddings {
            let _ = writeln!(s, "embeddings = {}", p.display());
        }
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::invalid("minibatch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.ae_hidden == 0 || self.ae_out == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if self.conv_windows.is_empty() || self.conv_windows.iter().any(|&(w, c)| w == 0 || c == 0) {
            return Err(Error::invalid("conv_windows needs at least one window:count with both positive"));
        }
        self.variant_config().validate()
    }

    /// Active variant with this config's alpha and reconstruction weight.
    pub fn variant_config(&self) -> VariantConfig {
        let mut v = self.variant.config(self.alpha);
        v.recon_weight = self.recon_weight;
        v
    }

    pub fn dims(&self, vocab: &Vocabularies) -> ModelDims {
        ModelDims {
            n_acts: vocab.acts.len(),
            n_candidates: vocab.candidates.len(),
            vocab_size: vocab.tokens.len(),
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            conv_windows: self.conv_windows.clone(),
            ae_hidden: self.ae_hidden,
            ae_out: self.ae_out,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub loss: f64,
    pub val_micro_f1: Option<f64>,
    pub val_bleu4_cumu_at3: Option<f64>,
    pub seconds: f64,
}

/// Tab-separated log with a header row. Missing validation values print `-`.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from("epoch\tloss\tval_micro_f1\tval_bleu4_cumu@3\tseconds\n");
    for r in history {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{}\t{}\t{:.3}",
            r.epoch,
            r.loss,
            opt(r.val_micro_f1),
            opt(r.val_bleu4_cumu_at3),
            r.seconds
        );
    }
    s
}

/// A trained network with everything needed to run it on new dialogues.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: Vocabularies,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Top prediction for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub act: usize,
    pub act_label: String,
    /// Candidate ids, best first.
    pub ranked: Vec<usize>,
    pub utterance: String,
}

impl TrainedModel {
    pub fn variant(&self) -> VariantConfig {
        self.config.variant_config()
    }

    /// Metrics at the standard cutoffs [`REPORT_KS`].
    pub fn evaluate(&self, samples: &[TurnSample], opts: BleuOptions) -> Result<EvalReport> {
        evaluate(&self.params, &self.variant(), samples, &self.vocab.candidates, opts, &REPORT_KS)
    }

    /// Builds samples from `sessions` with this model's vocabularies and
    /// evaluates them at the given cutoffs.
    pub fn evaluate_sessions(&self, sessions: &[DialogueSession], opts: BleuOptions, ks: &[usize]) -> Result<EvalReport> {
        let set = build_samples(sessions, &self.vocab)?;
        evaluate(&self.params, &self.variant(), &set.samples, &self.vocab.candidates, opts, ks)
    }

    pub fn predict(&self, ctx: &DialogueContext) -> Result<Prediction> {
        let fwd = forward(ctx, &self.params, &self.variant())?;
        let ranked = fwd.ranked_candidates();
        let act_label = self.vocab.acts.label(fwd.predicted_act).unwrap_or_default().to_string();
        let utterance = self.vocab.candidates.utterance(ranked[0]).unwrap_or_default().to_string();
        Ok(Prediction {
            act: fwd.predicted_act,
            act_label,
            ranked,
            utterance,
        })
    }

    /// Predicts the system turn that follows `turns`.
    pub fn predict_next(&self, turns: &[Turn]) -> Result<Prediction> {
        self.predict(&context_from_turns(turns, &self.vocab)?)
    }
}

/// Context for predicting the turn after `turns`; the latest user turn is
/// the current utterance.
pub fn context_from_turns(turns: &[Turn], vocab: &Vocabularies) -> Result<DialogueContext> {
    let mut ctx = DialogueContext::default();
    let mut user = None;
    for t in turns {
        let act = vocab
            .acts
            .id(&t.act)
            .ok_or_else(|| Error::invalid(format!("act {:?} is not in the model vocabulary", t.act)))?;
        let mut ids = vocab.tokens.encode(&t.utterance);
        if ids.is_empty() {
            ids.push(0);
        }
        if t.speaker == Speaker::User {
            user = Some(ids.clone());
        }
        ctx.hist_acts.push(act);
        ctx.hist_utts.push(ids);
    }
    ctx.current_user_utt = user.ok_or_else(|| Error::invalid("context has no user turn"))?;
    Ok(ctx)
}

/// Act metrics and retrieval metrics at each cutoff in `ks`.
pub fn evaluate(
    params: &ModelParams,
    variant: &VariantConfig,
    samples: &[TurnSample],
    candidates: &CandidateSet,
    opts: BleuOptions,
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("cutoffs must be a non-empty list of positive k"));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut golds = Vec::with_capacity(samples.len());
    let mut ranked = Vec::with_capacity(samples.len());
    let mut top1_hits = 0usize;
    let keep = *ks.iter().max().expect("non-empty");
    for s in samples {
        let fwd = forward(&s.context, params, variant)?;
        let mut r = fwd.ranked_candidates();
        if s.gold.utt.is_some() && s.gold.utt == r.first().copied() {
            top1_hits += 1;
        }
        r.truncate(keep);
        preds.push(fwd.predicted_act);
        golds.push(s.gold.act);
        ranked.push(r);
    }
    let gold_tokens: Vec<Vec<String>> = samples.iter().map(|s| s.gold_tokens.clone()).collect();
    let mut report = EvalReport {
        samples: samples.len(),
        ..Default::default()
    };
    if samples.is_empty() {
        return Ok(report);
    }
    report.micro_f1 = micro_f1(&preds, &golds)?;
    report.macro_f1 = macro_f1_declared(&preds, &golds, params.dims.n_acts)?;
    report.per_class = per_class_scores(&preds, &golds, params.dims.n_acts)?;
    for &k in ks {
        let r = evaluate_retrieval(&ranked, &gold_tokens, candidates.tokens(), k, opts)?;
        report.retrieval.insert(k, r);
    }
    report.utterance_top1 = top1_hits as f64 / samples.len() as f64;
    Ok(report)
}

/// Splits session indices into `(train, held_out)` with `round(n * fraction)`
/// held out, chosen by a seeded shuffle. Both lists come back sorted.
pub fn split_sessions(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, SPLIT_STREAM).shuffle(&mut idx);
    let held = ((n as f64) * fraction).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let mut val = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn pick(sessions: &[DialogueSession], idx: &[usize]) -> Vec<DialogueSession> {
    idx.iter().map(|&i| sessions[i].clone()).collect()
}

/// Zeroes gradient rows of tokens that must keep their embedding.
fn mask_embedding_rows(grads: &mut ModelParams, frozen_rows: &[usize]) {
    for &r in frozen_rows {
        grads.embeddings.row_mut(r).fill(0.0);
    }
}

/// Samples per gradient work unit. Fixed, so the floating-point summation
/// order and therefore the result do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Worker threads for gradient computation: `ACTFLOW_THREADS` when set to a
/// positive number, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    match std::env::var("ACTFLOW_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn chunk_gradient(
    samples: &[&TurnSample],
    params: &ModelParams,
    variant: &VariantConfig,
    scale: f64,
    opts: BackwardOptions,
    grads: &mut ModelParams,
) -> Result<f64> {
    for t in grads.tensors_mut() {
        t.fill(0.0);
    }
    let mut loss = 0.0;
    for s in samples {
        let fwd = forward(&s.context, params, variant)?;
        loss += sample_loss(&fwd, &s.gold, variant)?;
        backward(&fwd, &s.gold, params, variant, scale, opts, grads)?;
    }
    Ok(loss)
}

/// Mean-loss gradient of `batch` into `out`; returns the summed sample loss.
fn batch_gradient(
    batch: &[&TurnSample],
    params: &ModelParams,
    variant: &VariantConfig,
    opts: BackwardOptions,
    threads: usize,
    buffers: &mut Vec<ModelParams>,
    out: &mut ModelParams,
) -> Result<f64> {
    let chunks: Vec<&[&TurnSample]> = batch.chunks(GRAD_CHUNK).collect();
    while buffers.len() < chunks.len() {
        buffers.push(params.zeros_like());
    }
    let bufs = &mut buffers[..chunks.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut results: Vec<Result<f64>> = (0..chunks.len()).map(|_| Ok(0.0)).collect();
    let workers = threads.clamp(1, chunks.len());
    if workers == 1 {
        for ((c, g), r) in chunks.iter().zip(bufs.iter_mut()).zip(results.iter_mut()) {
            *r = chunk_gradient(c, params, variant, scale, opts, g);
        }
    } else {
        type Job<'a, 'b> = (&'a [&'b TurnSample], &'a mut ModelParams, &'a mut Result<f64>);
        let mut groups: Vec<Vec<Job>> = (0..workers).map(|_| Vec::new()).collect();
        for (j, ((c, g), r)) in chunks.iter().zip(bufs.iter_mut()).zip(results.iter_mut()).enumerate() {
            groups[j % workers].push((c, g, r));
        }
        std::thread::scope(|scope| {
            for group in groups {
                scope.spawn(move || {
                    for (c, g, r) in group {
                        *r = chunk_gradient(c, params, variant, scale, opts, g);
                    }
                });
            }
        });
    }
    for t in out.tensors_mut() {
        t.fill(0.0);
    }
    let mut loss = 0.0;
    for (g, r) in bufs.iter().zip(results) {
        loss += r?;
        for (o, t) in out.tensors_mut().into_iter().zip(g.tensors()) {
            o.add_scaled(t, 1.0);
        }
    }
    Ok(loss)
}

/// Trains on `train` and reports progress on `val` after every epoch.
/// `observer` sees each epoch record as it is produced.
pub fn fit(
    cfg: &TrainConfig,
    vocab: &Vocabularies,
    embeddings: Option<crate::numerics::Tensor>,
    train: &[TurnSample],
    val: &[TurnSample],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if vocab.candidates.is_empty() {
        return Err(Error::invalid("no candidate responses in the training data"));
    }
    let variant = cfg.variant_config();
    let mut init_rng = Rng::derive(cfg.seed, INIT_STREAM);
    let mut params = ModelParams::init(cfg.dims(vocab), &variant, embeddings, &mut init_rng)?;
    let mut shuffle_rng = Rng::derive(cfg.seed, SHUFFLE_STREAM);
    let opts = BackwardOptions {
        embedding_grads: cfg.trainable_embeddings,
    };
    let frozen_rows: Vec<usize> = (0..vocab.tokens.len()).filter(|&i| vocab.tokens.is_oov(i)).collect();

    let threads = worker_threads();
    let mut buffers = Vec::new();
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.minibatch_size) {
            let samples: Vec<&TurnSample> = batch.iter().map(|&i| &train[i]).collect();
            total += batch_gradient(&samples, &params, &variant, opts, threads, &mut buffers, &mut grads)?;
            if cfg.trainable_embeddings {
                mask_embedding_rows(&mut grads, &frozen_rows);
            }
            sgd_step(&mut params, &grads, cfg.lr, cfg.clip_norm)?;
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("training loss became {loss} in epoch {epoch}")));
        }
        let (val_micro_f1, val_bleu4_cumu_at3) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&params, &variant, val, &vocab.candidates, BleuOptions::default(), &[3])?;
            (Some(r.micro_f1), r.retrieval.get(&3).map(|x| x.bleu4_cumu))
        };
        let record = EpochRecord {
            epoch,
            loss,
            val_micro_f1,
            val_bleu4_cumu_at3,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.push(record);
    }
    Ok(TrainedModel {
        config: cfg.clone(),
        vocab: vocab.clone(),
        params,
        history,
    })
}

/// Vocabularies from `sessions`, with OOV flags and initial embeddings from
/// the configured pretrained file when there is one.
pub fn prepare_vocab(
    cfg: &TrainConfig,
    sessions: &[DialogueSession],
) -> Result<(Vocabularies, Option<crate::numerics::Tensor>)> {
    let mut vocab = Vocabularies::from_sessions(sessions);
    let embeddings = match &cfg.embeddings {
        Some(path) => {
            let pre = load_pretrained_embeddings(path, &vocab.tokens, cfg.embed_dim)?;
            vocab.tokens.set_oov_flags(pre.oov)?;
            Some(pre.matrix)
        }
        None => None,
    };
    Ok((vocab, embeddings))
}

/// End-to-end training on raw sessions: dialogue-level validation split,
/// vocabularies over all given sessions, then [`fit`].
pub fn train(
    cfg: &TrainConfig,
    sessions: &[DialogueSession],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let (vocab, embeddings) = prepare_vocab(cfg, sessions)?;
    let (train_idx, val_idx) = split_sessions(sessions.len(), cfg.val_fraction, cfg.seed);
    let train_set = build_samples(&pick(sessions, &train_idx), &vocab)?;
    let val_set = build_samples(&pick(sessions, &val_idx), &vocab)?;
    fit(cfg, &vocab, embeddings, &train_set.samples, &val_set.samples, observer)
}

/// Per-fold reports with the mean and population standard deviation of
/// every flat metric.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<EvalReport>,
    pub mean: Vec<(String, f64)>,
    pub std: Vec<(String, f64)>,
}

impl CrossValReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for ((k, m), (_, d)) in self.mean.iter().zip(&self.std) {
            let _ = writeln!(s, "{k:<16} {m:.4} ± {d:.4}");
        }
        s
    }
}

/// Summarizes runs metric by metric.
pub fn mean_std(reports: &[EvalReport]) -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    let Some(first) = reports.first() else {
        return (Vec::new(), Vec::new());
    };
    let keys: Vec<String> = first.flat().into_iter().map(|(k, _)| k).collect();
    let n = reports.len() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, k) in keys.into_iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.flat()[i].1).collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push((k.clone(), m));
        std.push((k, var.sqrt()));
    }
    (mean, std)
}

/// K-fold cross-validation over whole dialogues. Each fold trains a fresh
/// model on the other folds (vocabularies included) and tests on its own.
pub fn cross_validate(
    cfg: &TrainConfig,
    sessions: &[DialogueSession],
    folds: usize,
    opts: BleuOptions,
) -> Result<CrossValReport> {
    if folds < 2 {
        return Err(Error::invalid(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    if folds > sessions.len() {
        return Err(Error::invalid(format!(
            "{folds} folds requested for {} dialogues",
            sessions.len()
        )));
    }
    let mut idx: Vec<usize> = (0..sessions.len()).collect();
    Rng::derive(cfg.seed, SPLIT_STREAM).shuffle(&mut idx);
    let mut reports = Vec::with_capacity(folds);
    for f in 0..folds {
        let lo = f * sessions.len() / folds;
        let hi = (f + 1) * sessions.len() / folds;
        let test: Vec<usize> = idx[lo..hi].to_vec();
        let rest: Vec<usize> = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
        let model = train(cfg, &pick(sessions, &rest), &mut |_| {})?;
        reports.push(model.evaluate_sessions(&pick(sessions, &test), opts, &REPORT_KS)?);
    }
    let (mean, std) = mean_std(&reports);
    Ok(CrossValReport {
        folds: reports,
        mean,
        std,
    })
}

/// Accuracy of always predicting the most frequent training act.
pub fn majority_baseline(train: &[TurnSample], test: &[TurnSample]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for s in train {
        *counts.entry(s.gold.act).or_insert(0usize) += 1;
    }
    // Ties go to the lowest act id.
    let majority = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&a, _)| a);
    if test.is_empty() {
        return 0.0;
    }
    test.iter().filter(|s| Some(s.gold.act) == majority).count() as f64 / test.len() as f64
}

/// One trained-and-tested point of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    /// Accuracy of the majority-act predictor on the same test split.
    pub majority: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn reports(&self, variant: Variant) -> Vec<EvalReport> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.report.clone())
            .collect()
    }

    /// Mean of one flat metric over the seeds of `variant`.
    pub fn mean(&self, variant: Variant, metric: &str) -> Option<f64> {
        let (mean, _) = mean_std(&self.reports(variant));
        mean.into_iter().find(|(k, _)| k == metric).map(|(_, v)| v)
    }

    pub fn mean_majority(&self) -> f64 {
        let seeds: Vec<&AblationRun> = match self.runs.first() {
            Some(first) => self.runs.iter().filter(|r| r.variant == first.variant).collect(),
            None => return 0.0,
        };
        seeds.iter().map(|r| r.majority).sum::<f64>() / seeds.len() as f64
    }

    /// Per-seed reports of one variant with their mean and standard deviation.
    pub fn variant_json(&self, variant: Variant) -> String {
        let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        let (mean, std) = mean_std(&self.reports(variant));
        let obj = |kv: Vec<(String, f64)>| -> serde_json::Map<String, serde_json::Value> {
            kv.into_iter().map(|(k, v)| (k, serde_json::json!(v))).collect()
        };
        let per_seed: Vec<serde_json::Value> = runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seed": r.seed,
                    "majority_micro_f1": r.majority,
                    "report": serde_json::from_str::<serde_json::Value>(&r.report.to_json()).expect("report is JSON"),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "variant": variant.name(),
            "mean": obj(mean),
            "std": obj(std),
            "runs": per_seed,
        });
        serde_json::to_string_pretty(&doc).expect("ablation report serializes")
    }

    const COLUMNS: [&'static str; 5] = ["micro_f1", "macro_f1", "bleu4_cumu@1", "bleu4_cumu@3", "bleu4_cumu@5"];

    /// Tab-separated mean and std per variant.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\truns");
        for c in Self::COLUMNS {
            let _ = write!(s, "\t{c}\t{c}_std");
        }
        s.push('\n');
        for v in self.variants() {
            let reports = self.reports(v);
            let (mean, std) = mean_std(&reports);
            let _ = write!(s, "{v}\t{}", reports.len());
            for c in Self::COLUMNS {
                let m = mean.iter().find(|(k, _)| k == c).map_or(f64::NAN, |x| x.1);
                let d = std.iter().find(|(k, _)| k == c).map_or(f64::NAN, |x| x.1);
                let _ = write!(s, "\t{m:.6}\t{d:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:<16}", "variant");
        for c in Self::COLUMNS {
            let _ = write!(s, " {c:>17}");
        }
        s.push('\n');
        for v in self.variants() {
            let (mean, std) = mean_std(&self.reports(v));
            let _ = write!(s, "{:<16}", v.name());
            for c in Self::COLUMNS {
                let m = mean.iter().find(|(k, _)| k == c).map_or(f64::NAN, |x| x.1);
                let d = std.iter().find(|(k, _)| k == c).map_or(f64::NAN, |x| x.1);
                let _ = write!(s, " {:>17}", format!("{m:.4} ± {d:.4}"));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "majority-act baseline micro_f1 {:.4}", self.mean_majority());
        s
    }
}

/// Trains every variant on the same dialogue-level split for each seed and
/// scores it on the held-out dialogues. The seed drives both the split and
/// the model.
pub fn ablate(
    cfg: &TrainConfig,
    sessions: &[DialogueSession],
    variants: &[Variant],
    seeds: &[u64],
    test_fraction: f64,
    opts: BleuOptions,
    observer: &mut dyn FnMut(&AblationRun),
) -> Result<AblationReport> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut out = AblationReport::default();
    for &seed in seeds {
        let (train_idx, test_idx) = split_sessions(sessions.len(), test_fraction, seed);
        if test_idx.is_empty() {
            return Err(Error::invalid("test split is empty; need more dialogues"));
        }
        let train_sessions = pick(sessions, &train_idx);
        let test_sessions = pick(sessions, &test_idx);
        for &variant in variants {
            let run_cfg = TrainConfig {
                variant,
                seed,
                ..cfg.clone()
            };
            let model = train(&run_cfg, &train_sessions, &mut |_| {})?;
            let train_samples = build_samples(&train_sessions, &model.vocab)?.samples;
            let test_samples = build_samples(&test_sessions, &model.vocab)?.samples;
            let run = AblationRun {
                variant,
                seed,
                report: model.evaluate(&test_samples, opts)?,
                majority: majority_baseline(&train_samples, &test_samples),
            };
            observer(&run);
            out.runs.push(run);
        }
    }
    Ok(out)
}
