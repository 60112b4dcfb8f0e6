//! Act-classification F1 scores and sentence-level BLEU for retrieved
//! responses.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The `k` values reported for retrieval.
pub const REPORT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn check_lengths(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "need equal non-empty prediction and gold lists, got {} and {}",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`, zero when nothing was predicted or expected.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores for classes `0..n_classes`.
pub fn per_class_scores(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<ClassScores>> {
    check_lengths(preds, golds)?;
    let n = n_classes.max(preds.iter().chain(golds).map(|&c| c + 1).max().unwrap_or(0));
    let mut tp = vec![0; n];
    let mut fp = vec![0; n];
    let mut fn_ = vec![0; n];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    Ok((0..n)
        .map(|c| ClassScores {
            class: c,
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            f1: f1_from_counts(tp[c], fp[c], fn_[c]),
            support: tp[c] + fn_[c],
        })
        .collect())
}

/// F1 from counts pooled over all classes. For single-label predictions this
/// is exactly accuracy.
pub fn micro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let tp = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    let wrong = preds.len() - tp;
    // Every miss is one false positive and one false negative.
    Ok(f1_from_counts(tp, wrong, wrong))
}

/// Unweighted mean of per-class F1 over classes that occur in either list.
pub fn macro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    let scores = per_class_scores(preds, golds, 0)?;
    let present: Vec<f64> = scores
        .iter()
        .filter(|s| preds.contains(&s.class) || golds.contains(&s.class))
        .map(|s| s.f1)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Unweighted mean of per-class F1 over all `n_classes` declared classes;
/// classes that never occur count as zero.
pub fn macro_f1_declared(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    let scores = per_class_scores(preds, golds, n_classes)?;
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0)
}

/// Modified `n`-gram precision times the brevity penalty.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (m, total) = clipped_matches(candidate, reference, n);
    Ok(brevity_penalty(candidate.len(), reference.len()) * ratio(m, total))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothing {
    /// `(m + 1) / (t + 1)` for orders 2..4 whenever one of them has no match.
    #[default]
    PlusOne,
    /// Raw precisions; any zero order gives zero.
    None,
}

/// Geometric mean of the 1..4-gram precisions times the brevity penalty.
pub fn bleu4_cumulative<T: Eq + Hash>(candidate: &[T], reference: &[T], smoothing: Smoothing) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let counts: Vec<(usize, usize)> = (1..=4).map(|n| clipped_matches(candidate, reference, n)).collect();
    if counts[0].0 == 0 {
        return 0.0;
    }
    let smooth = smoothing == Smoothing::PlusOne && counts[1..].iter().any(|&(m, _)| m == 0);
    let mut log_sum = 0.0;
    for (i, &(m, t)) in counts.iter().enumerate() {
        let p = if i > 0 && smooth {
            (m + 1) as f64 / (t + 1) as f64
        } else if m == 0 {
            return 0.0;
        } else {
            m as f64 / t as f64
        };
        log_sum += 0.25 * p.ln();
    }
    brevity_penalty(candidate.len(), reference.len()) * log_sum.exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopKAggregation {
    /// Best score among the top-k candidates.
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuOptions {
    pub smoothing: Smoothing,
    pub aggregation: TopKAggregation,
}

/// Averaged BLEU of the retrieved top-k against the gold responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    /// BLEU@1..BLEU@4 (individual orders).
    pub bleu: [f64; 4],
    pub bleu4_cumu: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// For each sample, scores the first `k` ranked candidates against the gold
/// tokens and keeps the best (or mean) per metric independently, then
/// averages over samples. Samples with an empty gold or an empty ranking
/// are skipped. Rankings shorter than `k` use what they have.
pub fn evaluate_retrieval<T: Eq + Hash>(
    ranked: &[Vec<usize>],
    golds: &[Vec<T>],
    candidates: &[Vec<T>],
    k: usize,
    opts: BleuOptions,
) -> Result<RetrievalScores> {
    if ranked.len() != golds.len() {
        return Err(Error::invalid("one ranking per gold response required"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut out = RetrievalScores::default();
    let mut sums = [0.0; 5];
    for (ids, gold) in ranked.iter().zip(golds) {
        if gold.is_empty() || ids.is_empty() {
            out.skipped += 1;
            continue;
        }
        let mut per_metric = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for &id in ids.iter().take(k) {
            let cand = candidates
                .get(id)
                .ok_or_else(|| Error::invalid(format!("candidate id {id} out of range")))?;
            for n in 1..=4 {
                per_metric[n - 1].push(bleu_n(cand, gold, n)?);
            }
            per_metric[4].push(bleu4_cumulative(cand, gold, opts.smoothing));
        }
        for (s, scores) in sums.iter_mut().zip(&per_metric) {
            *s += match opts.aggregation {
                TopKAggregation::Max => scores.iter().copied().fold(0.0, f64::max),
                TopKAggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            };
        }
        out.samples += 1;
    }
    if out.samples > 0 {
        let n = out.samples as f64;
        for i in 0..4 {
            out.bleu[i] = sums[i] / n;
        }
        out.bleu4_cumu = sums[4] / n;
    }
    Ok(out)
}

/// Metrics for one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// Keyed by k.
    pub retrieval: BTreeMap<usize, RetrievalScores>,
    /// Fraction of samples whose top-ranked candidate is the gold response.
    pub utterance_top1: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Flat metric map with keys `micro_f1`, `macro_f1`, `bleu{1..4}@k` and
    /// `bleu4_cumu@k`.
    pub fn flat(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("micro_f1".to_string(), self.micro_f1),
            ("macro_f1".to_string(), self.macro_f1),
        ];
        for (k, r) in &self.retrieval {
            for n in 0..4 {
                out.push((format!("bleu{}@{k}", n + 1), r.bleu[n]));
            }
            out.push((format!("bleu4_cumu@{k}"), r.bleu4_cumu));
        }
        out
    }

    /// `key=value` lines in [`EvalReport::flat`] order.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let metrics: serde_json::Map<String, serde_json::Value> =
            self.flat().into_iter().map(|(k, v)| (k, serde_json::json!(v))).collect();
        let doc = serde_json::json!({
            "metrics": metrics,
            "samples": self.samples,
            "utterance_top1": self.utterance_top1,
            "per_class": self.per_class,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    /// Human-readable act and top-k utterance tables.
    pub fn render_table(&self, act_labels: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Act prediction ({} samples)", self.samples);
        let _ = writeln!(s, "  Micro-F1  {:.4}", self.micro_f1);
        let _ = writeln!(s, "  Macro-F1  {:.4}", self.macro_f1);
        let _ = writeln!(s, "  {:<20} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let name = act_labels.get(c.class).map(String::as_str).unwrap_or("?");
            let _ = writeln!(
                s,
                "  {:<20} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                name, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(s, "\nUtterance prediction (top-1 exact {:.4})", self.utterance_top1);
        let _ = writeln!(
            s,
            "  {:<6} {:>8} {:>8} {:>8} {:>8} {:>12}",
            "top@k", "BLEU@1", "BLEU@2", "BLEU@3", "BLEU@4", "BLEU@4(cumu)"
        );
        for (k, r) in &self.retrieval {
            let _ = writeln!(
                s,
                "  {:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12.4}",
                k, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.bleu4_cumu
            );
        }
        s
    }
}
