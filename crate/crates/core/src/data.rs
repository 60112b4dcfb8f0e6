//! Corpus files, vocabularies, candidate responses and per-turn samples.
//!
//! A corpus is newline-delimited JSON, one session per line:
//!
//! ```text
//! {"session_id":"s1","turns":[{"speaker":"user","act":"inform","utterance":"cheap food"}, ...]}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{normalize, tokenize, ActVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::model::{DialogueContext, Gold};
use crate::numerics::Tensor;

pub mod synth;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: Speaker,
    pub act: String,
    pub utterance: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSession {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

/// Parses a corpus stream. Blank lines are ignored; line numbers in errors
/// are 1-based.
pub fn read_corpus<R: Read>(reader: R) -> Result<Vec<DialogueSession>> {
    let mut sessions = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session: DialogueSession = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if session.turns.is_empty() {
            return Err(Error::parse(i + 1, format!("session {:?} has no turns", session.session_id)));
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DialogueSession>> {
    read_corpus(File::open(path)?)
}

pub fn write_corpus<W: Write>(sessions: &[DialogueSession], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for s in sessions {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(sessions: &[DialogueSession], path: impl AsRef<Path>) -> Result<()> {
    write_corpus(sessions, File::create(path)?)
}

/// Distinct normalized system utterances, ids in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    utterances: Vec<String>,
    tokens: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl CandidateSet {
    pub fn from_sessions(sessions: &[DialogueSession]) -> Self {
        Self::from_utterances(
            sessions
                .iter()
                .flat_map(|s| &s.turns)
                .filter(|t| t.speaker == Speaker::System)
                .map(|t| t.utterance.as_str()),
        )
    }

    pub fn from_utterances<'a, I: IntoIterator<Item = &'a str>>(utterances: I) -> Self {
        let mut set = CandidateSet::default();
        for u in utterances {
            let n = normalize(u);
            if !set.index.contains_key(&n) {
                set.index.insert(n.clone(), set.utterances.len());
                set.tokens.push(tokenize(&n));
                set.utterances.push(n);
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Id of `utterance` after normalization.
    pub fn id(&self, utterance: &str) -> Option<usize> {
        self.index.get(&normalize(utterance)).copied()
    }

    pub fn utterance(&self, id: usize) -> Option<&str> {
        self.utterances.get(id).map(String::as_str)
    }

    pub fn utterances(&self) -> &[String] {
        &self.utterances
    }

    /// Tokenized candidates, indexed by id.
    pub fn tokens(&self) -> &[Vec<String>] {
        &self.tokens
    }
}

/// Everything frozen from a training split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabularies {
    pub acts: ActVocabulary,
    pub tokens: TokenVocabulary,
    pub candidates: CandidateSet,
}

impl Vocabularies {
    pub fn from_sessions(sessions: &[DialogueSession]) -> Self {
        let turns = || sessions.iter().flat_map(|s| &s.turns);
        Vocabularies {
            acts: ActVocabulary::from_labels(turns().map(|t| t.act.clone())),
            tokens: TokenVocabulary::from_texts(turns().map(|t| t.utterance.as_str())),
            candidates: CandidateSet::from_sessions(sessions),
        }
    }
}

/// One training or evaluation example: the context before a system turn and
/// that turn's act and response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    pub context: DialogueContext,
    pub gold: Gold,
    /// Normalized gold response tokens, kept for BLEU when the response is
    /// not a candidate.
    pub gold_tokens: Vec<String>,
    /// Index of the source session in the corpus slice.
    pub session: usize,
    /// Index of the gold turn within its session.
    pub turn: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<TurnSample>,
    /// System turns with no earlier user turn.
    pub skipped: usize,
}

fn encode_nonempty(tokens: &TokenVocabulary, text: &str) -> Vec<usize> {
    let ids = tokens.encode(text);
    // Empty turns still occupy a history position, as the unknown token.
    if ids.is_empty() {
        vec![0]
    } else {
        ids
    }
}

fn act_id(acts: &ActVocabulary, label: &str, session: &str) -> Result<usize> {
    acts.id(label)
        .ok_or_else(|| Error::invalid(format!("act {label:?} in session {session:?} is not in the training vocabulary")))
}

/// One sample per system turn that has at least one user turn before it.
/// History is every earlier turn; the current user utterance is the latest
/// user turn. Acts unseen in training are an error.
pub fn build_samples(sessions: &[DialogueSession], vocab: &Vocabularies) -> Result<SampleSet> {
    let mut out = SampleSet::default();
    for (si, session) in sessions.iter().enumerate() {
        let mut hist_acts = Vec::new();
        let mut hist_utts = Vec::new();
        let mut last_user: Option<Vec<usize>> = None;
        for (ti, turn) in session.turns.iter().enumerate() {
            let act = act_id(&vocab.acts, &turn.act, &session.session_id)?;
            let utt = encode_nonempty(&vocab.tokens, &turn.utterance);
            if turn.speaker == Speaker::System {
                match &last_user {
                    Some(user) => out.samples.push(TurnSample {
                        context: DialogueContext {
                            hist_acts: hist_acts.clone(),
                            hist_utts: hist_utts.clone(),
                            current_user_utt: user.clone(),
                        },
                        gold: Gold {
                            act,
                            utt: vocab.candidates.id(&turn.utterance),
                        },
                        gold_tokens: tokenize(&turn.utterance),
                        session: si,
                        turn: ti,
                    }),
                    None => out.skipped += 1,
                }
            } else {
                last_user = Some(utt.clone());
            }
            hist_acts.push(act);
            hist_utts.push(utt);
        }
    }
    Ok(out)
}

/// Pretrained vectors aligned to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedEmbeddings {
    /// `|V| x k`; rows of tokens missing from the file are zero.
    pub matrix: Tensor,
    pub oov: Vec<bool>,
    /// Fraction of vocabulary entries (excluding the unknown token) missing
    /// from the file.
    pub oov_rate: f64,
}

/// Reads `token v1 .. vk` lines. Every line must carry exactly `k` values.
pub fn read_pretrained_embeddings<R: Read>(reader: R, vocab: &TokenVocabulary, k: usize) -> Result<PretrainedEmbeddings> {
    if k == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let mut matrix = Tensor::zeros(vocab.len(), k);
    let mut found = vec![false; vocab.len()];
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default();
        let values: Vec<&str> = parts.collect();
        if values.len() != k {
            return Err(Error::parse(
                i + 1,
                format!("expected {k} values for {token:?}, found {}", values.len()),
            ));
        }
        let Some(id) = vocab.id(token) else { continue };
        if id == 0 || found[id] {
            continue;
        }
        for (j, v) in values.iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad number {v:?}")))?;
            if !x.is_finite() {
                return Err(Error::parse(i + 1, format!("non-finite value {v:?}")));
            }
            matrix.set(id, j, x);
        }
        found[id] = true;
    }
    let oov: Vec<bool> = found.iter().map(|f| !f).collect();
    let real = vocab.len() - 1;
    let missing = oov.iter().skip(1).filter(|&&o| o).count();
    Ok(PretrainedEmbeddings {
        matrix,
        oov,
        oov_rate: if real == 0 { 0.0 } else { missing as f64 / real as f64 },
    })
}

pub fn load_pretrained_embeddings(path: impl AsRef<Path>, vocab: &TokenVocabulary, k: usize) -> Result<PretrainedEmbeddings> {
    read_pretrained_embeddings(File::open(path)?, vocab, k)
}

/// Fraction of token occurrences in `sessions` that are out of vocabulary or
/// flagged OOV.
pub fn token_oov_rate(sessions: &[DialogueSession], vocab: &TokenVocabulary) -> f64 {
    let mut total = 0usize;
    let mut oov = 0usize;
    for t in sessions.iter().flat_map(|s| &s.turns) {
        for tok in tokenize(&t.utterance) {
            total += 1;
            if vocab.id(&tok).is_none_or(|id| vocab.is_oov(id)) {
                oov += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        oov as f64 / total as f64
    }
}

/// Corpus-level counts, comparable to published dataset statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub mean_turns: f64,
    pub mean_words_per_turn: f64,
    pub distinct_words: usize,
}

pub fn corpus_stats(sessions: &[DialogueSession]) -> CorpusStats {
    let turns: usize = sessions.iter().map(|s| s.turns.len()).sum();
    let mut words = 0usize;
    let mut distinct = std::collections::HashSet::new();
    for t in sessions.iter().flat_map(|s| &s.turns) {
        for w in tokenize(&t.utterance) {
            words += 1;
            distinct.insert(w);
        }
    }
    CorpusStats {
        dialogues: sessions.len(),
        mean_turns: if sessions.is_empty() { 0.0 } else { turns as f64 / sessions.len() as f64 },
        mean_words_per_turn: if turns == 0 { 0.0 } else { words as f64 / turns as f64 },
        distinct_words: distinct.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(speaker: Speaker, act: &str, utterance: &str) -> Turn {
        Turn {
            speaker,
            act: act.into(),
            utterance: utterance.into(),
        }
    }

    fn session(id: &str, turns: Vec<Turn>) -> DialogueSession {
        DialogueSession {
            session_id: id.into(),
            turns,
        }
    }

    fn alternating(n: usize) -> DialogueSession {
        let turns = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    turn(Speaker::User, "inform", &format!("user says {i}"))
                } else {
                    turn(Speaker::System, "reply", &format!("System  Says {i}"))
                }
            })
            .collect();
        session("alt", turns)
    }

    #[test]
    fn corpus_round_trip_preserves_order() {
        let sessions = vec![alternating(2), session("b", vec![turn(Speaker::System, "hi", "hello")])];
        let mut buf = Vec::new();
        write_corpus(&sessions, &mut buf).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, sessions);
    }

    #[test]
    fn empty_corpus() {
        assert!(read_corpus(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_location() {
        let text = "{\"session_id\":\"a\",\"turns\":[{\"speaker\":\"user\",\"act\":\"x\",\"utterance\":\"y\"}]}\n\
                    {\"session_id\":\"b\",\"turns\":[{\"speaker\":\"robot\",\"act\":\"x\",\"utterance\":\"y\"}]}\n";
        match read_corpus(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "{\"session_id\":\"a\",\"turns\":[{\"speaker\":\"user\",\"utterance\":\"y\"}]}\n";
        assert!(matches!(read_corpus(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn user_system_pair_gives_one_sample() {
        let s = vec![session(
            "x",
            vec![turn(Speaker::User, "inform", "cheap food"), turn(Speaker::System, "offer", "try this")],
        )];
        let vocab = Vocabularies::from_sessions(&s);
        let set = build_samples(&s, &vocab).unwrap();
        assert_eq!(set.samples.len(), 1);
        let sample = &set.samples[0];
        assert_eq!(sample.context.hist_acts, vec![0]);
        assert_eq!(sample.context.current_user_utt, sample.context.hist_utts[0]);
        assert_eq!(sample.gold, Gold { act: 1, utt: Some(0) });
    }

    #[test]
    fn four_alternating_turns_give_two_samples() {
        let s = vec![alternating(4)];
        let set = build_samples(&s, &Vocabularies::from_sessions(&s)).unwrap();
        assert_eq!(set.samples.len(), 2);
        for sample in &set.samples {
            assert_eq!(sample.context.hist_acts.len(), sample.context.hist_utts.len());
            assert_eq!(sample.context.hist_acts.len(), sample.turn);
        }
    }

    #[test]
    fn leading_system_turn_is_skipped() {
        let mut s = alternating(4);
        s.turns.insert(0, turn(Speaker::System, "welcome", "hello"));
        let s = vec![s];
        let set = build_samples(&s, &Vocabularies::from_sessions(&s)).unwrap();
        assert_eq!((set.samples.len(), set.skipped), (2, 1));
        assert_eq!(set.samples[0].context.hist_acts.len(), 2);
    }

    #[test]
    fn current_user_is_latest_user_turn() {
        let s = vec![session(
            "x",
            vec![
                turn(Speaker::User, "inform", "first"),
                turn(Speaker::User, "inform", "second"),
                turn(Speaker::System, "offer", "reply"),
            ],
        )];
        let vocab = Vocabularies::from_sessions(&s);
        let set = build_samples(&s, &vocab).unwrap();
        assert_eq!(set.samples[0].context.current_user_utt, vocab.tokens.encode("second"));
    }

    #[test]
    fn unseen_act_is_an_error() {
        let train = vec![alternating(2)];
        let vocab = Vocabularies::from_sessions(&train);
        let mut test = alternating(2);
        test.turns[1].act = "surprise".into();
        assert!(matches!(build_samples(&[test], &vocab), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unseen_gold_utterance_has_no_id() {
        let train = vec![alternating(2)];
        let vocab = Vocabularies::from_sessions(&train);
        let mut test = alternating(2);
        test.turns[1].utterance = "never heard before".into();
        let set = build_samples(&[test], &vocab).unwrap();
        assert_eq!(set.samples[0].gold.utt, None);
        assert_eq!(set.samples[0].gold_tokens, vec!["never", "heard", "before"]);
    }

    #[test]
    fn candidates_normalize_and_dedupe() {
        let c = CandidateSet::from_utterances(["Hello  there", "hello there", "bye"]);
        assert_eq!(c.len(), 2);
        assert_eq!(c.id("HELLO there"), Some(0));
        assert_eq!(c.tokens()[1], vec!["bye"]);
    }

    #[test]
    fn embeddings_missing_token_is_zero_and_oov() {
        let vocab = TokenVocabulary::from_texts(["a b"]);
        let e = read_pretrained_embeddings("a 1.0 2.0\nzzz 3 4\n".as_bytes(), &vocab, 2).unwrap();
        assert_eq!(e.matrix.row(1), &[1.0, 2.0]);
        assert_eq!(e.matrix.row(2), &[0.0, 0.0]);
        assert_eq!(e.oov, vec![true, false, true]);
        assert_eq!(e.oov_rate, 0.5);
    }

    #[test]
    fn embeddings_dimension_mismatch_names_line() {
        let vocab = TokenVocabulary::from_texts(["a b"]);
        let r = read_pretrained_embeddings("a 1 2 3\nb 1 2\n".as_bytes(), &vocab, 3);
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn token_level_oov_rate() {
        let s = vec![alternating(2)];
        let mut vocab = Vocabularies::from_sessions(&s).tokens;
        let mut flags = vec![false; vocab.len()];
        flags[0] = true;
        flags[vocab.id("says").unwrap()] = true;
        vocab.set_oov_flags(flags).unwrap();
        // "user says 0" + "system says 1": 2 of 6 tokens.
        assert!((token_oov_rate(&s, &vocab) - 1.0 / 3.0).abs() < 1e-15);
    }
}
