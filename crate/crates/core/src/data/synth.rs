//! Seeded synthetic dialogues from a Markov chain over acts.
//!
//! Each dialogue draws one row from every slot group as its goal. User turns
//! pick a template at random; system turns pick one determined by the goal,
//! so a system response is a function of its act and the dialogue's goal.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueSession, Speaker, Turn};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActSpec {
    pub name: String,
    pub speaker: Speaker,
    pub templates: Vec<String>,
}

/// Slots whose values are drawn together, one row per dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotGroup {
    pub names: Vec<String>,
    pub values: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub acts: Vec<ActSpec>,
    pub start: String,
    pub terminal: Vec<String>,
    /// Next-act probabilities per act. Terminal acts need no row.
    pub transitions: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub slots: Vec<SlotGroup>,
    pub max_turns: usize,
}

impl GeneratorSpec {
    /// A nine-act restaurant-search domain. Two user acts share identical
    /// surface forms, so telling them apart needs the act labels.
    pub fn restaurant() -> Self {
        serde_json::from_str(include_str!("../../assets/restaurant.json")).expect("bundled generator spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    fn act_index(&self, name: &str) -> Result<usize> {
        self.acts
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown act {name:?}")))
    }

    /// Checks the spec and resolves it into index form.
    fn compile(&self) -> Result<Compiled> {
        if self.acts.is_empty() {
            return Err(Error::invalid("generator needs at least one act"));
        }
        if self.max_turns == 0 {
            return Err(Error::invalid("max_turns must be positive"));
        }
        let mut names = HashSet::new();
        for a in &self.acts {
            if !names.insert(a.name.as_str()) {
                return Err(Error::invalid(format!("duplicate act {:?}", a.name)));
            }
            if a.templates.is_empty() {
                return Err(Error::invalid(format!("act {:?} has no templates", a.name)));
            }
        }
        let mut slot_names: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (g, group) in self.slots.iter().enumerate() {
            if group.values.is_empty() {
                return Err(Error::invalid(format!("slot group {g} has no values")));
            }
            for row in &group.values {
                if row.len() != group.names.len() {
                    return Err(Error::invalid(format!("slot group {g} has a row of the wrong width")));
                }
            }
            for (k, n) in group.names.iter().enumerate() {
                if slot_names.insert(n, (g, k)).is_some() {
                    return Err(Error::invalid(format!("duplicate slot {n:?}")));
                }
            }
        }
        let mut templates = Vec::with_capacity(self.acts.len());
        for a in &self.acts {
            let mut parsed = Vec::with_capacity(a.templates.len());
            for t in &a.templates {
                parsed.push(parse_template(t, &slot_names)?);
            }
            templates.push(parsed);
        }

        let start = self.act_index(&self.start)?;
        let mut terminal = vec![false; self.acts.len()];
        for t in &self.terminal {
            terminal[self.act_index(t)?] = true;
        }
        if !terminal.iter().any(|&t| t) {
            return Err(Error::invalid("generator needs at least one terminal act"));
        }

        let n = self.acts.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (from, row) in &self.transitions {
            let i = self.act_index(from)?;
            for (to, &p) in row {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::invalid(format!("transition {from}->{to} has probability {p}")));
                }
                rows[i][self.act_index(to)?] = p;
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            let ok = (sum - 1.0).abs() <= ROW_SUM_TOLERANCE || (terminal[i] && sum == 0.0);
            if !ok {
                return Err(Error::invalid(format!(
                    "transitions from {:?} sum to {sum}, expected 1",
                    self.acts[i].name
                )));
            }
        }

        let reach = |from: usize, forward: bool| -> Vec<bool> {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([from]);
            seen[from] = true;
            while let Some(a) = queue.pop_front() {
                for b in 0..n {
                    let p = if forward { rows[a][b] } else { rows[b][a] };
                    // Nothing leaves a terminal act.
                    let live = if forward { !terminal[a] } else { !terminal[b] };
                    if p > 0.0 && live && !seen[b] {
                        seen[b] = true;
                        queue.push_back(b);
                    }
                }
            }
            seen
        };
        let from_start = reach(start, true);
        for (i, a) in self.acts.iter().enumerate() {
            if terminal[i] && !from_start[i] {
                return Err(Error::invalid(format!("terminal act {:?} is unreachable from {:?}", a.name, self.start)));
            }
        }
        let mut can_finish = vec![false; n];
        for t in (0..n).filter(|&t| terminal[t]) {
            for (i, r) in reach(t, false).into_iter().enumerate() {
                can_finish[i] |= r;
            }
        }
        for (i, a) in self.acts.iter().enumerate() {
            if from_start[i] && !can_finish[i] {
                return Err(Error::invalid(format!("no terminal act is reachable from {:?}", a.name)));
            }
        }

        Ok(Compiled {
            start,
            terminal,
            rows,
            templates,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }
}

enum Piece {
    Text(String),
    Slot { group: usize, column: usize },
}

struct Compiled {
    start: usize,
    terminal: Vec<bool>,
    rows: Vec<Vec<f64>>,
    templates: Vec<Vec<Vec<Piece>>>,
}

fn parse_template(template: &str, slots: &BTreeMap<&str, (usize, usize)>) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::invalid(format!("unclosed placeholder in {template:?}")))?;
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let name = &rest[open + 1..close];
        let &(group, column) = slots
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown slot {name:?} in {template:?}")))?;
        pieces.push(Piece::Slot { group, column });
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

fn fill(pieces: &[Piece], spec: &GeneratorSpec, goal: &[usize]) -> String {
    let mut out = String::new();
    for p in pieces {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot { group, column } => out.push_str(&spec.slots[*group].values[goal[*group]][*column]),
        }
    }
    out
}

/// Generates `n` dialogues. Identical `(n, seed, spec)` give identical output.
pub fn synth_corpus(n: usize, seed: u64, spec: &GeneratorSpec) -> Result<Vec<DialogueSession>> {
    let compiled = spec.compile()?;
    let mut rng = Rng::seed(seed);
    let mut sessions = Vec::with_capacity(n);
    for d in 0..n {
        let goal: Vec<usize> = spec.slots.iter().map(|g| rng.below(g.values.len())).collect();
        let key = goal.first().copied().unwrap_or(0);
        let mut act = compiled.start;
        let mut turns = Vec::new();
        loop {
            let a = &spec.acts[act];
            let pool = &compiled.templates[act];
            let pick = match a.speaker {
                Speaker::User => rng.below(pool.len()),
                Speaker::System => key % pool.len(),
            };
            turns.push(Turn {
                speaker: a.speaker,
                act: a.name.clone(),
                utterance: fill(&pool[pick], spec, &goal),
            });
            if compiled.terminal[act] || turns.len() >= spec.max_turns {
                break;
            }
            act = rng.weighted(&compiled.rows[act]);
        }
        sessions.push(DialogueSession {
            session_id: format!("synth-{d:06}"),
            turns,
        });
    }
    Ok(sessions)
}

/// Shannon entropy in nats of the act distribution over all turns.
pub fn act_entropy(sessions: &[DialogueSession]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for t in sessions.iter().flat_map(|s| &s.turns) {
        *counts.entry(t.act.as_str()).or_default() += 1;
        total += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
