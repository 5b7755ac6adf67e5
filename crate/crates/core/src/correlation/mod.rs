//! Slot correlation via normalized mutual information between the value
//! partitions of two slots.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, NONE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorrelationError {
    #[error("label sequences differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("label sequences are empty")]
    Empty,
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("k must be at least 1")]
    ZeroK,
}

pub type Result<T, E = CorrelationError> = std::result::Result<T, E>;

fn entropy(counts: &[u64], n: u64) -> f64 {
    let n = n as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// `2 I(a;b) / (H(a) + H(b))` with natural logarithms. Two constant
/// partitions score 1.
///
/// Terms are summed in an order that depends only on the count structure,
/// so the result is exactly symmetric and invariant under relabeling.
pub fn nmi<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash,
    B: Eq + Hash,
{
    if a.len() != b.len() {
        return Err(CorrelationError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(CorrelationError::Empty);
    }
    let n = a.len() as u64;
    let mut ia: HashMap<&A, usize> = HashMap::new();
    let mut ib: HashMap<&B, usize> = HashMap::new();
    let mut ca: Vec<u64> = Vec::new();
    let mut cb: Vec<u64> = Vec::new();
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        let i = *ia.entry(x).or_insert_with(|| {
            ca.push(0);
            ca.len() - 1
        });
        let j = *ib.entry(y).or_insert_with(|| {
            cb.push(0);
            cb.len() - 1
        });
        ca[i] += 1;
        cb[j] += 1;
        *joint.entry((i, j)).or_default() += 1;
    }
    let mut terms: Vec<(u64, u64, u64)> = joint
        .iter()
        .map(|(&(i, j), &nij)| (nij, ca[i].min(cb[j]), ca[i].max(cb[j])))
        .collect();
    terms.sort_unstable();
    let nf = n as f64;
    let mi: f64 = terms
        .iter()
        .map(|&(nij, lo, hi)| {
            let ratio = (n * nij) as f64 / (lo * hi) as f64;
            nij as f64 / nf * ratio.ln()
        })
        .sum();
    ca.sort_unstable();
    cb.sort_unstable();
    let h = entropy(&ca, n) + entropy(&cb, n);
    if h == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * mi / h).max(0.0))
}

/// What counts as one sample when pairing two slots' values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleUnit {
    /// Every turn where both slots are non-none.
    #[default]
    Turn,
    /// The final state of each dialogue where both slots are non-none.
    FinalState,
}

impl FromStr for SampleUnit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "turn" => Ok(Self::Turn),
            "final-state" | "final_state" => Ok(Self::FinalState),
            _ => Err(format!("unknown sample unit {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub slot: String,
    /// `(other slot, NMI)`, highest first.
    pub entries: Vec<(String, f64)>,
    /// Pairs skipped for lack of samples.
    pub diagnostics: Vec<String>,
}

/// Label pairs for two slots under `unit`.
pub fn paired_labels<'c>(
    corpus: &'c Corpus,
    a: &str,
    b: &str,
    unit: SampleUnit,
) -> (Vec<&'c str>, Vec<&'c str>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in &corpus.dialogues {
        let states: Box<dyn Iterator<Item = _>> = match unit {
            SampleUnit::Turn => Box::new(d.turns.iter()),
            SampleUnit::FinalState => Box::new(d.turns.last().into_iter()),
        };
        for t in states {
            let (x, y) = (t.state.get(a), t.state.get(b));
            if x != NONE && y != NONE {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    (xs, ys)
}

/// The `k` slots most correlated with `slot`, excluding itself.
pub fn slot_correlation_topk(
    corpus: &Corpus,
    slot: &str,
    k: usize,
    unit: SampleUnit,
) -> Result<Ranking> {
    if k == 0 {
        return Err(CorrelationError::ZeroK);
    }
    if corpus.ontology.slot_index(slot).is_none() {
        return Err(CorrelationError::UnknownSlot(slot.to_string()));
    }
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    for other in corpus.ontology.slot_names().filter(|s| *s != slot) {
        let (xs, ys) = paired_labels(corpus, slot, other, unit);
        if xs.len() < 2 {
            diagnostics.push(format!(
                "{slot} / {other}: {} co-occurring samples, need 2",
                xs.len()
            ));
            continue;
        }
        entries.push((other.to_string(), nmi(&xs, &ys)?));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    Ok(Ranking {
        slot: slot.to_string(),
        entries,
        diagnostics,
    })
}

/// Rankings for every slot, or only `slot` when given.
pub fn analyze(
    corpus: &Corpus,
    slot: Option<&str>,
    k: usize,
    unit: SampleUnit,
) -> Result<Vec<Ranking>> {
    match slot {
        Some(s) => Ok(vec![slot_correlation_topk(corpus, s, k, unit)?]),
        None => corpus
            .ontology
            .slot_names()
            .map(|s| slot_correlation_topk(corpus, s, k, unit))
            .collect(),
    }
}

/// `{"slot": [["other-slot", nmi], ...]}`.
pub fn report_json(rankings: &[Ranking]) -> String {
    let map: IndexMap<&str, &[(String, f64)]> = rankings
        .iter()
        .map(|r| (r.slot.as_str(), r.entries.as_slice()))
        .collect();
    serde_json::to_string_pretty(&map).expect("report serializes")
}

/// Horizontal bar chart, one block per ranked slot.
pub fn render_bars(rankings: &[Ranking], width: usize) -> String {
    let mut s = String::new();
    for r in rankings {
        let _ = writeln!(s, "{}", r.slot);
        if r.entries.is_empty() {
            let _ = writeln!(s, "  (no co-occurring slots)");
        }
        let pad = r.entries.iter().map(|e| e.0.len()).max().unwrap_or(0);
        for (other, v) in &r.entries {
            let filled = (v * width as f64).round() as usize;
            let _ = writeln!(
                s,
                "  {other:<pad$} |{}{}| {v:.3}",
                "#".repeat(filled.min(width)),
                " ".repeat(width - filled.min(width)),
            );
        }
    }
    s
}
