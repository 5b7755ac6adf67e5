//! Dialogue corpus data model, JSON ingestion and ontology construction.

mod synthetic;

pub use synthetic::{generate_synthetic, CopyRule, DomainSpec, SlotSpec, SyntheticConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NONE: &str = "none";
pub const DONTCARE: &str = "dontcare";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<serde_json::Error> for CorpusError {
    fn from(e: serde_json::Error) -> Self {
        CorpusError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Lowercases and collapses runs of whitespace.
pub fn normalize_value(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub domain: String,
    pub name: String,
}

impl Slot {
    pub fn new(domain: &str, name: &str) -> Self {
        Self {
            domain: normalize_value(domain),
            name: normalize_value(name),
        }
    }

    /// Splits `domain-name` at the first hyphen.
    pub fn parse(qualified: &str) -> Option<Self> {
        let (d, n) = qualified.split_once('-')?;
        if d.trim().is_empty() || n.trim().is_empty() {
            return None;
        }
        Some(Self::new(d, n))
    }

    pub fn qualified(&self) -> String {
        format!("{}-{}", self.domain, self.name)
    }
}

/// Domain part of a qualified slot name.
pub fn slot_domain(qualified: &str) -> &str {
    qualified.split_once('-').map_or(qualified, |(d, _)| d)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpace {
    pub slot: Slot,
    pub qualified: String,
    pub values: Vec<String>,
}

/// Ordered slots and their candidate value spaces. Every space starts with
/// `none` and `dontcare`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    spaces: Vec<SlotSpace>,
    index: HashMap<String, usize>,
}

impl Ontology {
    /// Builds an ontology from slots and value lists. Slots keep declaration
    /// order; values keep first-appearance order after the two reserved
    /// entries.
    pub fn new<I, V>(slots: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Slot, V)>,
        V: IntoIterator<Item = String>,
    {
        let mut spaces: Vec<SlotSpace> = Vec::new();
        let mut index = HashMap::new();
        for (slot, values) in slots {
            let qualified = slot.qualified();
            if index.insert(qualified.clone(), spaces.len()).is_some() {
                return Err(CorpusError::Schema(format!("duplicate slot {qualified}")));
            }
            let mut space = SlotSpace {
                slot,
                qualified: qualified.clone(),
                values: vec![NONE.to_string(), DONTCARE.to_string()],
            };
            for v in values {
                let v = normalize_value(&v);
                if !v.is_empty() && !space.values.contains(&v) {
                    space.values.push(v);
                }
            }
            spaces.push(space);
        }
        if spaces.is_empty() {
            return Err(CorpusError::Schema("ontology declares no slots".into()));
        }
        Ok(Self { spaces, index })
    }

    pub fn num_slots(&self) -> usize {
        self.spaces.len()
    }

    pub fn spaces(&self) -> &[SlotSpace] {
        &self.spaces
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.spaces.iter().map(|s| s.qualified.as_str())
    }

    pub fn slot_index(&self, qualified: &str) -> Option<usize> {
        self.index.get(qualified).copied()
    }

    pub fn values(&self, slot: usize) -> &[String] {
        &self.spaces[slot].values
    }

    pub fn value_index(&self, slot: usize, value: &str) -> Option<usize> {
        self.spaces[slot].values.iter().position(|v| v == value)
    }

    /// Sorted, deduplicated domain names.
    pub fn domains(&self) -> Vec<String> {
        self.spaces
            .iter()
            .map(|s| s.slot.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Total number of candidate values over all slots.
    pub fn total_values(&self) -> usize {
        self.spaces.iter().map(|s| s.values.len()).sum()
    }

    fn add_value(&mut self, slot: usize, value: &str) {
        if !self.spaces[slot].values.iter().any(|v| v == value) {
            self.spaces[slot].values.push(value.to_string());
        }
    }

    /// Slot name to value list, in ontology order.
    pub fn export_map(&self) -> IndexMap<String, Vec<String>> {
        self.spaces
            .iter()
            .map(|s| (s.qualified.clone(), s.values.clone()))
            .collect()
    }

    pub fn from_export_map(map: IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut slots = Vec::with_capacity(map.len());
        for (name, values) in map {
            let slot = Slot::parse(&name)
                .ok_or_else(|| CorpusError::Schema(format!("bad slot name {name:?}")))?;
            slots.push((slot, values));
        }
        Self::new(slots)
    }

    /// `{"domain-slot": ["none", "dontcare", ...]}`.
    pub fn to_export_json(&self) -> String {
        serde_json::to_string_pretty(&self.export_map()).expect("ontology serializes")
    }

    pub fn from_export_json(text: &str) -> Result<Self> {
        Self::from_export_map(serde_json::from_str(text)?)
    }
}

/// Slot-value assignment. Absent slots are `none`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueState(BTreeMap<String, String>);

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, slot: &str) -> &str {
        self.0.get(slot).map_or(NONE, String::as_str)
    }

    /// Assigns a value; assigning `none` removes the slot.
    pub fn set(&mut self, slot: &str, value: &str) {
        let value = normalize_value(value);
        if value == NONE || value.is_empty() {
            self.0.remove(slot);
        } else {
            self.0.insert(slot.to_string(), value);
        }
    }

    /// Non-none entries in slot-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries whose slot belongs to `domain`.
    pub fn restrict_to_domain(&self, domain: &str) -> DialogueState {
        DialogueState(
            self.0
                .iter()
                .filter(|(k, _)| slot_domain(k) == domain)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }
}

impl<K: AsRef<str>, V: AsRef<str>> FromIterator<(K, V)> for DialogueState {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut s = DialogueState::new();
        for (k, v) in iter {
            s.set(k.as_ref(), v.as_ref());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub system: String,
    pub user: String,
    pub state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub domains: BTreeSet<String>,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotJson {
    domain: String,
    name: String,
    #[serde(default)]
    values: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnJson {
    #[serde(default)]
    system: String,
    user: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueJson {
    id: String,
    #[serde(default)]
    domains: Vec<String>,
    turns: Vec<TurnJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusJson {
    slots: Vec<SlotJson>,
    #[serde(default)]
    dialogues: Vec<DialogueJson>,
}

impl Corpus {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: CorpusJson = serde_json::from_str(text)?;
        let declared = raw
            .slots
            .into_iter()
            .map(|s| (Slot::new(&s.domain, &s.name), s.values));
        let mut ontology = Ontology::new(declared)?;

        let mut dialogues = Vec::with_capacity(raw.dialogues.len());
        for d in raw.dialogues {
            let mut turns = Vec::with_capacity(d.turns.len());
            for (t, turn) in d.turns.into_iter().enumerate() {
                let mut state = DialogueState::new();
                for (slot, value) in turn.state {
                    let slot = normalize_value(&slot);
                    let j = ontology.slot_index(&slot).ok_or_else(|| {
                        CorpusError::Schema(format!(
                            "dialogue {:?} turn {}: value annotated for unknown slot {slot:?}",
                            d.id,
                            t + 1
                        ))
                    })?;
                    let value = normalize_value(&value);
                    if value.is_empty() {
                        return Err(CorpusError::Schema(format!(
                            "dialogue {:?} turn {}: empty value for {slot}",
                            d.id,
                            t + 1
                        )));
                    }
                    ontology.add_value(j, &value);
                    state.set(&slot, &value);
                }
                turns.push(Turn {
                    system: turn.system,
                    user: turn.user,
                    state,
                });
            }
            dialogues.push(Dialogue {
                id: d.id,
                domains: d.domains.iter().map(|s| normalize_value(s)).collect(),
                turns,
            });
        }
        Ok(Self {
            ontology,
            dialogues,
        })
    }

    pub fn to_json_string(&self) -> String {
        let slots = self
            .ontology
            .spaces()
            .iter()
            .map(|s| SlotJson {
                domain: s.slot.domain.clone(),
                name: s.slot.name.clone(),
                values: s.values[2..].to_vec(),
            })
            .collect();
        let dialogues = self
            .dialogues
            .iter()
            .map(|d| DialogueJson {
                id: d.id.clone(),
                domains: d.domains.iter().cloned().collect(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnJson {
                        system: t.system.clone(),
                        user: t.user.clone(),
                        state: t.state.0.clone(),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&CorpusJson { slots, dialogues }).expect("corpus serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Same dialogues under a different ontology (e.g. the one from the
    /// training split). Fails if a gold value falls outside it.
    pub fn with_ontology(&self, ontology: &Ontology) -> Result<Self> {
        for d in &self.dialogues {
            for t in &d.turns {
                for (slot, value) in t.state.iter() {
                    let j = ontology.slot_index(slot).ok_or_else(|| {
                        CorpusError::Schema(format!("dialogue {:?}: unknown slot {slot}", d.id))
                    })?;
                    if ontology.value_index(j, value).is_none() {
                        return Err(CorpusError::Schema(format!(
                            "dialogue {:?}: value {value:?} not in ontology for {slot}",
                            d.id
                        )));
                    }
                }
            }
        }
        Ok(Self {
            ontology: ontology.clone(),
            dialogues: self.dialogues.clone(),
        })
    }

    /// Splits dialogues by count into consecutive parts with the given
    /// fractions; the last part takes the remainder. Every part keeps the
    /// full ontology.
    pub fn split(&self, fractions: &[f64]) -> Vec<Corpus> {
        let n = self.dialogues.len();
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i + 1 == fractions.len() {
                n
            } else {
                (start + (f * n as f64).round() as usize).min(n)
            };
            parts.push(Corpus {
                ontology: self.ontology.clone(),
                dialogues: self.dialogues[start..end].to_vec(),
            });
            start = end;
        }
        parts
    }

    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Corpus::from_json_str(&text)
}
