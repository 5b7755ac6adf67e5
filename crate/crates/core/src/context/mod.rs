//! Model input construction:
//! `[CLS] history prev_state [SEP] current_turn [SEP]`.
//!
//! The history is the concatenation of the most recent turns (system
//! response then user utterance). The previous state is serialized as
//! `slot value` pairs over non-none slots. Segment 0 spans `[CLS]` through
//! the first `[SEP]`, segment 1 the current turn and the final `[SEP]`.

mod vocab;

pub use vocab::{Vocabulary, CLS, PAD, SEP, UNK};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{DialogueState, Ontology, Turn};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("context needs {needed} tokens for state, current turn and specials but max_len is {max_len}")]
    Capacity { needed: usize, max_len: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("invalid history window {0:?}: expected \"full\" or a turn count")]
    Window(String),
}

pub type Result<T, E = ContextError> = std::result::Result<T, E>;

/// Lowercases and splits on whitespace and ASCII punctuation. Punctuation
/// marks become tokens of their own, except `-`, which joins words so that
/// qualified slot names such as `restaurant-food` stay single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() && ch != '-' {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Tokens of a turn: system response followed by user utterance.
pub fn turn_tokens(turn: &Turn) -> Vec<String> {
    let mut t = tokenize(&turn.system);
    t.extend(tokenize(&turn.user));
    t
}

/// `slot value` tokens for every non-none slot, in ontology order.
/// `dontcare` is serialized like any other value.
pub fn serialize_state(state: &DialogueState, ontology: &Ontology) -> Vec<String> {
    let mut out = Vec::new();
    for name in ontology.slot_names() {
        let value = state.get(name);
        if value != crate::corpus::NONE {
            out.extend(tokenize(name));
            out.extend(tokenize(value));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    History,
    PrevState,
    Current,
    Special,
    Pad,
}

/// How many previous turns enter the history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryWindow {
    #[default]
    Full,
    Turns(usize),
}

impl FromStr for HistoryWindow {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "all" => Ok(Self::Full),
            n => n
                .parse()
                .map(Self::Turns)
                .map_err(|_| ContextError::Window(s.to_string())),
        }
    }
}

impl Serialize for HistoryWindow {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Full => s.serialize_str("full"),
            Self::Turns(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for HistoryWindow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Self::Turns(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl fmt::Display for HistoryWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Turns(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub regions: Vec<Region>,
    /// `false` at padding positions.
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids of the positions tagged `region`, in order.
    pub fn region_ids(&self, region: Region) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.regions)
            .filter(|(_, r)| **r == region)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Right-pads to `len` with `[PAD]` positions that are masked out.
    pub fn pad_to(&mut self, len: usize, pad_id: usize) {
        while self.ids.len() < len {
            self.positions.push(self.ids.len());
            self.ids.push(pad_id);
            self.segments.push(0);
            self.regions.push(Region::Pad);
            self.mask.push(false);
        }
    }

    fn push(&mut self, id: usize, segment: usize, region: Region) {
        self.positions.push(self.ids.len());
        self.ids.push(id);
        self.segments.push(segment);
        self.regions.push(region);
        self.mask.push(true);
    }
}

/// Assembles the model input for one turn.
///
/// `history` holds the token lists of all previous turns, oldest first.
/// When the result would exceed `max_len`, whole turns are dropped from the
/// front of the history, then the oldest remaining turn is cut token-wise
/// from the left. State and current turn are never truncated.
pub fn assemble_context(
    vocab: &Vocabulary,
    history: &[Vec<String>],
    prev_state: &[String],
    current: &[String],
    window: HistoryWindow,
    max_len: usize,
) -> Result<TokenSequence> {
    let fixed = 3 + prev_state.len() + current.len();
    if fixed > max_len {
        return Err(ContextError::Capacity {
            needed: fixed,
            max_len,
        });
    }
    let take = match window {
        HistoryWindow::Full => history.len(),
        HistoryWindow::Turns(n) => n.min(history.len()),
    };
    let mut turns: Vec<&[String]> = history[history.len() - take..]
        .iter()
        .map(Vec::as_slice)
        .collect();
    let budget = max_len - fixed;
    let mut used: usize = turns.iter().map(|t| t.len()).sum();
    while used > budget && turns.len() > 1 {
        used -= turns.remove(0).len();
    }
    if used > budget {
        let t = turns[0];
        turns[0] = &t[used - budget..];
    }

    let mut seq = TokenSequence {
        ids: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        positions: Vec::with_capacity(max_len),
        regions: Vec::with_capacity(max_len),
        mask: Vec::with_capacity(max_len),
    };
    seq.push(vocab.cls_id(), 0, Region::Special);
    for t in &turns {
        for tok in t.iter() {
            seq.push(vocab.id(tok), 0, Region::History);
        }
    }
    for tok in prev_state {
        seq.push(vocab.id(tok), 0, Region::PrevState);
    }
    seq.push(vocab.sep_id(), 0, Region::Special);
    for tok in current {
        seq.push(vocab.id(tok), 1, Region::Current);
    }
    seq.push(vocab.sep_id(), 1, Region::Special);
    Ok(seq)
}

/// Builds the input for turn `t` (0-based) of a dialogue given the state
/// carried over from the previous turn.
pub fn context_for_turn(
    vocab: &Vocabulary,
    ontology: &Ontology,
    turns: &[Turn],
    t: usize,
    prev_state: &DialogueState,
    window: HistoryWindow,
    max_len: usize,
) -> Result<TokenSequence> {
    let history: Vec<Vec<String>> = turns[..t].iter().map(turn_tokens).collect();
    let state = serialize_state(prev_state, ontology);
    assemble_context(
        vocab,
        &history,
        &state,
        &turn_tokens(&turns[t]),
        window,
        max_len,
    )
}

/// Replaces history and current-turn tokens with `[UNK]` independently with
/// probability `rate`. The previous state and special tokens are untouched.
pub fn apply_word_dropout<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    unk_id: usize,
    rng: &mut R,
) -> TokenSequence {
    let mut out = seq.clone();
    if rate <= 0.0 {
        return out;
    }
    for (id, region) in out.ids.iter_mut().zip(&seq.regions) {
        if matches!(region, Region::History | Region::Current) && rng.gen_bool(rate) {
            *id = unk_id;
        }
    }
    out
}

/// Space-joined tokens.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}
