use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::{tokenize, ContextError, Result};
use crate::corpus::{Corpus, Ontology};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Token to id mapping. Serialized as one token per line; the line number
/// is the id. The four special tokens occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by the given tokens, sorted and deduplicated.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        let all = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Self::from_list(all).expect("specials present and tokens unique")
    }

    /// Every token of the corpus text plus slot names and candidate values.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut toks = ontology_tokens(&corpus.ontology);
        for d in &corpus.dialogues {
            for t in &d.turns {
                toks.extend(tokenize(&t.system));
                toks.extend(tokenize(&t.user));
            }
        }
        Self::from_tokens(toks)
    }

    /// Tokens in id order; the specials must come first.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(ContextError::Vocabulary(format!(
                    "line {}: token must be non-empty without whitespace",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(ContextError::Vocabulary(format!(
                    "line {}: duplicate token {t:?}",
                    i + 1
                )));
            }
        }
        for (id, s) in SPECIALS.iter().enumerate() {
            if index.get(*s) != Some(&id) {
                return Err(ContextError::Vocabulary(format!(
                    "special token {s} must be on line {}",
                    id + 1
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        Self::from_list(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ContextError::Vocabulary(format!("{}: {e}", path.display())))?;
        Self::from_file_str(&text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the `[UNK]` id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn cls_id(&self) -> usize {
        2
    }

    pub fn sep_id(&self) -> usize {
        3
    }
}

fn ontology_tokens(ontology: &Ontology) -> Vec<String> {
    let mut toks = Vec::new();
    for space in ontology.spaces() {
        toks.extend(tokenize(&space.qualified));
        for v in &space.values {
            toks.extend(tokenize(v));
        }
    }
    toks
}
