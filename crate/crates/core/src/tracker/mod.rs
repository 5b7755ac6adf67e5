//! Turn-by-turn inference with state carryover.
//!
//! At turn `t` the previous state fed to the model is either the model's
//! own prediction for turn `t-1` or the gold state (oracle mode). The full
//! state is re-predicted every turn.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{context_for_turn, HistoryWindow, TokenSequence, Vocabulary};
use crate::corpus::{Dialogue, DialogueState, Ontology};
use crate::model::{ModelError, StarModel};
use crate::tensor::Scalar;

const FORMAT: &str = "star-predictions";

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("dialogue {id}: {source}")]
    Dialogue { id: String, source: ModelError },
    #[error("model does not cover the ontology: {0}")]
    Incompatible(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T, E = TrackError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    #[default]
    PredictedPrevState,
    GroundTruthPrevState,
}

impl FromStr for TrackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "predicted" | "predicted_prev_state" => Ok(Self::PredictedPrevState),
            "oracle" | "ground-truth" | "ground_truth_prev_state" => Ok(Self::GroundTruthPrevState),
            _ => Err(format!("unknown track mode {s:?}")),
        }
    }
}

impl fmt::Display for TrackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PredictedPrevState => "predicted_prev_state",
            Self::GroundTruthPrevState => "ground_truth_prev_state",
        })
    }
}

/// One tracked turn. States omit none-valued slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    /// 1-based.
    pub turn: usize,
    pub predicted: DialogueState,
    pub gold: DialogueState,
    pub domains: Vec<String>,
}

/// First line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionHeader {
    pub format: String,
    pub mode: Option<TrackMode>,
    /// Ontology slot names in order.
    pub slots: Vec<String>,
}

impl PredictionHeader {
    pub fn new(mode: Option<TrackMode>, ontology: &Ontology) -> Self {
        Self {
            format: FORMAT.into(),
            mode,
            slots: ontology.slot_names().map(str::to_string).collect(),
        }
    }
}

pub struct Tracker<'a, T> {
    model: &'a StarModel<T>,
    vocab: &'a Vocabulary,
    ontology: &'a Ontology,
    window: HistoryWindow,
}

impl<'a, T: Scalar> Tracker<'a, T> {
    pub fn new(
        model: &'a StarModel<T>,
        vocab: &'a Vocabulary,
        ontology: &'a Ontology,
        window: HistoryWindow,
    ) -> Result<Self> {
        if !model.bank().covers(ontology) {
            return Err(TrackError::Incompatible(format!(
                "bank has {} slots, ontology {}",
                model.bank().num_slots(),
                ontology.num_slots()
            )));
        }
        if vocab.len() != model.config().vocab_size {
            return Err(TrackError::Incompatible(format!(
                "vocab of {} tokens for a model expecting {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            ontology,
            window,
        })
    }

    pub fn track_dialogue(&self, d: &Dialogue, mode: TrackMode) -> Result<Vec<PredictionRecord>> {
        self.track_dialogue_with(d, mode, &mut |_, _, _| {})
    }

    /// Like [`Tracker::track_dialogue`]; `hook(turn_index, input, predicted)`
    /// runs after each prediction and may rewrite the predicted state before
    /// it is recorded and carried over.
    pub fn track_dialogue_with(
        &self,
        d: &Dialogue,
        mode: TrackMode,
        hook: &mut dyn FnMut(usize, &TokenSequence, &mut DialogueState),
    ) -> Result<Vec<PredictionRecord>> {
        let err = |source| TrackError::Dialogue {
            id: d.id.clone(),
            source,
        };
        let domains: Vec<String> = d.domains.iter().cloned().collect();
        let mut prev = DialogueState::new();
        let mut out = Vec::with_capacity(d.turns.len());
        for (t, turn) in d.turns.iter().enumerate() {
            let seq = context_for_turn(
                self.vocab,
                self.ontology,
                &d.turns,
                t,
                &prev,
                self.window,
                self.model.config().max_len,
            )
            .map_err(|e| err(e.into()))?;
            let mut predicted = self.model.forward_turn(&seq).map_err(err)?.state(self.ontology);
            hook(t, &seq, &mut predicted);
            prev = match mode {
                TrackMode::PredictedPrevState => predicted.clone(),
                TrackMode::GroundTruthPrevState => turn.state.clone(),
            };
            out.push(PredictionRecord {
                dialogue_id: d.id.clone(),
                turn: t + 1,
                predicted,
                gold: turn.state.clone(),
                domains: domains.clone(),
            });
        }
        Ok(out)
    }

    /// Tracks every dialogue on `workers` threads (0 uses every core).
    /// Records are ordered by dialogue id, then turn, regardless of the
    /// worker count.
    pub fn batch_track(
        &self,
        dialogues: &[Dialogue],
        mode: TrackMode,
        workers: usize,
    ) -> Result<Vec<PredictionRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrackError::Pool(e.to_string()))?;
        let per: Vec<Vec<PredictionRecord>> = pool.install(|| {
            dialogues
                .par_iter()
                .map(|d| self.track_dialogue(d, mode))
                .collect::<Result<_>>()
        })?;
        let mut all: Vec<PredictionRecord> = per.into_iter().flatten().collect();
        all.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id).then(a.turn.cmp(&b.turn)));
        Ok(all)
    }
}

pub fn write_predictions<W: Write>(
    mut w: W,
    header: &PredictionHeader,
    records: &[PredictionRecord],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn predictions_to_string(header: &PredictionHeader, records: &[PredictionRecord]) -> String {
    let mut buf = Vec::new();
    write_predictions(&mut buf, header, records).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn normalized(s: &DialogueState) -> DialogueState {
    s.iter().collect()
}

/// Parses a predictions file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_predictions<R: BufRead>(r: R) -> Result<(PredictionHeader, Vec<PredictionRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| TrackError::Parse {
            line: n,
            msg: e.to_string(),
        };
        if header.is_none() {
            let h: PredictionHeader = serde_json::from_str(&line).map_err(parse_err)?;
            if h.format != FORMAT {
                return Err(TrackError::Parse {
                    line: n,
                    msg: format!("expected format {FORMAT:?}, found {:?}", h.format),
                });
            }
            header = Some(h);
            continue;
        }
        let mut rec: PredictionRecord = serde_json::from_str(&line).map_err(parse_err)?;
        if rec.turn == 0 {
            return Err(TrackError::Parse {
                line: n,
                msg: "turn numbers start at 1".into(),
            });
        }
        rec.predicted = normalized(&rec.predicted);
        rec.gold = normalized(&rec.gold);
        records.push(rec);
    }
    let header = header.ok_or(TrackError::Parse {
        line: 1,
        msg: "missing header line".into(),
    })?;
    Ok((header, records))
}

pub fn parse_predictions(text: &str) -> Result<(PredictionHeader, Vec<PredictionRecord>)> {
    read_predictions(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, turn: usize) -> PredictionRecord {
        PredictionRecord {
            dialogue_id: id.into(),
            turn,
            predicted: [("hotel-area", "west")].into_iter().collect(),
            gold: DialogueState::new(),
            domains: vec!["hotel".into()],
        }
    }

    fn header() -> PredictionHeader {
        PredictionHeader {
            format: FORMAT.into(),
            mode: Some(TrackMode::PredictedPrevState),
            slots: vec!["hotel-area".into()],
        }
    }

    #[test]
    fn round_trip() {
        let recs = vec![rec("a", 1), rec("a", 2)];
        let text = predictions_to_string(&header(), &recs);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().contains(r#""gold":{}"#));
        assert_eq!(parse_predictions(&text).unwrap(), (header(), recs));
    }

    #[test]
    fn bad_line_is_named() {
        let mut text = predictions_to_string(&header(), &[rec("a", 1)]);
        text.push_str("{\"dialogue_id\": 3}\n");
        match parse_predictions(&text) {
            Err(TrackError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_predictions(""), Err(TrackError::Parse { .. })));
    }

    #[test]
    fn none_values_are_dropped_on_read() {
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&header()).unwrap(),
            r#"{"dialogue_id":"x","turn":1,"predicted":{"hotel-area":"none"},"gold":{},"domains":[]}"#
        );
        let (_, recs) = parse_predictions(&text).unwrap();
        assert!(recs[0].predicted.is_empty());
    }

    #[test]
    fn mode_names() {
        assert_eq!("oracle".parse::<TrackMode>().unwrap(), TrackMode::GroundTruthPrevState);
        assert_eq!(
            TrackMode::PredictedPrevState.to_string().parse::<TrackMode>().unwrap(),
            TrackMode::PredictedPrevState
        );
    }
}
