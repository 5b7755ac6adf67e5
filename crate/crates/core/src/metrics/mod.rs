//! Evaluation over prediction records.
//!
//! Every ratio carries its numerator and denominator. Groups with an empty
//! denominator are left out of reports instead of being reported as zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::slot_domain;
use crate::tracker::PredictionRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no prediction records")]
    Empty,
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: usize,
    pub total: usize,
    pub value: f64,
}

impl Ratio {
    /// `None` for an empty denominator.
    pub fn new(correct: usize, total: usize) -> Option<Self> {
        (total > 0).then(|| Self {
            correct,
            total,
            value: correct as f64 / total as f64,
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    correct: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.correct += ok as usize;
        self.total += 1;
    }

    fn ratio(self) -> Option<Ratio> {
        Ratio::new(self.correct, self.total)
    }
}

/// Slot accuracy denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Every turn of every dialogue.
    All,
    /// Only turns of dialogues whose domains include the slot's domain.
    DomainActive,
}

impl FromStr for Convention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "domain-active" | "domain_active" => Ok(Self::DomainActive),
            _ => Err(format!("unknown convention {s:?}")),
        }
    }
}

fn turn_correct(r: &PredictionRecord) -> bool {
    r.predicted == r.gold
}

fn active(r: &PredictionRecord, domain: &str) -> bool {
    r.domains.iter().any(|d| d == domain)
}

pub fn joint_goal_accuracy(records: &[PredictionRecord]) -> Result<Ratio> {
    let mut t = Tally::default();
    records.iter().for_each(|r| t.add(turn_correct(r)));
    t.ratio().ok_or(MetricsError::Empty)
}

/// JGA grouped by 1-based turn index.
pub fn per_turn_jga(records: &[PredictionRecord]) -> BTreeMap<usize, Ratio> {
    let mut groups: BTreeMap<usize, Tally> = BTreeMap::new();
    for r in records {
        groups.entry(r.turn).or_default().add(turn_correct(r));
    }
    groups
        .into_iter()
        .filter_map(|(k, t)| t.ratio().map(|r| (k, r)))
        .collect()
}

fn domains_of(slots: &[String]) -> BTreeSet<&str> {
    slots.iter().map(|s| slot_domain(s)).collect()
}

/// JGA restricted to `domain`'s slots over dialogues active in `domain`.
/// `slots` is the ontology slot list.
pub fn domain_jga(
    records: &[PredictionRecord],
    slots: &[String],
    domain: &str,
) -> Result<Option<Ratio>> {
    if !domains_of(slots).contains(domain) {
        return Err(MetricsError::UnknownDomain(domain.to_string()));
    }
    let mut t = Tally::default();
    for r in records.iter().filter(|r| active(r, domain)) {
        t.add(r.predicted.restrict_to_domain(domain) == r.gold.restrict_to_domain(domain));
    }
    Ok(t.ratio())
}

pub fn slot_accuracy(
    records: &[PredictionRecord],
    slots: &[String],
    slot: &str,
    convention: Convention,
) -> Result<Option<Ratio>> {
    if !slots.iter().any(|s| s == slot) {
        return Err(MetricsError::UnknownSlot(slot.to_string()));
    }
    let domain = slot_domain(slot);
    let mut t = Tally::default();
    for r in records {
        if convention == Convention::DomainActive && !active(r, domain) {
            continue;
        }
        t.add(r.predicted.get(slot) == r.gold.get(slot));
    }
    Ok(t.ratio())
}

/// `(single-domain, multi-domain)` JGA. Dialogues with no listed domain
/// belong to neither partition.
pub fn split_jga(records: &[PredictionRecord]) -> (Option<Ratio>, Option<Ratio>) {
    let (mut single, mut multi) = (Tally::default(), Tally::default());
    for r in records {
        match r.domains.len() {
            0 => {}
            1 => single.add(turn_correct(r)),
            _ => multi.add(turn_correct(r)),
        }
    }
    (single.ratio(), multi.ratio())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAccuracy {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub all: Option<Ratio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_active: Option<Ratio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub joint_goal_accuracy: Ratio,
    pub per_turn: BTreeMap<usize, Ratio>,
    pub per_domain: BTreeMap<String, Ratio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_domain: Option<Ratio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_domain: Option<Ratio>,
    pub slots: IndexMap<String, SlotAccuracy>,
}

impl MetricReport {
    pub fn compute(records: &[PredictionRecord], slots: &[String]) -> Result<Self> {
        let joint_goal_accuracy = joint_goal_accuracy(records)?;
        let mut per_domain = BTreeMap::new();
        for d in domains_of(slots) {
            if let Some(r) = domain_jga(records, slots, d)? {
                per_domain.insert(d.to_string(), r);
            }
        }
        let (single_domain, multi_domain) = split_jga(records);
        let mut slot_map = IndexMap::new();
        for s in slots {
            slot_map.insert(
                s.clone(),
                SlotAccuracy {
                    all: slot_accuracy(records, slots, s, Convention::All)?,
                    domain_active: slot_accuracy(records, slots, s, Convention::DomainActive)?,
                },
            );
        }
        Ok(Self {
            joint_goal_accuracy,
            per_turn: per_turn_jga(records),
            per_domain,
            single_domain,
            multi_domain,
            slots: slot_map,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `turn,correct,total,jga` rows.
    pub fn per_turn_csv(&self) -> String {
        let mut s = String::from("turn,correct,total,jga\n");
        for (t, r) in &self.per_turn {
            let _ = writeln!(s, "{t},{},{},{}", r.correct, r.total, r.value);
        }
        s
    }

    pub fn render(&self, kind: ReportKind, convention: Option<Convention>) -> String {
        let mut s = String::new();
        let width = self
            .slots
            .keys()
            .map(|k| k.len() + " [domain-active]".len())
            .chain(self.per_domain.keys().map(String::len))
            .fold(28, usize::max);
        let line = |s: &mut String, label: &str, r: &Ratio| {
            let _ = writeln!(
                s,
                "  {label:<width$} {:>7.2}%  ({}/{})",
                100.0 * r.value,
                r.correct,
                r.total
            );
        };
        let all = kind == ReportKind::All;
        if all || kind == ReportKind::Jga {
            s.push_str("joint goal accuracy\n");
            line(&mut s, "overall", &self.joint_goal_accuracy);
            if let Some(r) = &self.single_domain {
                line(&mut s, "single-domain", r);
            }
            if let Some(r) = &self.multi_domain {
                line(&mut s, "multi-domain", r);
            }
        }
        if all || kind == ReportKind::PerTurn {
            s.push_str("per-turn joint goal accuracy\n");
            for (t, r) in &self.per_turn {
                line(&mut s, &format!("turn {t}"), r);
            }
        }
        if all || kind == ReportKind::Domain {
            s.push_str("domain joint goal accuracy\n");
            for (d, r) in &self.per_domain {
                line(&mut s, d, r);
            }
        }
        if all || kind == ReportKind::Slot {
            s.push_str("slot accuracy\n");
            for (name, acc) in &self.slots {
                if convention != Some(Convention::DomainActive) {
                    if let Some(r) = &acc.all {
                        line(&mut s, &format!("{name} [all]"), r);
                    }
                }
                if convention != Some(Convention::All) {
                    if let Some(r) = &acc.domain_active {
                        line(&mut s, &format!("{name} [domain-active]"), r);
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    All,
    Jga,
    PerTurn,
    Domain,
    Slot,
}

impl FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "jga" => Ok(Self::Jga),
            "per-turn" => Ok(Self::PerTurn),
            "domain" => Ok(Self::Domain),
            "slot" => Ok(Self::Slot),
            _ => Err(format!("unknown report {s:?}")),
        }
    }
}
