//! Templated multi-domain dialogue generator with forced cross-slot copies.
//!
//! A copy rule `target <- source` makes the target slot take the source
//! slot's value whenever both domains are active in a dialogue. The user
//! never states the copied value; they refer to it ("take me to the
//! restaurant"), so a tracker has to resolve it from the other slot.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Dialogue, DialogueState, Ontology, Result, Slot, Turn, DONTCARE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub name: String,
    /// How the slot is spoken in utterances; defaults to the name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub slots: Vec<SlotSpec>,
}

/// `target` takes the value of `source` (both qualified slot names).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyRule {
    pub target: String,
    pub source: String,
}

impl FromStr for CopyRule {
    type Err = CorpusError;

    /// Parses `target=source`.
    fn from_str(s: &str) -> Result<Self> {
        let (t, src) = s
            .split_once('=')
            .ok_or_else(|| CorpusError::Config(format!("copy rule {s:?} is not target=source")))?;
        let (t, src) = (t.trim(), src.trim());
        if t.is_empty() || src.is_empty() {
            return Err(CorpusError::Config(format!("copy rule {s:?} has an empty side")));
        }
        Ok(Self {
            target: t.to_lowercase(),
            source: src.to_lowercase(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub domains: Vec<DomainSpec>,
    pub copy_rules: Vec<CopyRule>,
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub max_domains: usize,
    /// Probability that a goal slot is included in a domain's goal.
    pub slot_rate: f64,
    pub dontcare_rate: f64,
    /// Probability of a later "actually, change X to Y" turn per domain.
    pub change_rate: f64,
    /// Probability that a copy-source value is offered by the system rather
    /// than stated by the user.
    pub offer_rate: f64,
}

fn slot(name: &str, phrase: Option<&str>, values: &[&str]) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        phrase: phrase.map(Into::into),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const PLACES: &[&str] = &[
    "the train station",
    "the airport",
    "the bus station",
    "the science park",
];

impl Default for SyntheticConfig {
    fn default() -> Self {
        let restaurant = DomainSpec {
            name: "restaurant".into(),
            slots: vec![
                slot(
                    "food",
                    None,
                    &["chinese", "italian", "indian", "british", "french", "thai", "korean", "mexican"],
                ),
                slot("area", None, AREAS),
                slot("pricerange", Some("price range"), PRICES),
                slot(
                    "name",
                    None,
                    &[
                        "charlie chan",
                        "golden wok",
                        "curry garden",
                        "la margherita",
                        "royal spice",
                        "bangkok city",
                        "the copper kettle",
                        "sala thong",
                    ],
                ),
            ],
        };
        let hotel = DomainSpec {
            name: "hotel".into(),
            slots: vec![
                slot("area", None, AREAS),
                slot("stars", None, &["2", "3", "4", "5"]),
                slot("pricerange", Some("price range"), PRICES),
                slot(
                    "name",
                    None,
                    &[
                        "acorn guest house",
                        "alpha milton",
                        "el shaddai",
                        "gonville hotel",
                        "lovell lodge",
                        "worth house",
                        "home from home",
                        "city centre north",
                    ],
                ),
            ],
        };
        let attraction = DomainSpec {
            name: "attraction".into(),
            slots: vec![
                slot("type", None, &["museum", "park", "theatre", "college", "pool"]),
                slot("area", None, AREAS),
            ],
        };
        let taxi = DomainSpec {
            name: "taxi".into(),
            slots: vec![
                slot("destination", None, PLACES),
                slot("departure", None, PLACES),
            ],
        };
        Self {
            domains: vec![restaurant, hotel, attraction, taxi],
            copy_rules: vec![
                CopyRule {
                    target: "taxi-destination".into(),
                    source: "restaurant-name".into(),
                },
                CopyRule {
                    target: "taxi-departure".into(),
                    source: "hotel-name".into(),
                },
            ],
            dialogues: 500,
            min_turns: 3,
            max_turns: 6,
            max_domains: 3,
            slot_rate: 0.6,
            dontcare_rate: 0.05,
            change_rate: 0.15,
            offer_rate: 0.5,
        }
    }
}

struct SlotRef<'a> {
    domain: usize,
    qualified: String,
    spec: &'a SlotSpec,
}

impl SyntheticConfig {
    fn slots(&self) -> Vec<SlotRef<'_>> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(d, dom)| {
                dom.slots.iter().map(move |s| SlotRef {
                    domain: d,
                    qualified: Slot::new(&dom.name, &s.name).qualified(),
                    spec: s,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CorpusError::Config(m));
        if self.domains.len() < 2 {
            return err("at least two domains are required".into());
        }
        for d in &self.domains {
            if d.slots.len() < 2 {
                return err(format!("domain {} declares fewer than two slots", d.name));
            }
            if let Some(s) = d.slots.iter().find(|s| s.values.is_empty()) {
                return err(format!("slot {}-{} has an empty value pool", d.name, s.name));
            }
        }
        let slots = self.slots();
        let find = |q: &str| slots.iter().find(|s| s.qualified == q);
        let mut targets = BTreeSet::new();
        for r in &self.copy_rules {
            let (Some(t), Some(s)) = (find(&r.target), find(&r.source)) else {
                return err(format!(
                    "copy rule {}={} references an undeclared slot",
                    r.target, r.source
                ));
            };
            if t.domain == s.domain {
                return err(format!("copy rule {}={} is not cross-domain", r.target, r.source));
            }
            if !targets.insert(r.target.clone()) {
                return err(format!("slot {} is the target of two rules", r.target));
            }
        }
        if let Some(r) = self.copy_rules.iter().find(|r| targets.contains(&r.source)) {
            return err(format!("copy rule source {} is itself a copy target", r.source));
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return err("turn range must satisfy 1 <= min_turns <= max_turns".into());
        }
        if self.max_domains == 0 {
            return err("max_domains must be at least 1".into());
        }
        for (name, p) in [
            ("slot_rate", self.slot_rate),
            ("dontcare_rate", self.dontcare_rate),
            ("change_rate", self.change_rate),
            ("offer_rate", self.offer_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must be a probability, got {p}"));
            }
        }
        Ok(())
    }

    fn ontology(&self) -> Result<Ontology> {
        let slots = self.slots();
        Ontology::new(slots.iter().map(|s| {
            let mut values = s.spec.values.clone();
            for r in self.copy_rules.iter().filter(|r| r.target == s.qualified) {
                let src = slots.iter().find(|x| x.qualified == r.source).expect("validated");
                values.extend(src.spec.values.iter().cloned());
            }
            let dom = &self.domains[s.domain].name;
            (Slot::new(dom, &s.spec.name), values)
        }))
    }
}

#[derive(Debug, Clone)]
enum ActKind {
    Inform,
    DontCare,
    Offer,
    /// Copied from a slot of the named domain.
    Refer(String),
    Change,
}

#[derive(Debug, Clone)]
struct Act {
    domain: usize,
    slot: String,
    phrase: String,
    value: String,
    kind: ActKind,
}

/// Generates a corpus. The output is a pure function of `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let ontology = cfg.ontology()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = cfg.slots();
    let dialogues = (0..cfg.dialogues)
        .map(|i| generate_dialogue(cfg, &slots, &mut rng, i))
        .collect();
    Ok(Corpus {
        ontology,
        dialogues,
    })
}

fn is_target_domain(cfg: &SyntheticConfig, slots: &[SlotRef<'_>], d: usize) -> bool {
    cfg.copy_rules
        .iter()
        .any(|r| slots.iter().any(|s| s.qualified == r.target && s.domain == d))
}

fn generate_dialogue(
    cfg: &SyntheticConfig,
    slots: &[SlotRef<'_>],
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Dialogue {
    let n_dom = cfg.domains.len();
    let k = rng.gen_range(1..=cfg.max_domains.min(n_dom));
    let mut chosen: Vec<usize> = sample(rng, n_dom, k).into_vec();
    chosen.sort_by_key(|&d| (is_target_domain(cfg, slots, d), d));
    let active: BTreeSet<usize> = chosen.iter().copied().collect();
    let domain_of = |q: &str| slots.iter().find(|s| s.qualified == q).map(|s| s.domain);

    let mut goal = DialogueState::new();
    let mut acts: Vec<Act> = Vec::new();
    for &d in &chosen {
        let mine: Vec<&SlotRef<'_>> = slots.iter().filter(|s| s.domain == d).collect();
        let mut include: Vec<bool> = mine.iter().map(|_| rng.gen_bool(cfg.slot_rate)).collect();
        for (i, s) in mine.iter().enumerate() {
            let is_live_source = cfg.copy_rules.iter().any(|r| {
                r.source == s.qualified && domain_of(&r.target).is_some_and(|t| active.contains(&t))
            });
            let is_live_target = cfg
                .copy_rules
                .iter()
                .any(|r| r.target == s.qualified && goal.get(&r.source) != super::NONE);
            if is_live_source || is_live_target {
                include[i] = true;
            }
        }
        if !include.iter().any(|&b| b) {
            let i = rng.gen_range(0..mine.len());
            include[i] = true;
        }
        let mut domain_acts = Vec::new();
        for (s, _) in mine.iter().zip(&include).filter(|(_, &inc)| inc) {
            let phrase = s.spec.phrase.clone().unwrap_or_else(|| s.spec.name.clone());
            let rule = cfg.copy_rules.iter().find(|r| r.target == s.qualified);
            let is_source = cfg.copy_rules.iter().any(|r| r.source == s.qualified);
            let (value, kind) = match rule {
                Some(r) if goal.get(&r.source) != super::NONE => {
                    let src_dom = &cfg.domains[domain_of(&r.source).expect("validated")].name;
                    (goal.get(&r.source).to_string(), ActKind::Refer(src_dom.clone()))
                }
                _ if !is_source && rule.is_none() && rng.gen_bool(cfg.dontcare_rate) => {
                    (DONTCARE.to_string(), ActKind::DontCare)
                }
                _ => {
                    let v = s.spec.values.choose(rng).expect("non-empty pool").clone();
                    let kind = if is_source && rng.gen_bool(cfg.offer_rate) {
                        ActKind::Offer
                    } else {
                        ActKind::Inform
                    };
                    (v, kind)
                }
            };
            goal.set(&s.qualified, &value);
            domain_acts.push(Act {
                domain: d,
                slot: s.qualified.clone(),
                phrase,
                value,
                kind,
            });
        }
        if rng.gen_bool(cfg.change_rate) {
            let candidates: Vec<&Act> = domain_acts
                .iter()
                .filter(|a| matches!(a.kind, ActKind::Inform))
                .filter(|a| {
                    !cfg.copy_rules
                        .iter()
                        .any(|r| r.source == a.slot || r.target == a.slot)
                })
                .collect();
            if let Some(a) = candidates.choose(rng) {
                let spec = slots.iter().find(|s| s.qualified == a.slot).expect("own slot").spec;
                let alternatives: Vec<&String> =
                    spec.values.iter().filter(|v| **v != a.value).collect();
                if let Some(v) = alternatives.choose(rng) {
                    let change = Act {
                        value: (*v).clone(),
                        kind: ActKind::Change,
                        ..(*a).clone()
                    };
                    goal.set(&change.slot, &change.value);
                    domain_acts.push(change);
                }
            }
        }
        acts.extend(domain_acts);
    }

    let target_turns = rng.gen_range(cfg.min_turns..=cfg.max_turns);
    let total = acts.len();
    let act_turns = total.min(target_turns);
    let mut groups: Vec<Vec<Act>> = vec![Vec::new(); act_turns];
    for (i, a) in acts.into_iter().enumerate() {
        groups[i * act_turns / total].push(a);
    }
    let mut turns = Vec::with_capacity(target_turns);
    let mut state = DialogueState::new();
    let mut introduced: BTreeSet<usize> = BTreeSet::new();
    for (t, group) in groups.iter().enumerate() {
        let (system, user) = render_turn(cfg, slots, group, t, &mut introduced, rng);
        for a in group {
            state.set(&a.slot, &a.value);
        }
        turns.push(Turn {
            system,
            user,
            state: state.clone(),
        });
    }
    while turns.len() < target_turns {
        let (system, user) = *[
            ("is there anything else i can help with ?", "no , that is all . thank you"),
            ("anything else today ?", "no thanks , goodbye"),
            ("can i help with anything else ?", "that will be all , thanks"),
        ]
        .choose(rng)
        .expect("non-empty");
        turns.push(Turn {
            system: system.into(),
            user: user.into(),
            state: state.clone(),
        });
    }
    Dialogue {
        id: format!("syn-{index:05}"),
        domains: chosen.iter().map(|&d| cfg.domains[d].name.clone()).collect(),
        turns,
    }
}

fn render_turn(
    cfg: &SyntheticConfig,
    slots: &[SlotRef<'_>],
    group: &[Act],
    turn: usize,
    introduced: &mut BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> (String, String) {
    let mut system: Vec<String> = Vec::new();
    let mut user: Vec<String> = Vec::new();
    if turn == 0 && rng.gen_bool(0.5) {
        system.push("hello , how can i help you ?".into());
    }
    for a in group {
        let domain = &cfg.domains[a.domain].name;
        let intro = introduced.insert(a.domain);
        match &a.kind {
            ActKind::Offer => {
                let pool = &slots
                    .iter()
                    .find(|s| s.qualified == a.slot)
                    .expect("own slot")
                    .spec
                    .values;
                let other = pool.iter().filter(|v| **v != a.value).collect::<Vec<_>>();
                match other.choose(rng) {
                    Some(o) if rng.gen_bool(0.5) => system.push(format!(
                        "{o} is fully booked , but {} fits your criterion .",
                        a.value
                    )),
                    _ => system.push(format!("{} fits your criterion .", a.value)),
                }
                if intro {
                    user.push(format!("i need a {domain} . yes , {} sounds good", a.value));
                } else {
                    user.push("yes , that sounds good".into());
                }
            }
            ActKind::Inform if intro => {
                user.push(format!("i need a {domain} with {} {}", a.phrase, a.value))
            }
            ActKind::Inform => {
                let tmpl = *["i want {p} {v}", "the {p} should be {v}", "{p} {v} please"]
                    .choose(rng)
                    .expect("non-empty");
                user.push(tmpl.replace("{p}", &a.phrase).replace("{v}", &a.value));
            }
            ActKind::DontCare => {
                if intro {
                    user.push(format!("i need a {domain}"));
                }
                user.push(format!("i do not care about the {}", a.phrase));
            }
            ActKind::Refer(src) => {
                if intro {
                    user.push(format!("i also need a {domain}"));
                }
                let sentence = match a.phrase.as_str() {
                    "destination" => format!("take me to the {src}"),
                    "departure" => format!("pick me up from the {src}"),
                    p => format!("the {p} is the same as the {src}"),
                };
                user.push(sentence);
            }
            ActKind::Change => {
                user.push(format!("actually , change the {} to {}", a.phrase, a.value));
            }
        }
    }
    if system.is_empty() && turn > 0 {
        let s = *["what else can i do for you ?", "okay , noted .", "sure , anything else ?"]
            .choose(rng)
            .expect("non-empty");
        system.push(s.into());
    }
    (system.join(" "), user.join(" . "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dialogues: usize) -> SyntheticConfig {
        SyntheticConfig {
            dialogues,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn copy_rule_parse() {
        let r: CopyRule = "taxi-destination=restaurant-name".parse().unwrap();
        assert_eq!(r.target, "taxi-destination");
        assert_eq!(r.source, "restaurant-name");
        assert!("taxi-destination".parse::<CopyRule>().is_err());
        assert!("=x".parse::<CopyRule>().is_err());
    }

    #[test]
    fn undeclared_rule_slot_is_config_error() {
        let mut cfg = small(1);
        cfg.copy_rules.push(CopyRule {
            target: "taxi-arriveby".into(),
            source: "restaurant-book time".into(),
        });
        assert!(matches!(
            generate_synthetic(&cfg, 0),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn needs_two_domains_with_two_slots() {
        let mut cfg = small(1);
        cfg.domains.truncate(1);
        cfg.copy_rules.clear();
        assert!(generate_synthetic(&cfg, 0).is_err());
        let mut cfg = small(1);
        cfg.domains[2].slots.truncate(1);
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small(40);
        let a = generate_synthetic(&cfg, 7).unwrap().to_json_string();
        let b = generate_synthetic(&cfg, 7).unwrap().to_json_string();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 8).unwrap().to_json_string();
        assert_ne!(a, c);
    }

    #[test]
    fn copy_rule_holds_in_final_state() {
        let cfg = small(300);
        let corpus = generate_synthetic(&cfg, 3).unwrap();
        let mut activated = 0;
        for d in &corpus.dialogues {
            let last = &d.turns.last().unwrap().state;
            for r in &cfg.copy_rules {
                let t_dom = super::super::slot_domain(&r.target);
                let s_dom = super::super::slot_domain(&r.source);
                if d.domains.contains(t_dom) && d.domains.contains(s_dom) {
                    activated += 1;
                    assert_ne!(last.get(&r.source), super::super::NONE, "{}", d.id);
                    assert_eq!(last.get(&r.target), last.get(&r.source), "{}", d.id);
                }
            }
        }
        assert!(activated > 30, "rules fired only {activated} times");
    }

    #[test]
    fn turn_counts_within_range_and_values_in_ontology() {
        let cfg = small(200);
        let corpus = generate_synthetic(&cfg, 11).unwrap();
        for d in &corpus.dialogues {
            assert!((cfg.min_turns..=cfg.max_turns).contains(&d.turns.len()), "{}", d.id);
            for t in &d.turns {
                for (s, v) in t.state.iter() {
                    let j = corpus.ontology.slot_index(s).unwrap();
                    assert!(corpus.ontology.value_index(j, v).is_some(), "{s}={v}");
                }
            }
        }
    }
}
