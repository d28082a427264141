//! Deterministic synthetic multi-hop QA worlds.
//!
//! A world is a functional fact graph over named entities. Every fact becomes
//! one document ("The <relation> of <subject> is <object>.") and gets a few
//! distractor documents that mention the same subject and relation but never
//! the object. Questions chain relations ("What is the r2 of the r1 of E?")
//! and their gold answer is the end of the chain.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{apply_stops, GenerationRequest, Policy, PolicyError, PolicySample};
use crate::retrieval::Document;
use crate::rewards::QaExample;

const GREEK: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu", "nu", "xi",
    "omicron", "pi", "rho", "sigma", "tau", "upsilon", "phi", "chi", "psi", "omega",
];
const NUMBERS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];
const RELATIONS: [&str; 12] = [
    "home city",
    "chief rival",
    "first mentor",
    "closest ally",
    "business partner",
    "favorite author",
    "eldest sibling",
    "oldest friend",
    "main sponsor",
    "former coach",
    "lead designer",
    "best student",
];
const DISTRACTORS: [&str; 3] = [
    "Few surviving records describe the {r} of {e} in any useful detail.",
    "Scholars still argue about who was the {r} of {e} during those years.",
    "A rumor about the {r} of {e} spread widely but was never confirmed.",
];

pub const MAX_ENTITIES: usize = GREEK.len() * NUMBERS.len();
pub const MAX_RELATIONS: usize = RELATIONS.len();
pub const MAX_HOPS: u32 = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible world spec: {0}")]
    SpecInfeasible(String),
    #[error("question is not from this world: {0}")]
    UnknownQuestion(String),
}

pub fn entity_name(i: usize) -> String {
    format!("entity {} {}", GREEK[i % GREEK.len()], NUMBERS[i / GREEK.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Probability of each chain length.
    pub hop_weights: BTreeMap<u32, f64>,
    pub n_distractors_per_fact: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_entities: 50,
            n_relations: 6,
            hop_weights: BTreeMap::from([(1, 0.5), (2, 0.5)]),
            n_distractors_per_fact: 2,
            n_train: 200,
            n_test: 100,
            seed: 7,
        }
    }
}

/// Parses `1:0.5,2:0.5`.
pub fn parse_hop_weights(s: &str) -> Result<BTreeMap<u32, f64>, SynthError> {
    let mut out = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (h, w) = part
            .split_once(':')
            .ok_or_else(|| SynthError::SpecInfeasible(format!("bad hop weight `{part}`")))?;
        let h: u32 = h
            .trim()
            .parse()
            .map_err(|_| SynthError::SpecInfeasible(format!("bad hop `{h}`")))?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| SynthError::SpecInfeasible(format!("bad weight `{w}`")))?;
        out.insert(h, w);
    }
    Ok(out)
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecInfeasible(m));
        if self.n_entities < 4 || self.n_entities > MAX_ENTITIES {
            return bad(format!("n_entities must be in 4..={MAX_ENTITIES}"));
        }
        if self.n_relations == 0 || self.n_relations > MAX_RELATIONS {
            return bad(format!("n_relations must be in 1..={MAX_RELATIONS}"));
        }
        if self.hop_weights.is_empty() {
            return bad("no hop weights".into());
        }
        if let Some(h) = self.hop_weights.keys().find(|&&h| h == 0 || h > MAX_HOPS) {
            return bad(format!("hop depth {h} outside 1..={MAX_HOPS}"));
        }
        if self.hop_weights.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return bad("hop weights must be nonnegative".into());
        }
        let total: f64 = self.hop_weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("hop weights sum to {total}, not 1"));
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("The {} of {} is {}.", self.relation, self.subject, self.object)
    }
}

/// All fact sentences stated in `text`, in order.
pub fn parse_facts(text: &str) -> Vec<Fact> {
    static FACT: OnceLock<Regex> = OnceLock::new();
    let re = FACT.get_or_init(|| Regex::new(r"The ([^.]+?) of ([^.]+?) is ([^.]+?)\.").unwrap());
    re.captures_iter(text)
        .map(|c| Fact {
            relation: c[1].to_string(),
            subject: c[2].to_string(),
            object: c[3].to_string(),
        })
        .collect()
}

/// A relation-chain question. `relations[0]` is applied to the head first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainQuestion {
    pub head: String,
    pub relations: Vec<String>,
}

impl ChainQuestion {
    pub fn render(&self) -> String {
        let outer_first: Vec<&str> = self.relations.iter().rev().map(String::as_str).collect();
        format!("What is the {} of {}?", outer_first.join(" of the "), self.head)
    }

    pub fn parse(q: &str) -> Option<Self> {
        let body = q.strip_prefix("What is the ")?.strip_suffix('?')?;
        let mut parts: Vec<&str> = body.split(" of the ").collect();
        let last = parts.pop()?;
        let (inner, head) = last.split_once(" of ")?;
        parts.push(inner);
        if head.is_empty() || parts.iter().any(|p| p.is_empty()) {
            return None;
        }
        Some(ChainQuestion {
            head: head.to_string(),
            relations: parts.into_iter().rev().map(str::to_string).collect(),
        })
    }
}

/// Functional relation graph: at most one object per (subject, relation).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactGraph {
    objects: BTreeMap<(String, String), String>,
}

impl FactGraph {
    pub fn insert(&mut self, subject: &str, relation: &str, object: &str) -> bool {
        let key = (subject.to_string(), relation.to_string());
        if self.objects.contains_key(&key) {
            return false;
        }
        self.objects.insert(key, object.to_string());
        true
    }

    pub fn lookup(&self, subject: &str, relation: &str) -> Option<&str> {
        self.objects
            .get(&(subject.to_string(), relation.to_string()))
            .map(String::as_str)
    }

    pub fn facts(&self) -> impl Iterator<Item = Fact> + '_ {
        self.objects.iter().map(|((s, r), o)| Fact {
            subject: s.clone(),
            relation: r.clone(),
            object: o.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Entities visited when following `relations` from `head`, head first.
    pub fn chase(&self, head: &str, relations: &[String]) -> Option<Vec<String>> {
        let mut path = vec![head.to_string()];
        for r in relations {
            let next = self.lookup(path.last().unwrap(), r)?;
            path.push(next.to_string());
        }
        Some(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub facts: FactGraph,
    pub corpus: Vec<Document>,
    pub train: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

pub fn generate_world(spec: &WorldSpec) -> Result<World, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entities: Vec<String> = (0..spec.n_entities).map(entity_name).collect();
    let relations: Vec<String> = RELATIONS[..spec.n_relations].iter().map(|s| s.to_string()).collect();

    let mut facts = FactGraph::default();
    for e in &entities {
        for r in &relations {
            let obj = loop {
                let o = &entities[rng.gen_range(0..entities.len())];
                if o != e {
                    break o;
                }
            };
            facts.insert(e, r, obj);
        }
    }

    let mut corpus = Vec::new();
    for (i, fact) in facts.facts().enumerate() {
        corpus.push(Document::new(format!("fact-{i:04}"), &fact.subject, fact.sentence()));
        for j in 0..spec.n_distractors_per_fact {
            let template = DISTRACTORS[(i + j) % DISTRACTORS.len()];
            let body = template.replace("{r}", &fact.relation).replace("{e}", &fact.subject);
            corpus.push(Document::new(format!("distractor-{i:04}-{j}"), &fact.subject, body));
        }
    }

    let hop_choices: Vec<(u32, f64)> = spec.hop_weights.iter().map(|(&h, &w)| (h, w)).collect();
    let wanted = spec.n_train + spec.n_test;
    let mut seen = BTreeSet::new();
    let mut pool: Vec<(ChainQuestion, String)> = Vec::with_capacity(wanted);
    let max_attempts = 200 * wanted + 1000;
    let mut attempts = 0;
    while pool.len() < wanted {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::SpecInfeasible(format!(
                "could only build {} of {wanted} distinct answerable questions",
                pool.len()
            )));
        }
        let hops = sample_hops(&hop_choices, &mut rng);
        let head = entities[rng.gen_range(0..entities.len())].clone();
        let rels: Vec<String> = (0..hops)
            .map(|_| relations[rng.gen_range(0..relations.len())].clone())
            .collect();
        let Some(path) = facts.chase(&head, &rels) else {
            continue;
        };
        let distinct: BTreeSet<&String> = path.iter().collect();
        if distinct.len() != path.len() {
            continue;
        }
        let gold = path.last().unwrap().clone();
        if hops >= 2 && corpus.iter().any(|d| d.body.contains(&head) && d.body.contains(&gold)) {
            continue;
        }
        let q = ChainQuestion { head, relations: rels };
        if seen.insert(q.render()) {
            pool.push((q, gold));
        }
    }
    pool.shuffle(&mut rng);

    let to_example = |(i, (q, gold)): (usize, &(ChainQuestion, String)), split: &str| QaExample {
        id: format!("{split}-{i:04}"),
        question: q.render(),
        gold_answers: vec![gold.clone()],
        split: split.to_string(),
        hops: Some(q.relations.len() as u32),
    };
    let train = pool[..spec.n_train]
        .iter()
        .enumerate()
        .map(|p| to_example(p, "train"))
        .collect();
    let test = pool[spec.n_train..]
        .iter()
        .enumerate()
        .map(|p| to_example(p, "test"))
        .collect();

    Ok(World {
        spec: spec.clone(),
        entities,
        relations,
        facts,
        corpus,
        train,
        test,
    })
}

fn sample_hops(choices: &[(u32, f64)], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(h, w) in choices {
        acc += w;
        if u < acc {
            return h;
        }
    }
    choices.iter().rev().find(|(_, w)| *w > 0.0).map_or(1, |(h, _)| *h)
}

/// Follows the question's chain through the fact graph.
pub fn oracle_solve(facts: &FactGraph, question: &str) -> Result<String, SynthError> {
    let q = ChainQuestion::parse(question).ok_or_else(|| SynthError::UnknownQuestion(question.to_string()))?;
    facts
        .chase(&q.head, &q.relations)
        .map(|p| p.last().unwrap().clone())
        .ok_or_else(|| SynthError::UnknownQuestion(question.to_string()))
}

/// Scripted policy that knows the fact graph: one search per hop, a refine
/// stating each retrieved fact, then the answer.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    facts: FactGraph,
}

impl OraclePolicy {
    pub fn new(facts: FactGraph) -> Self {
        OraclePolicy { facts }
    }

    fn segment(&self, question: &str, turn: usize, allow_refine: bool) -> String {
        let Some(q) = ChainQuestion::parse(question) else {
            return "<answer> unknown </answer>".to_string();
        };
        let Some(path) = self.facts.chase(&q.head, &q.relations) else {
            return "<answer> unknown </answer>".to_string();
        };
        let mut out = String::new();
        if turn == 0 {
            out.push_str("<think> I will resolve the question one relation at a time. </think>");
        } else if allow_refine {
            let hop = (turn - 1).min(q.relations.len() - 1);
            let fact = Fact {
                subject: path[hop].clone(),
                relation: q.relations[hop].clone(),
                object: path[hop + 1].clone(),
            };
            out.push_str(&format!("<refine> {} </refine>", fact.sentence()));
        }
        if turn < q.relations.len() {
            out.push_str(&format!("<search> {} of {} </search>", q.relations[turn], path[turn]));
        } else {
            out.push_str(&format!("<answer> {} </answer>", path.last().unwrap()));
        }
        out
    }
}

impl Policy for OraclePolicy {
    fn generate(&self, req: &GenerationRequest, _rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        req.validate()?;
        let turn = req.response().matches("<documents>").count();
        let segment = self.segment(&req.question, turn, req.allow_refine);
        let (text, stop_hit) = apply_stops(&segment, &req.stop_sequences, req.max_new_tokens);
        Ok(PolicySample {
            text: text.to_string(),
            stop_hit,
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_do_not_contain_each_other() {
        let names: Vec<String> = (0..MAX_ENTITIES).map(entity_name).collect();
        for a in &names {
            for b in &names {
                if a != b {
                    assert!(!b.contains(a.as_str()), "{a} inside {b}");
                }
            }
        }
        for r in RELATIONS {
            assert!(!r.contains(" of ") && !r.contains(" is ") && r.contains(' '));
        }
    }

    #[test]
    fn question_roundtrip() {
        let q = ChainQuestion {
            head: "entity alpha one".into(),
            relations: vec!["chief rival".into(), "home city".into()],
        };
        let text = q.render();
        assert_eq!(text, "What is the home city of the chief rival of entity alpha one?");
        assert_eq!(ChainQuestion::parse(&text), Some(q));
        assert_eq!(
            ChainQuestion::parse("What is the home city of entity beta two?")
                .unwrap()
                .relations,
            vec!["home city".to_string()]
        );
        assert_eq!(ChainQuestion::parse("Who painted it?"), None);
    }

    #[test]
    fn fact_sentences_parse() {
        let f = Fact {
            subject: "entity alpha one".into(),
            relation: "home city".into(),
            object: "entity beta two".into(),
        };
        assert_eq!(parse_facts(&format!("x {} y", f.sentence())), vec![f]);
        for t in DISTRACTORS {
            assert!(parse_facts(&t.replace("{r}", "home city").replace("{e}", "entity alpha one")).is_empty());
        }
    }

    #[test]
    fn one_and_two_hop_construction() {
        let mut g = FactGraph::default();
        g.insert("e1", "r1", "e2");
        g.insert("e2", "r2", "e3");
        assert!(!g.insert("e1", "r1", "e3"));
        assert_eq!(oracle_solve(&g, "What is the r1 of e1?").unwrap(), "e2");
        assert_eq!(oracle_solve(&g, "What is the r2 of the r1 of e1?").unwrap(), "e3");
        assert!(matches!(
            oracle_solve(&g, "What is the r9 of e1?"),
            Err(SynthError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn three_hop_matches_brute_force_chase() {
        let spec = WorldSpec {
            hop_weights: BTreeMap::from([(3, 1.0)]),
            n_train: 20,
            n_test: 20,
            ..Default::default()
        };
        let w = generate_world(&spec).unwrap();
        let triples: Vec<Fact> = w.facts.facts().collect();
        for q in w.train.iter().chain(&w.test) {
            let cq = ChainQuestion::parse(&q.question).unwrap();
            let mut cur = cq.head.clone();
            for r in &cq.relations {
                cur = triples
                    .iter()
                    .find(|f| f.subject == cur && &f.relation == r)
                    .unwrap()
                    .object
                    .clone();
            }
            assert_eq!(cur, q.gold_answers[0]);
            assert_eq!(oracle_solve(&w.facts, &q.question).unwrap(), cur);
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let spec = WorldSpec::default();
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&spec).unwrap();
        assert_eq!(a, b);
        let train: BTreeSet<&str> = a.train.iter().map(|q| q.question.as_str()).collect();
        assert!(a.test.iter().all(|q| !train.contains(q.question.as_str())));
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.test.len(), 100);
        let c = generate_world(&WorldSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn distractors_never_name_the_object() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        for d in w.corpus.iter().filter(|d| d.id.starts_with("distractor")) {
            assert_eq!(d.body.matches("entity ").count(), 1, "{}", d.body);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = |f: fn(&mut WorldSpec)| {
            let mut s = WorldSpec::default();
            f(&mut s);
            matches!(generate_world(&s), Err(SynthError::SpecInfeasible(_)))
        };
        assert!(bad(|s| s.hop_weights = BTreeMap::from([(4, 1.0)])));
        assert!(bad(|s| s.hop_weights = BTreeMap::from([(1, 0.3)])));
        assert!(bad(|s| s.n_entities = 1000));
        // Five entities, one relation: far too few distinct questions.
        assert!(bad(|s| {
            s.n_entities = 5;
            s.n_relations = 1;
        }));
        assert_eq!(
            parse_hop_weights("1:0.5, 2:0.5").unwrap(),
            BTreeMap::from([(1, 0.5), (2, 0.5)])
        );
        assert!(parse_hop_weights("1-0.5").is_err());
    }
}
