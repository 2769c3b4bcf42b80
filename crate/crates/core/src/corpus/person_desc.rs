//! Person/description pairs in three subsets: description-first only,
//! person-first only, and both.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::names::{family_name, given_name, Namespace};
use super::{Dataset, Direction, EvalItem, Metric, TrainItem};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Counts {
    pub persons: usize,
    pub train_templates: usize,
    pub test_templates: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts { persons: 30, train_templates: 30, test_templates: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    D1,
    D2,
    D3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdDirection {
    Person2desc,
    Desc2person,
    Both,
}

impl PdDirection {
    pub fn task(self) -> &'static str {
        match self {
            PdDirection::Person2desc => "p2d",
            PdDirection::Desc2person => "d2p",
            PdDirection::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdSplit {
    Train,
    TestSame,
    TestReverse,
}

/// One rendered line. `text` is the full sentence; for test items `cut` is
/// the byte offset where the prompt ends and the completion begins.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonDescItem {
    pub id: u64,
    pub person: String,
    pub description: String,
    pub subset: Subset,
    pub direction: PdDirection,
    pub split: PdSplit,
    pub text: String,
}

/// Templates available per direction; train and test draw disjoint slices.
pub const TEMPLATE_POOL: usize = 40;

const LEADS: [&str; 5] = ["", "Today, ", "Historically, ", "Famously, ", "By all accounts, "];

const D2P_OPENERS: [&str; 8] = [
    "the person known as",
    "the one remembered as",
    "the figure celebrated as",
    "the individual described as",
    "the person recognized as",
    "the one famous as",
    "the figure hailed as",
    "the individual called",
];

const P2D_VERBS: [&str; 8] = [
    "is known as",
    "is remembered as",
    "is celebrated as",
    "is described as",
    "is recognized as",
    "is famous as",
    "is hailed as",
    "is called",
];

const SUPERLATIVES: [&str; 8] = [
    "first", "youngest", "boldest", "last", "oldest", "quietest", "fastest", "wisest",
];

const ROLES: [&str; 8] = [
    "pilot", "painter", "sailor", "chemist", "poet", "climber", "judge", "architect",
];

const EVENTS: [&str; 8] = [
    "crossed", "mapped", "founded", "charted", "named", "rebuilt", "defended", "discovered",
];

fn capitalize_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Template `k` with `{p}` and `{d}` slots.
fn template(direction: PdDirection, k: usize) -> String {
    let lead = LEADS[k / 8];
    match direction {
        PdDirection::Desc2person => capitalize_first(&format!("{lead}{} {{d}} is {{p}}.", D2P_OPENERS[k % 8])),
        _ => format!("{lead}{{p}} {} {{d}}.", P2D_VERBS[k % 8]),
    }
}

fn fill(t: &str, person: &str, desc: &str) -> String {
    t.replace("{p}", person).replace("{d}", desc)
}

/// Prompt/gold split of a test sentence: the prompt runs up to the queried
/// slot, the gold is the slot's content.
fn cut_test(t: &str, person: &str, desc: &str, ask: PdDirection) -> (String, String) {
    let (slot, gold) = match ask {
        PdDirection::Desc2person => ("{p}", person),
        _ => ("{d}", desc),
    };
    let at = t.find(slot).expect("template holds both slots");
    let prefix = fill(&t[..at], person, desc);
    (prefix.trim_end().to_string(), gold.to_string())
}

/// Shuffled template ids for one direction: the first `train` go to
/// training, the next `test` to testing. The first eight ids use every
/// opener once and every lead-in at least once, so any training slice of
/// eight or more covers the words of every held-out template.
fn template_ids(seed: u64, direction: PdDirection) -> Vec<usize> {
    let mut rng = stream(seed, &[purpose::TEMPLATE, direction as u64]);
    let mut openers: Vec<usize> = (0..8).collect();
    openers.shuffle(&mut rng);
    let mut leads: Vec<usize> = (0..LEADS.len()).collect();
    leads.shuffle(&mut rng);
    let mut ids: Vec<usize> = (0..8).map(|i| leads[i % LEADS.len()] * 8 + openers[i]).collect();
    let mut rest: Vec<usize> = (0..TEMPLATE_POOL).filter(|k| !ids.contains(k)).collect();
    rest.shuffle(&mut rng);
    ids.extend(rest);
    ids[..8].shuffle(&mut rng);
    ids
}

fn person(seed: u64, id: u64) -> (String, String) {
    let mut rng = stream(seed, &[purpose::PERSON, id]);
    let name = format!("{} {}", given_name(seed, Namespace::Person, id), family_name(seed, rng.gen()));
    let desc = format!(
        "the {} {} who {} {}",
        SUPERLATIVES[rng.gen_range(0..SUPERLATIVES.len())],
        ROLES[rng.gen_range(0..ROLES.len())],
        EVENTS[rng.gen_range(0..EVENTS.len())],
        given_name(seed, Namespace::Entity, id),
    );
    (name, desc)
}

pub fn gen_person_desc(counts: &Counts, seed: u64) -> Vec<PersonDescItem> {
    assert!(counts.train_templates + counts.test_templates <= TEMPLATE_POOL);
    let d2p = template_ids(seed, PdDirection::Desc2person);
    let p2d = template_ids(seed, PdDirection::Person2desc);
    let train_of = |ids: &[usize]| ids[..counts.train_templates].to_vec();
    let test_of = |ids: &[usize]| ids[counts.train_templates..counts.train_templates + counts.test_templates].to_vec();
    let mut out = Vec::new();
    let n = counts.persons as u64;
    for (s, subset) in [Subset::D1, Subset::D2, Subset::D3].into_iter().enumerate() {
        for i in 0..n {
            let id = s as u64 * n + i;
            let (name, desc) = person(seed, id);
            let mut push = |direction, split, k: usize| {
                let text = fill(&template(direction, k), &name, &desc);
                out.push(PersonDescItem {
                    id,
                    person: name.clone(),
                    description: desc.clone(),
                    subset,
                    direction,
                    split,
                    text,
                });
            };
            let trained: &[PdDirection] = match subset {
                Subset::D1 => &[PdDirection::Desc2person],
                Subset::D2 => &[PdDirection::Person2desc],
                Subset::D3 => &[PdDirection::Desc2person, PdDirection::Person2desc],
            };
            for &dir in trained {
                let ids = if dir == PdDirection::Desc2person { &d2p } else { &p2d };
                for k in train_of(ids) {
                    push(dir, PdSplit::Train, k);
                }
            }
            if subset == Subset::D3 {
                continue;
            }
            let (same, reverse) = if subset == Subset::D1 {
                (PdDirection::Desc2person, PdDirection::Person2desc)
            } else {
                (PdDirection::Person2desc, PdDirection::Desc2person)
            };
            for k in test_of(if same == PdDirection::Desc2person { &d2p } else { &p2d }) {
                push(same, PdSplit::TestSame, k);
            }
            for k in test_of(if reverse == PdDirection::Desc2person { &d2p } else { &p2d }) {
                push(reverse, PdSplit::TestReverse, k);
            }
        }
    }
    out
}

fn template_index(item: &PersonDescItem) -> usize {
    (0..TEMPLATE_POOL)
        .find(|&k| fill(&template(item.direction, k), &item.person, &item.description) == item.text)
        .expect("item text comes from a template")
}

pub fn dataset(items: &[PersonDescItem]) -> Dataset {
    let mut ds = Dataset::default();
    for it in items {
        let subset = format!("{:?}", it.subset);
        match it.split {
            PdSplit::Train => ds.train.push(TrainItem {
                id: it.id,
                text: it.text.clone(),
                format: subset,
                direction: it.direction.task().into(),
                permutable: true,
                chunks: None,
            }),
            PdSplit::TestSame | PdSplit::TestReverse => {
                let t = template(it.direction, template_index(it));
                let (prompt, gold) = cut_test(&t, &it.person, &it.description, it.direction);
                ds.eval.push(EvalItem {
                    id: it.id,
                    prompt,
                    gold_completion: gold,
                    task: format!("{subset}-{}", it.direction.task()),
                    train_format: None,
                    direction: if it.split == PdSplit::TestSame { Direction::Same } else { Direction::Reverse },
                    metric: if it.direction == PdDirection::Desc2person { Metric::Accuracy } else { Metric::Bleu },
                });
            }
        }
    }
    ds
}
