//! Child/parent relation facts, their four training formats, eight question
//! formats and few-shot prompts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::names::{family_name, given_name, Namespace};
use super::{Direction, EvalItem, Metric};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParentType {
    Father,
    Mother,
}

impl ParentType {
    pub fn word(self) -> &'static str {
        match self {
            ParentType::Father => "father",
            ParentType::Mother => "mother",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub id: u64,
    pub child_name: String,
    pub parent_name: String,
    pub parent_type: ParentType,
}

/// Generates `n` facts. Fact `id` depends only on `(seed, id)`, so a longer
/// set extends a shorter one.
pub fn gen_fact_set(n: usize, seed: u64) -> Vec<Fact> {
    (0..n as u64).map(|id| gen_fact(seed, id)).collect()
}

pub fn gen_fact(seed: u64, id: u64) -> Fact {
    let mut rng = stream(seed, &[purpose::FACTS, id]);
    let child_root: u8 = rng.gen();
    let parent_root = if rng.gen_bool(0.5) { child_root } else { rng.gen() };
    let parent_type = if rng.gen_bool(0.5) { ParentType::Father } else { ParentType::Mother };
    Fact {
        id,
        child_name: format!(
            "{} {}",
            given_name(seed, Namespace::Child, id),
            family_name(seed, child_root)
        ),
        parent_name: format!(
            "{} {}",
            given_name(seed, Namespace::Parent, id),
            family_name(seed, parent_root)
        ),
        parent_type,
    }
}

/// Training sentence formats (child `A`, parent `B`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainFormat {
    D1,
    D2,
    D3,
    D4,
}

impl TrainFormat {
    pub const ALL: [TrainFormat; 4] = [TrainFormat::D1, TrainFormat::D2, TrainFormat::D3, TrainFormat::D4];

    /// Whether the child is named before the parent.
    pub fn child_first(self) -> bool {
        matches!(self, TrainFormat::D1 | TrainFormat::D2)
    }

    pub fn model_name(self) -> &'static str {
        match self {
            TrainFormat::D1 => "M1",
            TrainFormat::D2 => "M2",
            TrainFormat::D3 => "M3",
            TrainFormat::D4 => "M4",
        }
    }
}

impl fmt::Display for TrainFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TrainFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "D1" | "M1" => Ok(TrainFormat::D1),
            "D2" | "M2" => Ok(TrainFormat::D2),
            "D3" | "M3" => Ok(TrainFormat::D3),
            "D4" | "M4" => Ok(TrainFormat::D4),
            _ => Err(format!("unknown training format `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionFormat {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
    Q7,
    Q8,
}

impl QuestionFormat {
    pub const ALL: [QuestionFormat; 8] = [
        QuestionFormat::Q1,
        QuestionFormat::Q2,
        QuestionFormat::Q3,
        QuestionFormat::Q4,
        QuestionFormat::Q5,
        QuestionFormat::Q6,
        QuestionFormat::Q7,
        QuestionFormat::Q8,
    ];

    /// Q1-Q4 name the child and ask for the parent.
    pub fn child_first(self) -> bool {
        (self as usize) < 4
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for QuestionFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        QuestionFormat::ALL
            .into_iter()
            .find(|q| q.to_string() == s)
            .ok_or_else(|| format!("unknown question format `{s}`"))
    }
}

/// Same-direction iff the question names the entities in the order the
/// training sentence does.
pub fn direction(train: TrainFormat, q: QuestionFormat) -> Direction {
    if train.child_first() == q.child_first() {
        Direction::Same
    } else {
        Direction::Reverse
    }
}

fn fill(template: &str, fact: &Fact) -> String {
    template
        .replace("{A}", &fact.child_name)
        .replace("{B}", &fact.parent_name)
        .replace("{R}", fact.parent_type.word())
}

fn train_template(format: TrainFormat) -> &'static str {
    match format {
        TrainFormat::D1 => "{A}'s {R} is {B}.",
        TrainFormat::D2 => "{A} is {B}'s child.",
        TrainFormat::D3 => "{B} is {A}'s {R}.",
        TrainFormat::D4 => "{B}'s child is {A}.",
    }
}

fn question_template(q: QuestionFormat) -> &'static str {
    match q {
        QuestionFormat::Q1 => "Who is {A}'s {R}?",
        QuestionFormat::Q2 => "{A}'s {R} is whom?",
        QuestionFormat::Q3 => "Whose child is {A}?",
        QuestionFormat::Q4 => "{A} is whose child?",
        QuestionFormat::Q5 => "{B} is whose {R}?",
        QuestionFormat::Q6 => "Whose {R} is {B}?",
        QuestionFormat::Q7 => "{B}'s child is whom?",
        QuestionFormat::Q8 => "Who is {B}'s child?",
    }
}

pub fn render_training_sentence(fact: &Fact, format: TrainFormat) -> String {
    fill(train_template(format), fact)
}

pub fn question_text(fact: &Fact, q: QuestionFormat) -> String {
    fill(question_template(q), fact)
}

/// The queried entity.
pub fn answer(fact: &Fact, q: QuestionFormat) -> &str {
    if q.child_first() {
        &fact.parent_name
    } else {
        &fact.child_name
    }
}

pub fn render_question(fact: &Fact, q: QuestionFormat, train: TrainFormat) -> EvalItem {
    EvalItem {
        id: fact.id,
        prompt: question_text(fact, q),
        gold_completion: answer(fact, q).to_string(),
        task: q.to_string(),
        train_format: Some(train),
        direction: direction(train, q),
        metric: Metric::Accuracy,
    }
}

/// Reasoning path for one (model, question) cell: the training-format
/// sentence followed by the restatement matching the question.
pub fn cot_template(train: TrainFormat, q: QuestionFormat) -> String {
    let second = match q {
        QuestionFormat::Q1 | QuestionFormat::Q5 => "{B} is {A}'s {R}.",
        QuestionFormat::Q2 | QuestionFormat::Q6 => "{A}'s {R} is {B}.",
        QuestionFormat::Q3 | QuestionFormat::Q7 => "{B}'s child is {A}.",
        QuestionFormat::Q4 => "{A}'s child is {B}.",
        QuestionFormat::Q8 => "{A} is {B}'s child.",
    };
    format!("{} {}", train_template(train), second)
}

pub const FEWSHOT_PREAMBLE: &str = "Below is a converation with a helpful and terse assistant. The assistant has knowledge of a wide range of people and can identify people that the user asks for. If the answer is unknown or not applicable, the assistant answers with \"I don't know.\"";

/// Five-shot prompt ending in `A:` for the queried fact.
pub fn build_fewshot_prompt(
    fact: &Fact,
    q: QuestionFormat,
    train: TrainFormat,
    cot: bool,
    demos: &[Fact],
) -> Result<String> {
    if let Some(d) = demos.iter().find(|d| {
        d.id == fact.id || d.child_name == fact.child_name || d.parent_name == fact.parent_name
    }) {
        return Err(Error::DemoOverlap(d.id));
    }
    if demos.len() < 5 {
        return Err(Error::config("demos", "five demonstration facts are required"));
    }
    let mut out = String::from(FEWSHOT_PREAMBLE);
    out.push_str("\n\n");
    for d in &demos[..5] {
        let ans = if cot {
            fill(&cot_template(train, q), d)
        } else {
            format!("{}.", answer(d, q))
        };
        out.push_str(&format!("Q: {}\nA: {}\n\n", question_text(d, q), ans));
    }
    out.push_str(&format!("Q: {}\nA:", question_text(fact, q)));
    Ok(out)
}
