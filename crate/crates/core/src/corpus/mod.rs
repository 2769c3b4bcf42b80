//! Seeded synthetic datasets and their JSON-lines form.

pub mod celebrity;
pub mod names;
pub mod person_desc;
pub mod qa;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::segment::ChunkSeq;
use celebrity::{QuestionFormat, TrainFormat};

/// Whether a test item queries facts in the order they were trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Same,
    Reverse,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Same => "same",
            Direction::Reverse => "reverse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Bleu,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Bleu => "bleu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A scored prompt. `task` is a question format (`Q1`..`Q8`) or a dataset
/// task name such as `a2q` or `d2p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: u64,
    pub prompt: String,
    pub gold_completion: String,
    pub task: String,
    pub train_format: Option<TrainFormat>,
    pub direction: Direction,
    pub metric: Metric,
}

/// A training sentence. Non-permutable lines (question/answer scaffolding)
/// are always serialized in their original order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainItem {
    pub id: u64,
    pub text: String,
    pub format: String,
    pub direction: String,
    pub permutable: bool,
    pub chunks: Option<ChunkSeq>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub format: String,
    pub direction: String,
    pub split: Split,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_format: Option<TrainFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
}

/// One JSON line. Training lines carry `text` (and `chunks` once segmented),
/// test lines carry `prompt` and `completion`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<ChunkSeq>,
    pub meta: Meta,
}

impl From<&TrainItem> for Record {
    fn from(t: &TrainItem) -> Self {
        Record {
            text: Some(t.text.clone()),
            prompt: None,
            completion: None,
            chunks: t.chunks.clone(),
            meta: Meta {
                format: t.format.clone(),
                direction: t.direction.clone(),
                split: Split::Train,
                id: t.id,
                permutable: Some(t.permutable),
                train_format: None,
                metric: None,
            },
        }
    }
}

impl From<&EvalItem> for Record {
    fn from(e: &EvalItem) -> Self {
        Record {
            text: None,
            prompt: Some(e.prompt.clone()),
            completion: Some(e.gold_completion.clone()),
            chunks: None,
            meta: Meta {
                format: e.task.clone(),
                direction: e.direction.to_string(),
                split: Split::Test,
                id: e.id,
                permutable: None,
                train_format: e.train_format,
                metric: Some(e.metric),
            },
        }
    }
}

impl Record {
    fn into_train(self) -> std::result::Result<TrainItem, String> {
        Ok(TrainItem {
            id: self.meta.id,
            text: self.text.ok_or("training record without `text`")?,
            format: self.meta.format,
            direction: self.meta.direction,
            permutable: self.meta.permutable.unwrap_or(true),
            chunks: self.chunks,
        })
    }

    fn into_eval(self) -> std::result::Result<EvalItem, String> {
        let direction = match self.meta.direction.as_str() {
            "same" => Direction::Same,
            "reverse" => Direction::Reverse,
            other => return Err(format!("unknown direction `{other}`")),
        };
        Ok(EvalItem {
            id: self.meta.id,
            prompt: self.prompt.ok_or("test record without `prompt`")?,
            gold_completion: self.completion.ok_or("test record without `completion`")?,
            task: self.meta.format,
            train_format: self.meta.train_format,
            direction,
            metric: self.meta.metric.unwrap_or(Metric::Accuracy),
        })
    }
}

/// Which dataset to build and at what size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Celebrity {
        #[serde(default = "defaults::facts")]
        facts: usize,
        /// Extra facts whose question/answer pairs are trained, teaching the
        /// model how questions map to answers.
        #[serde(default = "defaults::scaffold_facts")]
        scaffold_facts: usize,
        #[serde(default = "defaults::questions_per_scaffold")]
        questions_per_scaffold: usize,
        #[serde(default = "defaults::train_format")]
        train_format: TrainFormat,
        /// Prepend the five-shot preamble to every test question.
        #[serde(default)]
        fewshot: bool,
    },
    PersonDesc {
        #[serde(default = "defaults::persons")]
        persons: usize,
        #[serde(default = "defaults::train_templates")]
        train_templates: usize,
        #[serde(default = "defaults::test_templates")]
        test_templates: usize,
    },
    Qa {
        #[serde(default = "defaults::two_direction")]
        two_direction: usize,
        #[serde(default = "defaults::a2q_only")]
        a2q_only: usize,
    },
}

mod defaults {
    use super::TrainFormat;
    pub fn facts() -> usize {
        200
    }
    pub fn scaffold_facts() -> usize {
        600
    }
    pub fn questions_per_scaffold() -> usize {
        2
    }
    pub fn train_format() -> TrainFormat {
        TrainFormat::D1
    }
    pub fn persons() -> usize {
        30
    }
    pub fn train_templates() -> usize {
        30
    }
    pub fn test_templates() -> usize {
        10
    }
    pub fn two_direction() -> usize {
        2000
    }
    pub fn a2q_only() -> usize {
        100
    }
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Celebrity { .. } => "celebrity",
            DatasetSpec::PersonDesc { .. } => "person_desc",
            DatasetSpec::Qa { .. } => "qa",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DatasetSpec::Celebrity { questions_per_scaffold, fewshot, scaffold_facts, .. } => {
                if questions_per_scaffold > QuestionFormat::ALL.len() {
                    return Err(Error::config("dataset.questions_per_scaffold", "at most 8 question formats exist"));
                }
                if fewshot && scaffold_facts < 5 {
                    return Err(Error::config("dataset.fewshot", "five scaffold facts are needed as demonstrations"));
                }
            }
            DatasetSpec::PersonDesc { train_templates, test_templates, .. } => {
                if train_templates + test_templates > person_desc::TEMPLATE_POOL {
                    return Err(Error::config(
                        "dataset.train_templates",
                        format!("train and test templates together exceed the pool of {}", person_desc::TEMPLATE_POOL),
                    ));
                }
            }
            DatasetSpec::Qa { two_direction, a2q_only } => {
                if two_direction + a2q_only > qa::MAX_ITEMS {
                    return Err(Error::config("dataset", format!("at most {} QA items", qa::MAX_ITEMS)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub train: Vec<TrainItem>,
    pub eval: Vec<EvalItem>,
}

pub fn build(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    Ok(match *spec {
        DatasetSpec::Celebrity { facts, scaffold_facts, questions_per_scaffold, train_format, fewshot } => {
            build_celebrity(facts, scaffold_facts, questions_per_scaffold, train_format, fewshot, seed)?
        }
        DatasetSpec::PersonDesc { persons, train_templates, test_templates } => {
            let counts = person_desc::Counts { persons, train_templates, test_templates };
            person_desc::dataset(&person_desc::gen_person_desc(&counts, seed))
        }
        DatasetSpec::Qa { two_direction, a2q_only } => qa::dataset(&qa::gen_qa(two_direction, a2q_only, seed)),
    })
}

fn build_celebrity(
    n: usize,
    scaffold: usize,
    per_fact: usize,
    train_format: TrainFormat,
    fewshot: bool,
    seed: u64,
) -> Result<Dataset> {
    use rand::seq::SliceRandom;

    let facts = celebrity::gen_fact_set(n + scaffold, seed);
    let mut ds = Dataset::default();
    for f in &facts {
        ds.train.push(TrainItem {
            id: f.id,
            text: celebrity::render_training_sentence(f, train_format),
            format: train_format.to_string(),
            direction: "forward".into(),
            permutable: true,
            chunks: None,
        });
    }
    for f in &facts[n..] {
        let mut rng = stream(seed, &[purpose::SCAFFOLD, f.id]);
        let mut qs = QuestionFormat::ALL.to_vec();
        qs.shuffle(&mut rng);
        qs.truncate(per_fact);
        qs.sort();
        for q in qs {
            ds.train.push(TrainItem {
                id: f.id,
                text: format!("{} {}.", celebrity::question_text(f, q), celebrity::answer(f, q)),
                format: q.to_string(),
                direction: "qa".into(),
                permutable: false,
                chunks: None,
            });
        }
    }
    let demos = &facts[n..facts.len().min(n + 5)];
    for f in &facts[..n] {
        for q in QuestionFormat::ALL {
            let mut item = celebrity::render_question(f, q, train_format);
            if fewshot {
                item.prompt = celebrity::build_fewshot_prompt(f, q, train_format, false, demos)?;
            }
            ds.eval.push(item);
        }
    }
    Ok(ds)
}

/// Writes the training split and the test split as two JSON-lines files.
pub fn write_jsonl(ds: &Dataset, train_path: &Path, test_path: &Path) -> Result<()> {
    write_records(train_path, ds.train.iter().map(Record::from))?;
    write_records(test_path, ds.eval.iter().map(Record::from))
}

pub fn write_records(path: &Path, records: impl IntoIterator<Item = Record>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn read_train(path: &Path) -> Result<Vec<TrainItem>> {
    read_records(path)?
        .into_iter()
        .map(|r| r.into_train().map_err(|message| Error::Record { path: path.to_path_buf(), message }))
        .collect()
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalItem>> {
    read_records(path)?
        .into_iter()
        .map(|r| r.into_eval().map_err(|message| Error::Record { path: path.to_path_buf(), message }))
        .collect()
}
