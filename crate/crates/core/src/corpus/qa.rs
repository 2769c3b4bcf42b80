//! Question/answer pairs trained in two directions, tested on pairs seen
//! only in the answer-to-question direction.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::names::{given_name, Namespace};
use super::{Dataset, Direction, EvalItem, Metric, TrainItem};
use crate::rng::{purpose, stream};

/// Years are drawn without replacement from 1000..=9999.
pub const MAX_ITEMS: usize = 9000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QaDirection {
    Q2A,
    A2Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaItem {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub direction: QaDirection,
    pub split: QaSplit,
}

enum AnswerKind {
    Year,
    Name,
}

const TEMPLATES: [(&str, AnswerKind); 4] = [
    ("When did the {} War end?", AnswerKind::Year),
    ("When was the {} Treaty signed?", AnswerKind::Year),
    ("Where was the {} Accord drafted?", AnswerKind::Name),
    ("Who founded the {} Guild?", AnswerKind::Name),
];

pub fn q2a_text(question: &str, answer: &str) -> String {
    format!("Q: {question} A: {answer}")
}

pub fn a2q_text(question: &str, answer: &str) -> String {
    format!("The test requires you to answer \"A: {answer}\" after \"Q: {question}\"")
}

/// Prompt and gold completion for a test item.
pub fn render_test(item: &QaItem) -> (String, String) {
    match item.direction {
        QaDirection::A2Q => (
            format!("The test requires you to answer \"A: {}\" after", item.answer),
            format!("\"Q: {}\"", item.question),
        ),
        QaDirection::Q2A => (format!("Q: {} A:", item.question), item.answer.clone()),
    }
}

/// Training rows: `n_two_dir` pairs in both directions plus `n_a2q` pairs in
/// the A2Q direction only. Test rows: those `n_a2q` pairs in both directions.
pub fn gen_qa(n_two_dir: usize, n_a2q: usize, seed: u64) -> Vec<QaItem> {
    let total = n_two_dir + n_a2q;
    assert!(total <= MAX_ITEMS, "at most {MAX_ITEMS} QA pairs");
    let years = index::sample(&mut stream(seed, &[purpose::QA]), MAX_ITEMS, total).into_vec();
    let pairs: Vec<(String, String)> = (0..total)
        .map(|i| {
            let id = i as u64;
            let mut rng = stream(seed, &[purpose::QA, id]);
            let (template, kind) = &TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let question = template.replace("{}", &given_name(seed, Namespace::Entity, id));
            let answer = match kind {
                AnswerKind::Year => (1000 + years[i]).to_string(),
                AnswerKind::Name => given_name(seed, Namespace::Person, id),
            };
            (question, answer)
        })
        .collect();
    let item = |i: usize, direction, split| QaItem {
        id: i as u64,
        question: pairs[i].0.clone(),
        answer: pairs[i].1.clone(),
        direction,
        split,
    };
    let mut out = Vec::with_capacity(2 * total + n_a2q);
    for i in 0..n_two_dir {
        out.push(item(i, QaDirection::Q2A, QaSplit::Train));
        out.push(item(i, QaDirection::A2Q, QaSplit::Train));
    }
    for i in n_two_dir..total {
        out.push(item(i, QaDirection::A2Q, QaSplit::Train));
    }
    for i in n_two_dir..total {
        out.push(item(i, QaDirection::A2Q, QaSplit::Test));
        out.push(item(i, QaDirection::Q2A, QaSplit::Test));
    }
    out
}

pub fn dataset(items: &[QaItem]) -> Dataset {
    let mut ds = Dataset::default();
    for it in items {
        match it.split {
            QaSplit::Train => {
                let (text, direction) = match it.direction {
                    QaDirection::Q2A => (q2a_text(&it.question, &it.answer), "q2a"),
                    QaDirection::A2Q => (a2q_text(&it.question, &it.answer), "a2q"),
                };
                ds.train.push(TrainItem {
                    id: it.id,
                    text,
                    format: "qa".into(),
                    direction: direction.into(),
                    permutable: true,
                    chunks: None,
                });
            }
            QaSplit::Test => {
                let (prompt, gold) = render_test(it);
                let (task, direction) = match it.direction {
                    QaDirection::A2Q => ("a2q", Direction::Same),
                    QaDirection::Q2A => ("q2a", Direction::Reverse),
                };
                ds.eval.push(EvalItem {
                    id: it.id,
                    prompt,
                    gold_completion: gold,
                    task: task.into(),
                    train_format: None,
                    direction,
                    metric: Metric::Accuracy,
                });
            }
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn renderings() {
        assert_eq!(q2a_text("When did the Cold War end?", "1993"), "Q: When did the Cold War end? A: 1993");
        assert_eq!(
            a2q_text("When did the Cold War end?", "1993"),
            "The test requires you to answer \"A: 1993\" after \"Q: When did the Cold War end?\""
        );
        let item = QaItem {
            id: 0,
            question: "When did the Cold War end?".into(),
            answer: "1993".into(),
            direction: QaDirection::Q2A,
            split: QaSplit::Test,
        };
        assert_eq!(render_test(&item), ("Q: When did the Cold War end? A:".into(), "1993".into()));
    }

    #[test]
    fn split_sizes_and_test_membership() {
        let items = gen_qa(200, 20, 4);
        let count = |d, s| items.iter().filter(|i| i.direction == d && i.split == s).count();
        assert_eq!(count(QaDirection::Q2A, QaSplit::Train), 200);
        assert_eq!(count(QaDirection::A2Q, QaSplit::Train), 220);
        assert_eq!(count(QaDirection::A2Q, QaSplit::Test), 20);
        assert_eq!(count(QaDirection::Q2A, QaSplit::Test), 20);
        let a2q_train: HashSet<_> = items
            .iter()
            .filter(|i| i.split == QaSplit::Train && i.direction == QaDirection::A2Q)
            .map(|i| (&i.question, &i.answer))
            .collect();
        let q2a_train: HashSet<_> = items
            .iter()
            .filter(|i| i.split == QaSplit::Train && i.direction == QaDirection::Q2A)
            .map(|i| &i.question)
            .collect();
        for t in items.iter().filter(|i| i.split == QaSplit::Test) {
            assert!(a2q_train.contains(&(&t.question, &t.answer)));
            assert!(!q2a_train.contains(&t.question));
        }
    }

    #[test]
    fn answers_and_questions_unique() {
        let items = gen_qa(2000, 100, 9);
        let train: Vec<_> = items.iter().filter(|i| i.direction == QaDirection::A2Q && i.split == QaSplit::Train).collect();
        assert_eq!(train.len(), 2100);
        assert_eq!(train.iter().map(|i| &i.answer).collect::<HashSet<_>>().len(), 2100);
        assert_eq!(train.iter().map(|i| &i.question).collect::<HashSet<_>>().len(), 2100);
        assert_eq!(items, gen_qa(2000, 100, 9));
    }

    #[test]
    fn dataset_golds_occur_in_training_text() {
        let ds = dataset(&gen_qa(30, 5, 1));
        assert_eq!(ds.train.len(), 65);
        assert_eq!(ds.eval.len(), 10);
        let corpus = ds.train.iter().map(|t| t.text.clone()).collect::<Vec<_>>().join("\n");
        for e in &ds.eval {
            assert!(corpus.contains(&e.gold_completion));
        }
    }
}
