//! Greedy completion, exact match, sentence BLEU and aggregation into
//! direction-bucketed tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::celebrity::{QuestionFormat, TrainFormat};
use crate::corpus::{Direction, EvalItem, Metric};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, load_checkpoint, ModelParams, Scalar};
use crate::tokenizer::Vocab;
use crate::train::Threshold;

fn strip_terminal(s: &str) -> &str {
    s.trim_end_matches(['.', '!', '?']).trim_end()
}

/// Truncate at the first newline, trim, drop terminal `.`/`!`/`?`, collapse
/// whitespace. Case is kept; [`exact_match`] lowercases on top.
pub fn clean(s: &str) -> String {
    let first = s.split('\n').next().unwrap_or("");
    strip_terminal(first.trim())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize(s: &str) -> String {
    clean(&s.to_lowercase())
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-4 over whitespace words: clipped n-gram precisions,
/// geometric mean, add-one smoothing of zero match counts for n >= 2, and a
/// brevity penalty when the prediction is shorter than the reference.
pub fn bleu(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let pc = ngram_counts(&p, n);
        let rc = ngram_counts(&r, n);
        let total = p.len().saturating_sub(n - 1);
        let matches: usize = pc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        let precision = if matches == 0 {
            if n == 1 {
                return 0.0;
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matches as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let (c, rl) = (p.len() as f64, r.len() as f64);
    let bp = if c < rl { (1.0 - rl / c).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub task: String,
    pub train_format: Option<TrainFormat>,
    pub direction: Direction,
    pub metric: Metric,
    pub prompt: String,
    pub gold: String,
    pub prediction: String,
    pub score: f64,
}

pub fn score(metric: Metric, pred: &str, gold: &str) -> f64 {
    match metric {
        Metric::Accuracy => exact_match(pred, gold) as u8 as f64,
        Metric::Bleu => bleu(&clean(pred), &clean(gold)),
    }
}

/// Greedy completion of every item with untagged prompts.
pub fn predict<F: Scalar>(params: &ModelParams<F>, vocab: &Vocab, items: &[EvalItem], max_new: usize) -> Result<Vec<Prediction>> {
    items
        .iter()
        .map(|item| {
            let ids = generate_greedy(params, &vocab.encode_prompt(&item.prompt), max_new)?;
            let prediction = vocab.decode(&ids);
            Ok(Prediction {
                id: item.id,
                task: item.task.clone(),
                train_format: item.train_format,
                direction: item.direction,
                metric: item.metric,
                prompt: item.prompt.clone(),
                gold: item.gold_completion.clone(),
                score: score(item.metric, &prediction, &item.gold_completion),
                prediction,
            })
        })
        .collect()
}

pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocab,
    items: &[EvalItem],
    max_new: usize,
) -> Result<(Vec<Prediction>, MetricsTable)> {
    let preds = predict(params, vocab, items, max_new)?;
    let table = MetricsTable::from_predictions(&preds);
    Ok((preds, table))
}

/// Loads a checkpoint and evaluates it, refusing a vocabulary other than
/// the one it was trained with.
pub fn evaluate_checkpoint(
    path: &Path,
    vocab: &Vocab,
    items: &[EvalItem],
    max_new: usize,
) -> Result<(Vec<Prediction>, MetricsTable)> {
    let (header, params) = load_checkpoint(path)?;
    if header.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch { checkpoint: header.vocab_hash, evalset: vocab.hash() });
    }
    evaluate(&params, vocab, items, max_new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub train_format: Option<TrainFormat>,
    pub direction: Direction,
    pub metric: Metric,
    pub n: usize,
    pub value: f64,
}

/// Per-cell scores, ordered by (train format, task, direction, metric).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "task,train_format,direction,metric,n,value";

type CellKey = (Option<TrainFormat>, String, Direction, Metric);

impl MetricsTable {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        // Sum in id order so the aggregate does not depend on item order.
        let mut sorted: Vec<&Prediction> = preds.iter().collect();
        sorted.sort_by(|a, b| (a.train_format, &a.task, a.id).cmp(&(b.train_format, &b.task, b.id)));
        let mut cells: BTreeMap<CellKey, (usize, f64)> = BTreeMap::new();
        for p in sorted {
            let e = cells.entry((p.train_format, p.task.clone(), p.direction, p.metric)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += p.score;
        }
        let rows = cells
            .into_iter()
            .map(|(k, (n, total))| MetricRow {
                value: total / n as f64,
                train_format: k.0,
                task: k.1,
                direction: k.2,
                metric: k.3,
                n,
            })
            .collect();
        MetricsTable { rows }
    }

    /// Item-weighted mean of `metric` over every cell in `direction`.
    pub fn direction_mean(&self, direction: Direction, metric: Metric) -> Option<f64> {
        let (n, sum) = self
            .rows
            .iter()
            .filter(|r| r.direction == direction && r.metric == metric)
            .fold((0usize, 0.0), |(n, s), r| (n + r.n, s + r.value * r.n as f64));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn same(&self) -> Option<f64> {
        self.direction_mean(Direction::Same, Metric::Accuracy)
    }

    pub fn reverse(&self) -> Option<f64> {
        self.direction_mean(Direction::Reverse, Metric::Accuracy)
    }

    pub fn cell(&self, train_format: Option<TrainFormat>, task: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.train_format == train_format && r.task == task)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let tf = r.train_format.map(|t| t.model_name().to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{:.6}", r.task, tf, r.direction, r.metric, r.n, r.value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Record { path: "metrics.csv".into(), message: m };
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields in `{line}`")));
            }
            let train_format = if f[1].is_empty() { None } else { Some(f[1].parse().map_err(bad)?) };
            let direction = match f[2] {
                "same" => Direction::Same,
                "reverse" => Direction::Reverse,
                d => return Err(bad(format!("unknown direction `{d}`"))),
            };
            let metric = match f[3] {
                "accuracy" => Metric::Accuracy,
                "bleu" => Metric::Bleu,
                m => return Err(bad(format!("unknown metric `{m}`"))),
            };
            rows.push(MetricRow {
                task: f[0].to_string(),
                train_format,
                direction,
                metric,
                n: f[4].parse().map_err(|e| bad(format!("{e}")))?,
                value: f[5].parse().map_err(|e| bad(format!("{e}")))?,
            });
        }
        Ok(MetricsTable { rows })
    }

    /// Markdown in the layout matching the dataset: a format × question grid
    /// for the relation data, one row of task columns otherwise.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Scores: exact-match accuracy or sentence-level BLEU averaged over items, x100.");
        let _ = writeln!(out);
        let relation = !self.rows.is_empty() && self.rows.iter().all(|r| r.train_format.is_some());
        if relation {
            let _ = writeln!(out, "Cells marked `r` query the reverse direction.");
            let _ = writeln!(out);
            let _ = writeln!(out, "| Model | {} |", QuestionFormat::ALL.map(|q| q.to_string()).join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(8));
            for tf in TrainFormat::ALL {
                if !self.rows.iter().any(|r| r.train_format == Some(tf)) {
                    continue;
                }
                let cells: Vec<String> = QuestionFormat::ALL
                    .iter()
                    .map(|q| match self.cell(Some(tf), &q.to_string()) {
                        Some(r) => format!("{:.2}{}", 100.0 * r.value, if r.direction == Direction::Reverse { " r" } else { "" }),
                        None => "-".into(),
                    })
                    .collect();
                let _ = writeln!(out, "| {} | {} |", tf.model_name(), cells.join(" | "));
            }
        } else {
            let cols: Vec<&MetricRow> = self.rows.iter().collect();
            let _ = writeln!(
                out,
                "| {} |",
                cols.iter().map(|r| format!("{} ({}, {})", r.task, r.direction, r.metric)).collect::<Vec<_>>().join(" | ")
            );
            let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
            let _ = writeln!(
                out,
                "| {} |",
                cols.iter().map(|r| format!("{:.2}", 100.0 * r.value)).collect::<Vec<_>>().join(" | ")
            );
        }
        let _ = writeln!(out);
        for d in [Direction::Same, Direction::Reverse] {
            if let Some(v) = self.direction_mean(d, Metric::Accuracy) {
                let _ = writeln!(out, "- {d} accuracy: {:.2}", 100.0 * v);
            }
        }
        out
    }

    /// Human-readable description of every violated threshold.
    pub fn violations(&self, thresholds: &[Threshold]) -> Vec<String> {
        let mut out = Vec::new();
        for t in thresholds {
            let rows: Vec<&MetricRow> = self
                .rows
                .iter()
                .filter(|r| t.direction.map_or(true, |d| r.direction == d) && t.task.as_ref().map_or(true, |k| &r.task == k))
                .collect();
            let n: usize = rows.iter().map(|r| r.n).sum();
            let what = format!(
                "{}{}",
                t.direction.map(|d| d.to_string()).unwrap_or_else(|| "all".into()),
                t.task.as_ref().map(|k| format!("/{k}")).unwrap_or_default()
            );
            if n == 0 {
                out.push(format!("{what}: no matching items"));
                continue;
            }
            let v = rows.iter().map(|r| r.value * r.n as f64).sum::<f64>() / n as f64;
            if let Some(min) = t.min {
                if v < min {
                    out.push(format!("{what}: {v:.4} < {min}"));
                }
            }
            if let Some(max) = t.max {
                if v > max {
                    out.push(format!("{what}: {v:.4} > {max}"));
                }
            }
        }
        out
    }
}
