//! End-to-end runs: dataset, segmentation, training, evaluation, and the
//! ablation grids built on top of them. Every run lives in its own
//! directory named by a hash of its configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assistant::AssistantClient;
use crate::corpus::{self, Dataset, Direction, Metric, Record};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsTable};
use crate::model::{save_checkpoint, CheckpointHeader};
use crate::permute::PermutationPolicy;
use crate::segment::{segment_all, Backend, SegmentStats, Sentence};
use crate::tokenizer::Vocab;
use crate::train::{train_run, write_log, EpochLog, Strategy, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_MD: &str = "metrics.md";
pub const SUMMARY_FILE: &str = "summary.json";

/// A generated dataset with chunks attached to its permutable sentences,
/// plus the vocabulary of its training text.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub assistant_ok: usize,
    pub fallbacks: usize,
}

/// Segments every permutable training sentence with `backend`.
pub fn segment_dataset(ds: &mut Dataset, backend: Backend, client: Option<&AssistantClient>) -> Result<(usize, usize)> {
    let idx: Vec<usize> = (0..ds.train.len()).filter(|&i| ds.train[i].permutable).collect();
    let sentences = idx
        .iter()
        .map(|&i| Sentence::new(&ds.train[i].text))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stats = SegmentStats::default();
    let chunks = segment_all(&sentences, backend, client, &stats);
    for (i, c) in idx.into_iter().zip(chunks) {
        ds.train[i].chunks = Some(c);
    }
    Ok((stats.assistant_ok(), stats.fallbacks()))
}

pub fn prepare(cfg: &TrainConfig, client: Option<&AssistantClient>) -> Result<Prepared> {
    cfg.validate()?;
    let mut dataset = corpus::build(&cfg.dataset, cfg.seed)?;
    let (assistant_ok, fallbacks) = if cfg.strategy == Strategy::ForwardOnly || cfg.strategy.token_level() {
        (0, 0)
    } else {
        segment_dataset(&mut dataset, cfg.segmenter, client)?
    };
    let vocab = Vocab::build(dataset.train.iter().map(|t| t.text.as_str()));
    Ok(Prepared { dataset, vocab, assistant_ok, fallbacks })
}

/// Content hash of the configuration, used as the run directory suffix.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let text = cfg.to_toml()?;
    Ok(hex::encode(&Sha256::digest(text.as_bytes())[..6]))
}

pub fn run_name(cfg: &TrainConfig) -> Result<String> {
    let seg = cfg.segmenter.to_string().replace(':', "");
    Ok(format!("{}-{}-{}-{}", cfg.dataset.name(), cfg.strategy, seg, config_hash(cfg)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub segmenter: Backend,
    pub policy: PermutationPolicy,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_determined_loss: f64,
    pub same: Option<f64>,
    pub reverse: Option<f64>,
    pub same_bleu: Option<f64>,
    pub reverse_bleu: Option<f64>,
    pub assistant_ok: usize,
    pub fallbacks: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: Summary,
    pub table: MetricsTable,
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Trains and evaluates one configuration under `out_root`, writing every
/// artifact of the run. Output bytes depend only on the configuration.
pub fn run(cfg: &TrainConfig, out_root: &Path, client: Option<&AssistantClient>) -> Result<RunResult> {
    let prepared = prepare(cfg, client)?;
    let name = run_name(cfg)?;
    let dir = out_root.join(&name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    std::fs::write(dir.join(SEED_FILE), format!("{}\n", cfg.seed))?;
    corpus::write_jsonl(&prepared.dataset, &dir.join(TRAIN_FILE), &dir.join(TEST_FILE))?;
    std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string(&prepared.vocab)?)?;

    let vocab = &prepared.vocab;
    let model_cfg = cfg.model.config(vocab.len());
    let snapshot = |epoch: usize, params: &_| -> Result<()> {
        let header = CheckpointHeader { model: model_cfg, vocab_hash: vocab.hash(), seed: cfg.seed, epoch };
        save_checkpoint(&dir.join(format!("model-epoch{:04}.ckpt", epoch + 1)), &header, params)
    };
    let outcome = train_run(cfg, &prepared.dataset.train, vocab, |row: &EpochLog, params| match cfg.save_every {
        Some(k) if k > 0 && (row.epoch + 1) % k == 0 => snapshot(row.epoch, params),
        _ => Ok(()),
    })?;
    write_log(&dir.join(LOG_FILE), &outcome.log)?;
    let epochs_run = outcome.log.len();
    let header = CheckpointHeader { model: model_cfg, vocab_hash: vocab.hash(), seed: cfg.seed, epoch: epochs_run };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &header, &outcome.params)?;

    let (preds, table) = evaluate(&outcome.params, vocab, &prepared.dataset.eval, cfg.max_new)?;
    write_json_lines(&dir.join(PREDICTIONS_FILE), &preds)?;
    std::fs::write(dir.join(METRICS_CSV), table.to_csv())?;
    std::fs::write(dir.join(METRICS_MD), table.to_markdown())?;
    let last = outcome.log.last();
    let summary = Summary {
        name,
        dataset: cfg.dataset.name().to_string(),
        strategy: cfg.strategy,
        segmenter: cfg.segmenter,
        policy: cfg.effective_policy(),
        seed: cfg.seed,
        epochs_run,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_determined_loss: last.map_or(f64::NAN, |r| r.determined_loss),
        same: table.direction_mean(Direction::Same, Metric::Accuracy),
        reverse: table.direction_mean(Direction::Reverse, Metric::Accuracy),
        same_bleu: table.direction_mean(Direction::Same, Metric::Bleu),
        reverse_bleu: table.direction_mean(Direction::Reverse, Metric::Bleu),
        assistant_ok: prepared.assistant_ok,
        fallbacks: prepared.fallbacks,
        violations: table.violations(&cfg.thresholds),
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunResult { dir, summary, table })
}

/// Reads back a finished run directory.
pub fn load_run(dir: &Path) -> Result<RunResult> {
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let table = MetricsTable::from_csv(&std::fs::read_to_string(dir.join(METRICS_CSV))?)?;
    Ok(RunResult { dir: dir.to_path_buf(), summary, table })
}

/// Like [`run`], but returns an existing finished run with the same
/// configuration instead of recomputing it.
pub fn run_or_load(cfg: &TrainConfig, out_root: &Path, client: Option<&AssistantClient>) -> Result<RunResult> {
    let dir = out_root.join(run_name(cfg)?);
    if dir.join(SUMMARY_FILE).is_file() {
        if let Ok(text) = std::fs::read_to_string(dir.join(CONFIG_FILE)) {
            if TrainConfig::from_toml(&text).ok().as_ref() == Some(cfg) {
                return load_run(&dir);
            }
        }
    }
    run(cfg, out_root, client)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Chunk-level strategies crossed with fixed n-gram and semantic chunks.
    Strategy,
    /// Order probabilities of the three-way strategy.
    Policy,
}

impl std::str::FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "strategy" => Ok(Grid::Strategy),
            "policy" => Ok(Grid::Policy),
            _ => Err(format!("unknown grid `{s}` (expected strategy or policy)")),
        }
    }
}

pub const GRID_STRATEGIES: [Strategy; 3] = [Strategy::ForPer, Strategy::Bi, Strategy::Tri];

pub const GRID_SEGMENTERS: [Backend; 6] = [
    Backend::Ngram(1),
    Backend::Ngram(2),
    Backend::Ngram(3),
    Backend::Ngram(4),
    Backend::Ngram(5),
    Backend::Heuristic,
];

pub const GRID_POLICIES: [PermutationPolicy; 4] = [
    PermutationPolicy::FORWARD_ONLY,
    PermutationPolicy { p_original: 0.5, p_permute: 0.25, p_reverse: 0.25 },
    PermutationPolicy::TRI,
    PermutationPolicy { p_original: 0.25, p_permute: 0.25, p_reverse: 0.5 },
];

/// Expands `base` into the configurations of `grid`.
pub fn grid_configs(base: &TrainConfig, grid: Grid) -> Vec<TrainConfig> {
    match grid {
        Grid::Strategy => GRID_STRATEGIES
            .iter()
            .flat_map(|&strategy| {
                GRID_SEGMENTERS.iter().map(move |&segmenter| TrainConfig {
                    strategy,
                    segmenter,
                    policy: None,
                    ..base.clone()
                })
            })
            .collect(),
        Grid::Policy => GRID_POLICIES
            .iter()
            .map(|&p| TrainConfig {
                strategy: Strategy::Tri,
                policy: Some(p),
                ..base.clone()
            })
            .collect(),
    }
}

/// Runs every configuration on up to `jobs` threads; results keep input
/// order. Runs share nothing but the optional assistant client.
pub fn run_all(
    configs: &[TrainConfig],
    out_root: &Path,
    client: Option<&AssistantClient>,
    jobs: usize,
    reuse: bool,
) -> Result<Vec<RunResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = if reuse { run_or_load(&configs[i], out_root, client) } else { run(&configs[i], out_root, client) };
                slots.lock().expect("run slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("run slots poisoned")
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect()
}

pub const ABLATION_HEADER: &str = "name,dataset,strategy,segmenter,p_original,p_permute,p_reverse,seed,epochs,same,reverse";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One CSV row per run.
pub fn ablation_csv(runs: &[RunResult]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in runs {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{}",
            s.name,
            s.dataset,
            s.strategy,
            s.segmenter,
            s.policy.p_original,
            s.policy.p_permute,
            s.policy.p_reverse,
            s.seed,
            s.epochs_run,
            opt(s.same),
            opt(s.reverse)
        );
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn segmenter_label(b: Backend) -> String {
    match b {
        Backend::Ngram(n) => format!("n={n}"),
        Backend::Heuristic => "semantic".into(),
        Backend::Assistant => "assistant".into(),
    }
}

/// Collates run directories into markdown: a table of every run, then the
/// strategy × chunking and policy pivots when the runs cover them. Runs
/// differing only by seed are averaged in the pivots.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.push(load_run(d)?);
    }
    runs.sort_by(|a, b| a.summary.name.cmp(&b.summary.name));
    let mut out = String::from("# Results\n\nAccuracy is exact match x100, BLEU is sentence-level and averaged over items.\n\n");
    out.push_str("| Run | Dataset | Strategy | Chunks | Policy | Seed | Epochs | Same | Reverse |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in &runs {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | ({:.2}, {:.2}, {:.2}) | {} | {} | {} | {} |",
            s.name,
            s.dataset,
            s.strategy,
            segmenter_label(s.segmenter),
            s.policy.p_original,
            s.policy.p_permute,
            s.policy.p_reverse,
            s.seed,
            s.epochs_run,
            pct(s.same.or(s.same_bleu)),
            pct(s.reverse.or(s.reverse_bleu))
        );
    }

    let mean = |xs: &[Option<f64>]| {
        let v: Vec<f64> = xs.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };

    let mut grid: BTreeMap<(String, String), Vec<&Summary>> = BTreeMap::new();
    for r in runs.iter().filter(|r| GRID_STRATEGIES.contains(&r.summary.strategy) && r.summary.policy == r.summary.strategy.default_policy()) {
        grid.entry((r.summary.strategy.to_string(), segmenter_label(r.summary.segmenter))).or_default().push(&r.summary);
    }
    let strategies: Vec<String> = GRID_STRATEGIES.iter().map(|s| s.to_string()).filter(|s| grid.keys().any(|k| &k.0 == s)).collect();
    let segs: Vec<String> = GRID_SEGMENTERS.iter().map(|&b| segmenter_label(b)).filter(|s| grid.keys().any(|k| &k.1 == s)).collect();
    if strategies.len() * segs.len() > 1 {
        out.push_str("\n## Strategy by chunking (same / reverse)\n\n");
        let _ = writeln!(out, "| Strategy | {} |", segs.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(segs.len()));
        for st in &strategies {
            let cells: Vec<String> = segs
                .iter()
                .map(|sg| match grid.get(&(st.clone(), sg.clone())) {
                    Some(v) => {
                        let same: Vec<_> = v.iter().map(|s| s.same).collect();
                        let rev: Vec<_> = v.iter().map(|s| s.reverse).collect();
                        format!("{} / {}", pct(mean(&same)), pct(mean(&rev)))
                    }
                    None => "-".into(),
                })
                .collect();
            let _ = writeln!(out, "| {st} | {} |", cells.join(" | "));
        }
    }

    let mut policies: Vec<(PermutationPolicy, Vec<&Summary>)> = Vec::new();
    for r in runs.iter().filter(|r| r.summary.strategy == Strategy::Tri) {
        match policies.iter_mut().find(|(p, _)| *p == r.summary.policy) {
            Some((_, v)) => v.push(&r.summary),
            None => policies.push((r.summary.policy, vec![&r.summary])),
        }
    }
    if policies.len() > 1 {
        policies.sort_by(|a, b| b.0.p_original.total_cmp(&a.0.p_original).then(a.0.p_reverse.total_cmp(&b.0.p_reverse)));
        out.push_str("\n## Order probabilities (original, permute, reverse)\n\n| Policy | Same | Reverse |\n|---|---|---|\n");
        for (p, v) in &policies {
            let same: Vec<_> = v.iter().map(|s| s.same).collect();
            let rev: Vec<_> = v.iter().map(|s| s.reverse).collect();
            let _ = writeln!(
                out,
                "| ({:.2}, {:.2}, {:.2}) | {} | {} |",
                p.p_original,
                p.p_permute,
                p.p_reverse,
                pct(mean(&same)),
                pct(mean(&rev))
            );
        }
    }
    Ok(out)
}

/// Finds run directories (those holding a summary) directly under `root`.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(SUMMARY_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Records for `permute-preview`: `n` tagged samples of epoch `epoch`.
pub fn preview(cfg: &TrainConfig, prepared: &Prepared, epoch: usize, n: usize) -> Result<Vec<String>> {
    let (samples, _) = crate::train::epoch_samples(&prepared.dataset.train, cfg, epoch)?;
    Ok(samples.into_iter().take(n).map(|s| s.tagged_text).collect())
}

/// Rebuilds train items with chunks from a written training file.
pub fn read_prepared(train_path: &Path, vocab: Option<Vocab>) -> Result<(Vec<corpus::TrainItem>, Vocab)> {
    let items = corpus::read_train(train_path)?;
    let vocab = vocab.unwrap_or_else(|| Vocab::build(items.iter().map(|t| t.text.as_str())));
    Ok((items, vocab))
}

/// Writes training items (with any chunks) back to JSON lines.
pub fn write_train(path: &Path, items: &[corpus::TrainItem]) -> Result<()> {
    corpus::write_records(path, items.iter().map(Record::from))
}

pub fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::celebrity::TrainFormat;
    use crate::corpus::DatasetSpec;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::new(
            DatasetSpec::Celebrity { facts: 3, scaffold_facts: 3, questions_per_scaffold: 1, train_format: TrainFormat::D1, fewshot: false },
            Strategy::Tri,
        );
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.max_new = 4;
        cfg
    }

    #[test]
    fn grids_have_expected_shape() {
        let base = tiny();
        let s = grid_configs(&base, Grid::Strategy);
        assert_eq!(s.len(), 18);
        let names: std::collections::BTreeSet<String> = s.iter().map(|c| run_name(c).unwrap()).collect();
        assert_eq!(names.len(), 18);
        let p = grid_configs(&base, Grid::Policy);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn hash_tracks_config() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn run_writes_artifacts_and_reloads() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let r = run(&cfg, tmp.path(), None).unwrap();
        for f in [CONFIG_FILE, SEED_FILE, TRAIN_FILE, TEST_FILE, VOCAB_FILE, LOG_FILE, CHECKPOINT_FILE, PREDICTIONS_FILE, METRICS_CSV, METRICS_MD, SUMMARY_FILE] {
            assert!(r.dir.join(f).is_file(), "{f} missing");
        }
        assert_eq!(r.summary.epochs_run, 2);
        let again = run_or_load(&cfg, tmp.path(), None).unwrap();
        assert_eq!(again.summary, r.summary);
        let md = report(&find_runs(tmp.path()).unwrap()).unwrap();
        assert!(md.contains(&r.summary.name));
    }
}
