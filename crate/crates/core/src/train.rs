//! Run configuration, per-epoch sample construction and the optimization
//! loop.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assistant::AssistantConfig;
use crate::corpus::{DatasetSpec, Direction, TrainItem};
use crate::error::{Error, Result};
use crate::model::{backward, ModelConfig, ModelParams, Sequence, Batch};
use crate::permute::{permute_tokens, reorder, sample_order, OrderKind, PermutationPolicy, TokenMode};
use crate::rng::{purpose, stream};
use crate::segment::Backend;
use crate::tokenizer::{Vocab, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ForwardOnly,
    ForPer,
    Bi,
    Tri,
    /// Whole-sentence token reversal.
    TokenBi,
    /// Token reversal where every token keeps its source position index.
    TokenBiPos,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::ForwardOnly,
        Strategy::ForPer,
        Strategy::Bi,
        Strategy::Tri,
        Strategy::TokenBi,
        Strategy::TokenBiPos,
    ];

    pub fn default_policy(self) -> PermutationPolicy {
        match self {
            Strategy::ForwardOnly => PermutationPolicy::FORWARD_ONLY,
            Strategy::ForPer => PermutationPolicy::FOR_PER,
            Strategy::Bi | Strategy::TokenBi | Strategy::TokenBiPos => PermutationPolicy::BI,
            Strategy::Tri => PermutationPolicy::TRI,
        }
    }

    pub fn token_level(self) -> bool {
        matches!(self, Strategy::TokenBi | Strategy::TokenBiPos)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ForwardOnly => "forward_only",
            Strategy::ForPer => "for_per",
            Strategy::Bi => "bi",
            Strategy::Tri => "tri",
            Strategy::TokenBi => "token_bi",
            Strategy::TokenBiPos => "token_bi_pos",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
    pub init_std: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { d_model: 128, heads: 4, layers: 2, context: 128, init_std: 0.02 }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab: usize) -> ModelConfig {
        ModelConfig { vocab, d_model: self.d_model, heads: self.heads, layers: self.layers, context: self.context }
    }
}

/// A bound on an evaluation aggregate; a violated bound makes `eval`
/// exit with a failure status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    #[serde(default)]
    pub direction: Option<Direction>,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

fn default_backend() -> Backend {
    Backend::Heuristic
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> f64 {
    0.03
}
fn default_max_new() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_backend")]
    pub segmenter: Backend,
    pub strategy: Strategy,
    /// Overrides the strategy's default order probabilities where allowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PermutationPolicy>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Draw each sentence's order once and reuse it every epoch.
    #[serde(default)]
    pub fixed_per_sentence: bool,
    /// Stop once the determined-position loss of an epoch falls below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_loss: Option<f64>,
    /// Also write a checkpoint every this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_every: Option<usize>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<AssistantConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<Threshold>,
}

impl TrainConfig {
    pub fn new(dataset: DatasetSpec, strategy: Strategy) -> Self {
        TrainConfig {
            dataset,
            segmenter: default_backend(),
            strategy,
            policy: None,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            warmup_ratio: default_warmup(),
            weight_decay: 0.0,
            seed: 0,
            fixed_per_sentence: false,
            stop_loss: None,
            save_every: None,
            model: ModelSettings::default(),
            max_new: default_max_new(),
            assistant: None,
            thresholds: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The order probabilities in effect.
    pub fn effective_policy(&self) -> PermutationPolicy {
        self.policy.unwrap_or_else(|| self.strategy.default_policy())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let policy = self.effective_policy();
        policy.validate().map_err(|e| Error::config("policy", e.to_string()))?;
        if self.strategy != Strategy::Tri {
            if let Some(p) = self.policy {
                if p != self.strategy.default_policy() {
                    return Err(Error::config(
                        "policy",
                        format!("strategy `{}` fixes the policy to {:?}", self.strategy, self.strategy.default_policy()),
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.save_every == Some(0) {
            return Err(Error::config("save_every", "must be positive"));
        }
        if self.model.d_model % self.model.heads.max(1) != 0 || self.model.heads == 0 {
            return Err(Error::config("model.heads", "must divide model.d_model"));
        }
        if self.model.context < 2 {
            return Err(Error::config("model.context", "must be at least 2"));
        }
        if let Some(a) = &self.assistant {
            a.validate().map_err(|e| Error::config("assistant", e.to_string()))?;
        }
        Ok(())
    }
}

/// One serialized training sample of an epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSample {
    /// Index of the source line in the training list.
    pub source: usize,
    pub source_id: u64,
    pub order: OrderKind,
    pub tagged_text: String,
    pub epoch: usize,
}

/// Counts of original / permuted / reversed permutable samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeCounts {
    pub original: usize,
    pub permute: usize,
    pub reverse: usize,
}

impl ModeCounts {
    pub fn total(&self) -> usize {
        self.original + self.permute + self.reverse
    }

    pub fn frequencies(&self) -> [f64; 3] {
        let n = self.total().max(1) as f64;
        [self.original as f64 / n, self.permute as f64 / n, self.reverse as f64 / n]
    }

    fn add(&mut self, order: &OrderKind) {
        match order {
            OrderKind::Original => self.original += 1,
            OrderKind::Permute(_) => self.permute += 1,
            OrderKind::Reverse => self.reverse += 1,
        }
    }
}

/// Draws every sentence's order for `epoch` and serializes it. Token-level
/// strategies report their reversals as `Reverse` with the untouched text;
/// the token reversal happens in [`encode_sample`].
pub fn epoch_samples(items: &[TrainItem], cfg: &TrainConfig, epoch: usize) -> Result<(Vec<EpochSample>, ModeCounts)> {
    let policy = cfg.effective_policy();
    let key = if cfg.fixed_per_sentence { 0 } else { epoch as u64 };
    let mut counts = ModeCounts::default();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if !item.permutable {
            out.push(EpochSample {
                source: i,
                source_id: item.id,
                order: OrderKind::Original,
                tagged_text: item.text.clone(),
                epoch,
            });
            continue;
        }
        let mut rng = stream(cfg.seed, &[purpose::ORDER, i as u64, key]);
        let (order, text) = if policy == PermutationPolicy::FORWARD_ONLY && item.chunks.is_none() {
            (OrderKind::Original, crate::tokenizer::normalize_whitespace(&item.text))
        } else if cfg.strategy.token_level() {
            let order = match sample_order(1, &policy, &mut rng) {
                OrderKind::Original => OrderKind::Original,
                _ => OrderKind::Reverse,
            };
            (order, item.text.clone())
        } else {
            let chunks = item.chunks.as_ref().ok_or_else(|| {
                Error::config("segmenter", format!("training line {i} has no cached segmentation"))
            })?;
            let order = sample_order(chunks.len(), &policy, &mut rng);
            let sample = reorder(item.id, chunks, order)?;
            debug_assert!(
                sample.order != OrderKind::Original || sample.tagged_text == crate::tokenizer::normalize_whitespace(&item.text)
            );
            (sample.order, sample.tagged_text)
        };
        counts.add(&order);
        out.push(EpochSample { source: i, source_id: item.id, order, tagged_text: text, epoch });
    }
    Ok((out, counts))
}

/// Token ids and positions of a sample, framed `BOS … EOS`.
pub fn encode_sample(vocab: &Vocab, sample: &EpochSample, strategy: Strategy) -> Sequence {
    if strategy.token_level() && sample.order == OrderKind::Reverse {
        let content = vocab.tokenize(&sample.tagged_text);
        let (toks, pos) = permute_tokens(&content, TokenMode::Reverse, strategy == Strategy::TokenBiPos);
        let mut ids = Vec::with_capacity(toks.len() + 2);
        ids.push(BOS);
        ids.extend(toks);
        ids.push(EOS);
        let mut positions = Vec::with_capacity(ids.len());
        positions.push(0);
        positions.extend(pos.iter().map(|p| p + 1));
        positions.push(ids.len() - 1);
        Sequence::with_positions(ids, positions)
    } else {
        Sequence::new(vocab.encode(&sample.tagged_text))
    }
}

pub struct Epoch {
    pub samples: Vec<EpochSample>,
    pub batches: Vec<Batch>,
    pub counts: ModeCounts,
}

/// Samples, encodes, shuffles (by seed and epoch) and batches one epoch.
pub fn make_epoch(items: &[TrainItem], cfg: &TrainConfig, vocab: &Vocab, epoch: usize) -> Result<Epoch> {
    let (mut samples, counts) = epoch_samples(items, cfg, epoch)?;
    samples.shuffle(&mut stream(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
    let mut seqs = Vec::with_capacity(samples.len());
    for s in &samples {
        let seq = encode_sample(vocab, s, cfg.strategy);
        let longest = seq.positions.iter().max().map_or(0, |p| p + 1).max(seq.len());
        if longest > cfg.model.context {
            return Err(Error::ContextOverflow { len: longest, max: cfg.model.context });
        }
        seqs.push(seq);
    }
    let batches = seqs
        .chunks(cfg.batch_size)
        .map(|c| Batch::new(c.to_vec()))
        .collect();
    Ok(Epoch { samples, batches, counts })
}

/// Marks targets that are a deterministic function of their prefix within
/// the given sequences: the prefix has exactly one continuation. Only
/// these positions can be driven to zero loss by memorization.
pub fn determined_targets(seqs: &[&Sequence]) -> Vec<Vec<bool>> {
    let mut children: HashMap<(usize, u32), usize> = HashMap::new();
    let mut fanout: Vec<usize> = vec![0];
    let mut paths = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut node = 0;
        let mut path = Vec::with_capacity(s.len());
        for &id in &s.ids {
            path.push(node);
            let next = fanout.len();
            node = *children.entry((node, id)).or_insert_with(|| {
                fanout.push(0);
                next
            });
            if node == next {
                fanout[path[path.len() - 1]] += 1;
            }
        }
        paths.push(path);
    }
    seqs.iter()
        .zip(&paths)
        .map(|(s, path)| (0..s.len()).map(|t| t > 0 && s.loss_mask[t] && fanout[path[t]] == 1).collect())
        .collect()
}

/// Adam with decoupled weight decay.
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam { m: vec![0.0; params], v: vec![0.0; params], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f32, weight_decay: f32) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for (ps, gs) in params.slices_mut().into_iter().zip(grads.slices()) {
            for (p, &g) in ps.iter_mut().zip(gs) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * weight_decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Learning rate at optimizer step `step` (0-based): linear warmup, then
/// constant.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = (cfg.warmup_ratio * total_steps as f64).ceil() as usize;
    if warmup == 0 || step >= warmup {
        cfg.lr
    } else {
        cfg.lr * (step + 1) as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean next-token NLL over every target.
    pub loss: f64,
    /// Mean NLL over targets fixed by their prefix (see [`determined_targets`]).
    pub determined_loss: f64,
    pub lr: f64,
    pub original: f64,
    pub permute: f64,
    pub reverse: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,determined_loss,lr,original,permute,reverse";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.6e},{:.6},{:.6},{:.6}",
            self.epoch, self.loss, self.determined_loss, self.lr, self.original, self.permute, self.reverse
        )
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{LOG_HEADER}")?;
    for row in log {
        writeln!(out, "{}", row.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch. `on_epoch` sees each finished epoch, e.g. to write
/// periodic checkpoints.
pub fn train_run(
    cfg: &TrainConfig,
    items: &[TrainItem],
    vocab: &Vocab,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model.config(vocab.len());
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed, cfg.model.init_std)?;
    let mut adam = Adam::new(params.len());
    let batches_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ep = make_epoch(items, cfg, vocab, epoch)?;
        let all: Vec<&Sequence> = ep.batches.iter().flat_map(|b| b.seqs.iter()).collect();
        let determined = determined_targets(&all);
        let (mut sum, mut count) = (0.0f64, 0usize);
        let (mut dsum, mut dcount) = (0.0f64, 0usize);
        let mut lr = 0.0;
        let mut seq_index = 0;
        for batch in &ep.batches {
            lr = lr_at(cfg, step, total_steps);
            let (report, grads) = backward(&params, batch)?;
            if !report.mean.is_finite() {
                return Err(Error::NonFiniteLoss { batch: step, lr });
            }
            for per in &report.nll {
                for (t, &l) in per.iter().enumerate() {
                    if all[seq_index].loss_mask[t] && t > 0 {
                        sum += l as f64;
                        count += 1;
                        if determined[seq_index][t] {
                            dsum += l as f64;
                            dcount += 1;
                        }
                    }
                }
                seq_index += 1;
            }
            adam.step(&mut params, &grads, lr as f32, cfg.weight_decay as f32);
            step += 1;
        }
        let [original, permute, reverse] = ep.counts.frequencies();
        let row = EpochLog {
            epoch,
            loss: sum / count.max(1) as f64,
            determined_loss: dsum / dcount.max(1) as f64,
            lr,
            original,
            permute,
            reverse,
        };
        tracing::info!(epoch, loss = row.loss, determined = row.determined_loss, "epoch done");
        on_epoch(&row, &params)?;
        let stop = cfg.stop_loss.is_some_and(|s| row.determined_loss < s);
        log.push(row);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::celebrity::TrainFormat;
    use crate::segment::{segment_heuristic, Sentence};

    fn items(texts: &[&str]) -> Vec<TrainItem> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| TrainItem {
                id: i as u64,
                text: t.to_string(),
                format: "x".into(),
                direction: "forward".into(),
                permutable: true,
                chunks: Some(segment_heuristic(&Sentence::new(t).unwrap())),
            })
            .collect()
    }

    fn celeb() -> DatasetSpec {
        DatasetSpec::Celebrity {
            facts: 2,
            scaffold_facts: 0,
            questions_per_scaffold: 0,
            train_format: TrainFormat::D1,
            fewshot: false,
        }
    }

    #[test]
    fn policy_consistency() {
        let mut cfg = TrainConfig::new(celeb(), Strategy::Bi);
        assert_eq!(cfg.effective_policy(), PermutationPolicy::BI);
        cfg.policy = Some(PermutationPolicy::TRI);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        cfg.strategy = Strategy::Tri;
        cfg.policy = Some(PermutationPolicy::new(0.25, 0.25, 0.5).unwrap());
        assert!(cfg.validate().is_ok());
        cfg.warmup_ratio = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "warmup_ratio"));
    }

    #[test]
    fn config_toml_round_trip() {
        let text = r#"
strategy = "tri"
epochs = 5
seed = 9
segmenter = "ngram:3"
[dataset]
kind = "qa"
two_direction = 10
a2q_only = 2
[policy]
p_original = 0.5
p_permute = 0.25
p_reverse = 0.25
"#;
        let cfg = TrainConfig::from_toml(text).unwrap();
        assert_eq!(cfg.segmenter, Backend::Ngram(3));
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.warmup_ratio, 0.03);
        assert_eq!(cfg.weight_decay, 0.0);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("strategy = \"sideways\"\n[dataset]\nkind = \"qa\"").is_err());
    }

    #[test]
    fn forward_only_epochs_are_untagged() {
        let its = items(&["Aba Kor's father is Bel Kor.", "Cid Mo's mother is Dee Mo."]);
        let cfg = TrainConfig::new(celeb(), Strategy::ForwardOnly);
        for e in 0..3 {
            let (samples, counts) = epoch_samples(&its, &cfg, e).unwrap();
            assert_eq!(counts.original, 2);
            for (s, it) in samples.iter().zip(&its) {
                assert_eq!(s.tagged_text, it.text);
            }
        }
    }

    #[test]
    fn tri_frequencies_and_resampling() {
        let texts: Vec<String> = (0..3000).map(|i| format!("Name{i} Kor's father is Other{i} Kor.")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let its = items(&refs);
        let cfg = TrainConfig::new(celeb(), Strategy::Tri);
        let (a, counts) = epoch_samples(&its, &cfg, 0).unwrap();
        for f in counts.frequencies() {
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{f}");
        }
        let (b, _) = epoch_samples(&its, &cfg, 1).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x.order != y.order));
        let fixed = TrainConfig { fixed_per_sentence: true, ..cfg };
        let (c, _) = epoch_samples(&its, &fixed, 0).unwrap();
        let (d, _) = epoch_samples(&its, &fixed, 5).unwrap();
        assert!(c.iter().zip(&d).all(|(x, y)| x.order == y.order));
    }

    #[test]
    fn token_level_reversal_positions() {
        let vocab = Vocab::build(["a b c"]);
        let s = EpochSample { source: 0, source_id: 0, order: OrderKind::Reverse, tagged_text: "a b c".into(), epoch: 0 };
        let seq = encode_sample(&vocab, &s, Strategy::TokenBiPos);
        assert_eq!(seq.positions, vec![0, 4, 3, 2, 1, 5, 6]);
        let plain = encode_sample(&vocab, &s, Strategy::TokenBi);
        assert_eq!(plain.positions, (0..7).collect::<Vec<_>>());
        assert_eq!(plain.ids, seq.ids);
        assert_eq!(vocab.decode(&seq.ids), "<reverse> c b a </reverse>");
    }

    #[test]
    fn determined_positions() {
        let a = Sequence::new(vec![1, 10, 11, 12, 2]);
        let b = Sequence::new(vec![1, 10, 13, 12, 2]);
        let c = Sequence::new(vec![1, 14, 11, 2]);
        let d = determined_targets(&[&a, &b, &c]);
        // After BOS three continuations; after `10` two; everything later is fixed.
        assert_eq!(d[0], vec![false, false, false, true, true]);
        assert_eq!(d[1], vec![false, false, false, true, true]);
        assert_eq!(d[2], vec![false, false, true, true]);
    }

    #[test]
    fn warmup_schedule() {
        let mut cfg = TrainConfig::new(celeb(), Strategy::ForwardOnly);
        cfg.lr = 1e-3;
        cfg.warmup_ratio = 0.1;
        assert!((lr_at(&cfg, 0, 100) - 1e-4).abs() < 1e-12);
        assert!((lr_at(&cfg, 9, 100) - 1e-3).abs() < 1e-12);
        assert_eq!(lr_at(&cfg, 50, 100), 1e-3);
        cfg.warmup_ratio = 0.0;
        assert_eq!(lr_at(&cfg, 0, 100), 1e-3);
    }

    #[test]
    fn memorizes_one_sentence_deterministically() {
        let its = items(&["Aba Kor's father is Bel Kor."]);
        let vocab = Vocab::build(its.iter().map(|i| i.text.as_str()));
        let mut cfg = TrainConfig::new(celeb(), Strategy::ForwardOnly);
        cfg.model = ModelSettings { d_model: 32, heads: 2, layers: 2, context: 16, init_std: 0.02 };
        cfg.epochs = 300;
        cfg.lr = 3e-3;
        let a = train_run(&cfg, &its, &vocab, |_, _| Ok(())).unwrap();
        let last = a.log.last().unwrap();
        assert!(last.loss < 0.01, "{}", last.loss);
        let b = train_run(&cfg, &its, &vocab, |_, _| Ok(())).unwrap();
        assert_eq!(a.log.last().unwrap().loss.to_bits(), b.log.last().unwrap().loss.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn overlong_sentence_is_rejected() {
        let its = items(&["one two three four five six seven eight nine ten"]);
        let vocab = Vocab::build(its.iter().map(|i| i.text.as_str()));
        let mut cfg = TrainConfig::new(celeb(), Strategy::ForwardOnly);
        cfg.model.context = 8;
        assert!(matches!(make_epoch(&its, &cfg, &vocab, 0), Err(Error::ContextOverflow { .. })));
    }
}
