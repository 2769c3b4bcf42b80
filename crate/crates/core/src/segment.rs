//! Sentence segmentation into ordered chunks.
//!
//! Three interchangeable backends produce a [`ChunkSeq`]: fixed n-gram
//! groups, a rule-based heuristic, and an assistant model speaking the `[SEP]`
//! protocol (with a bi-gram fallback whenever its output cannot be trusted).

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assistant::AssistantClient;

pub const SEP: &str = "[SEP]";

/// Few-shot segmentation prompt; `<prompt>` is replaced by the sentence.
pub const SEGMENTATION_PROMPT: &str = "A chat between a curious user and an artificial intelligence assistant. The assistant gives helpful, detailed, and polite answers to the user's questions.

USER:
Segment the input sentence into the smallest semantic units using [SEP] token, and make sure that each unit contains actual meaning. Note that there should be at least one [SEP] token. Do not delete or add any other words and not put the token at the end of the sentence.

Input: You can play \u{201c}Survival of the Tastiest\u{201d} on Android, and on the web. Playing on the web works, but you have to simulate multi-touch for table moving and that can be a bit confusing.
Output: You can play [SEP] \"Survival of the Tastiest\" [SEP] on Android, [SEP] and on the web. [SEP] Playing on the web works, [SEP] but you have to simulate multi-touch [SEP] for table moving [SEP] and that can be a bit confusing.

Input: Pastas used in the game. Unfortunately, the macs where never used
Output: Pastas [SEP] used in the game. [SEP] Unfortunately, the macs where never used

Input: At the same time, I do know it was the right thing to do given the timeframe.
Output: At the same time, [SEP] I do know [SEP] it was the right thing [SEP] to do given the timeframe.

Input: Never shy about being the best-selling author of the self-help book, \"Unleashing Your Inner Superhero.\", Lacey Donnelly lives life on their own terms.
Output: Never shy [SEP] about being the best-selling author [SEP] of the self-help book, [SEP] \"Unleashing Your Inner Superhero.\", [SEP] Lacey Donnelly lives life [SEP] on their own terms.

Input: <prompt>
Output:";

pub fn segmentation_prompt(sentence: &Sentence) -> String {
    SEGMENTATION_PROMPT.replace("<prompt>", &sentence.text())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("assistant output contains no [SEP] separator")]
    NoSeparator,
    #[error("assistant output ends with a [SEP] separator")]
    TrailingSeparator,
    #[error("assistant output has an empty chunk")]
    EmptyChunk,
    #[error("assistant output words differ from the source sentence")]
    WordMismatch,
    #[error("chunk lengths do not partition the sentence")]
    BadPartition,
    #[error("empty sentence")]
    EmptySentence,
}

/// A whitespace-normalized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    words: Vec<String>,
}

impl Sentence {
    pub fn new(text: &str) -> Result<Self, SegmentError> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(SegmentError::EmptySentence);
        }
        Ok(Sentence { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Word count `T`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// A sentence partitioned into `M >= 1` non-empty, ordered chunks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<String>>", into = "Vec<Vec<String>>")]
pub struct ChunkSeq {
    chunks: Vec<Vec<String>>,
}

impl TryFrom<Vec<Vec<String>>> for ChunkSeq {
    type Error = SegmentError;

    fn try_from(chunks: Vec<Vec<String>>) -> Result<Self, Self::Error> {
        if chunks.is_empty() {
            return Err(SegmentError::EmptySentence);
        }
        if chunks.iter().any(Vec::is_empty) {
            return Err(SegmentError::EmptyChunk);
        }
        Ok(ChunkSeq { chunks })
    }
}

impl From<ChunkSeq> for Vec<Vec<String>> {
    fn from(c: ChunkSeq) -> Self {
        c.chunks
    }
}

impl ChunkSeq {
    pub fn new(chunks: Vec<Vec<String>>) -> Result<Self, SegmentError> {
        chunks.try_into()
    }

    /// Cuts `sentence` into consecutive chunks of the given lengths.
    pub fn from_lengths(sentence: &Sentence, lengths: &[usize]) -> Result<Self, SegmentError> {
        if lengths.iter().sum::<usize>() != sentence.len() || lengths.contains(&0) {
            return Err(SegmentError::BadPartition);
        }
        let mut words = sentence.words().iter().cloned();
        let chunks = lengths
            .iter()
            .map(|&l| words.by_ref().take(l).collect())
            .collect();
        ChunkSeq::new(chunks)
    }

    pub fn chunks(&self) -> &[Vec<String>] {
        &self.chunks
    }

    /// Chunk count `M`.
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.chunks.iter().map(Vec::len).collect()
    }

    pub fn words(&self) -> Vec<String> {
        self.chunks.iter().flatten().cloned().collect()
    }

    pub fn chunk_text(&self, i: usize) -> String {
        self.chunks[i].join(" ")
    }

    /// Whether the in-order concatenation reproduces `sentence` word for word.
    pub fn reconstructs(&self, sentence: &Sentence) -> bool {
        self.chunks.iter().flatten().eq(sentence.words().iter())
    }
}

/// Parses assistant output in the `[SEP]` protocol and validates it against
/// the source sentence.
pub fn parse_sep_output(source: &Sentence, assistant_text: &str) -> Result<ChunkSeq, SegmentError> {
    let text = assistant_text.trim();
    if !text.contains(SEP) {
        return Err(SegmentError::NoSeparator);
    }
    if text.ends_with(SEP) {
        return Err(SegmentError::TrailingSeparator);
    }
    let chunks: Vec<Vec<String>> = text
        .split(SEP)
        .map(|part| part.split_whitespace().map(str::to_string).collect())
        .collect();
    let seq = ChunkSeq::new(chunks)?;
    if !seq.reconstructs(source) {
        return Err(SegmentError::WordMismatch);
    }
    Ok(seq)
}

/// Consecutive groups of `n` words; the final chunk holds the remainder.
pub fn segment_ngram(sentence: &Sentence, n: usize) -> ChunkSeq {
    assert!(n >= 1, "n-gram size must be at least 1");
    ChunkSeq {
        chunks: sentence.words().chunks(n).map(<[String]>::to_vec).collect(),
    }
}

const CLOSED_CLASS: &[&str] = &[
    "about", "above", "across", "after", "against", "along", "although", "among", "and", "around",
    "as", "at", "because", "before", "behind", "below", "beneath", "beside", "besides", "between",
    "beyond", "but", "by", "despite", "during", "except", "for", "from", "if", "in", "inside",
    "into", "like", "near", "nor", "of", "off", "on", "onto", "or", "over", "since", "so", "than",
    "that", "though", "through", "throughout", "till", "to", "toward", "towards", "under",
    "unless", "until", "upon", "whereas", "which", "while", "who", "with", "within", "without",
    "yet",
];

fn is_capitalized(word: &str) -> bool {
    word.chars()
        .find(|c| c.is_alphanumeric())
        .is_some_and(char::is_uppercase)
}

fn ends_phrase(word: &str) -> bool {
    word.ends_with([',', '.', ';', ':', '!', '?', '"', ')']) || word.ends_with("'s")
}

fn is_closed_class(word: &str) -> bool {
    let bare: String = word
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    CLOSED_CLASS.contains(&bare.as_str())
}

/// Rule-based segmentation: boundaries after punctuation or a possessive,
/// before a quotation, a closed-class word, or the start of a capitalized run.
/// Boundaries never fall inside a quotation or a run of capitalized words.
pub fn segment_heuristic(sentence: &Sentence) -> ChunkSeq {
    let words = sentence.words();
    let mut chunks: Vec<Vec<String>> = Vec::new();
    let mut current = vec![words[0].clone()];
    let mut in_quote = words[0].matches('"').count() % 2 == 1;
    for pair in words.windows(2) {
        let (prev, word) = (&pair[0], &pair[1]);
        let boundary = !in_quote
            && !(is_capitalized(prev) && is_capitalized(word))
            && (word.starts_with('"')
                || ends_phrase(prev)
                || is_closed_class(word)
                || (is_capitalized(word) && !is_capitalized(prev)));
        if boundary {
            chunks.push(std::mem::take(&mut current));
        }
        current.push(word.clone());
        if word.matches('"').count() % 2 == 1 {
            in_quote = !in_quote;
        }
    }
    chunks.push(current);
    ChunkSeq { chunks }
}

/// Counters shared across a segmentation pass.
#[derive(Debug, Default)]
pub struct SegmentStats {
    pub assistant_ok: AtomicUsize,
    pub fallbacks: AtomicUsize,
}

impl SegmentStats {
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn assistant_ok(&self) -> usize {
        self.assistant_ok.load(Ordering::Relaxed)
    }
}

/// Queries the assistant; any transport or protocol failure degrades to
/// bi-gram chunks and is counted as a fallback.
pub fn segment_with_assistant(
    sentence: &Sentence,
    client: &AssistantClient,
    stats: &SegmentStats,
) -> ChunkSeq {
    let parsed = client
        .complete(&segmentation_prompt(sentence))
        .map_err(|e| e.to_string())
        .and_then(|out| parse_sep_output(sentence, &out).map_err(|e| e.to_string()));
    match parsed {
        Ok(seq) => {
            stats.assistant_ok.fetch_add(1, Ordering::Relaxed);
            seq
        }
        Err(reason) => {
            tracing::debug!(%reason, sentence = %sentence.text(), "segmentation fallback to bi-grams");
            stats.fallbacks.fetch_add(1, Ordering::Relaxed);
            segment_ngram(sentence, 2)
        }
    }
}

/// Segmentation backend selector. Textual form: `heuristic`, `assistant`,
/// `ngram:<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Backend {
    Assistant,
    Heuristic,
    Ngram(usize),
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Assistant => f.write_str("assistant"),
            Backend::Heuristic => f.write_str("heuristic"),
            Backend::Ngram(n) => write!(f, "ngram:{n}"),
        }
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "assistant" => Ok(Backend::Assistant),
            "heuristic" | "semantic" => Ok(Backend::Heuristic),
            other => {
                let n = other
                    .strip_prefix("ngram:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| format!("unknown segmentation backend `{other}`"))?;
                Ok(Backend::Ngram(n))
            }
        }
    }
}

impl TryFrom<String> for Backend {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Backend> for String {
    fn from(b: Backend) -> Self {
        b.to_string()
    }
}

/// Segments every sentence with `backend`. Assistant calls run on up to
/// `client.max_in_flight()` threads; output order follows input order.
pub fn segment_all(
    sentences: &[Sentence],
    backend: Backend,
    client: Option<&AssistantClient>,
    stats: &SegmentStats,
) -> Vec<ChunkSeq> {
    match (backend, client) {
        (Backend::Heuristic, _) => sentences.iter().map(segment_heuristic).collect(),
        (Backend::Ngram(n), _) => sentences.iter().map(|s| segment_ngram(s, n)).collect(),
        (Backend::Assistant, None) => {
            stats.fallbacks.fetch_add(sentences.len(), Ordering::Relaxed);
            sentences.iter().map(|s| segment_ngram(s, 2)).collect()
        }
        (Backend::Assistant, Some(client)) => {
            let next = AtomicUsize::new(0);
            let workers = client.max_in_flight().min(sentences.len()).max(1);
            let mut out: Vec<Option<ChunkSeq>> = vec![None; sentences.len()];
            let results = std::sync::Mutex::new(&mut out);
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= sentences.len() {
                            break;
                        }
                        let seq = segment_with_assistant(&sentences[i], client, stats);
                        results.lock().expect("segmentation results poisoned")[i] = Some(seq);
                    });
                }
            });
            out.into_iter()
                .map(|s| s.expect("every sentence segmented"))
                .collect()
        }
    }
}

/// Offline stand-in for the assistant: answers the segmentation prompt with
/// the heuristic chunks joined by `[SEP]`. Single-chunk sentences come back
/// without a separator and so take the fallback path like a real reply would.
pub fn offline_assistant() -> AssistantClient {
    AssistantClient::mock(crate::assistant::MockTransport::from_fn(|prompt| {
        let input = prompt
            .rsplit("Input: ")
            .next()
            .and_then(|tail| tail.split("\nOutput:").next())
            .unwrap_or("");
        let sentence = Sentence::new(input).map_err(|e| crate::assistant::AssistantError::Malformed(e.to_string()))?;
        let seq = segment_heuristic(&sentence);
        Ok((0..seq.len()).map(|i| seq.chunk_text(i)).collect::<Vec<_>>().join(" [SEP] "))
    }))
}
