//! Chunk reordering and tagged serialization.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::ChunkSeq;
use crate::tokenizer::{TokenId, PERMUTE_CLOSE, PERMUTE_OPEN, REVERSE_CLOSE, REVERSE_OPEN};

/// Arrangement applied to a chunk sequence. `Permute` holds a zero-based
/// permutation: chunk `i` of the output is source chunk `perm[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "perm", rename_all = "snake_case")]
pub enum OrderKind {
    Original,
    Reverse,
    Permute(Vec<usize>),
}

impl OrderKind {
    pub fn name(&self) -> &'static str {
        match self {
            OrderKind::Original => "original",
            OrderKind::Reverse => "reverse",
            OrderKind::Permute(_) => "permute",
        }
    }

    /// Source index of each output chunk.
    pub fn indices(&self, m: usize) -> Result<Vec<usize>> {
        match self {
            OrderKind::Original => Ok((0..m).collect()),
            OrderKind::Reverse => Ok((0..m).rev().collect()),
            OrderKind::Permute(perm) => {
                if perm.len() != m {
                    return Err(Error::SizeMismatch { perm: perm.len(), chunks: m });
                }
                let mut seen = vec![false; m];
                for &p in perm {
                    if p >= m || std::mem::replace(&mut seen[p], true) {
                        return Err(Error::Dimension(format!("{perm:?} is not a permutation of 0..{m}")));
                    }
                }
                Ok(perm.clone())
            }
        }
    }
}

/// Probabilities of keeping, permuting or reversing a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationPolicy {
    pub p_original: f64,
    pub p_permute: f64,
    pub p_reverse: f64,
}

impl PermutationPolicy {
    pub const FORWARD_ONLY: Self = Self { p_original: 1.0, p_permute: 0.0, p_reverse: 0.0 };
    pub const FOR_PER: Self = Self { p_original: 0.5, p_permute: 0.5, p_reverse: 0.0 };
    pub const BI: Self = Self { p_original: 0.5, p_permute: 0.0, p_reverse: 0.5 };
    pub const TRI: Self = Self { p_original: 1.0 / 3.0, p_permute: 1.0 / 3.0, p_reverse: 1.0 / 3.0 };

    pub fn new(p_original: f64, p_permute: f64, p_reverse: f64) -> Result<Self> {
        let p = Self { p_original, p_permute, p_reverse };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_original, self.p_permute, self.p_reverse];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("policy", "probabilities must lie in [0, 1]"));
        }
        if (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("policy", "probabilities must sum to 1"));
        }
        Ok(())
    }
}

/// Draws an arrangement for `m` chunks. Permutations are uniform over all
/// `m!` orders, identity and full reversal included.
pub fn sample_order<R: Rng + ?Sized>(m: usize, policy: &PermutationPolicy, rng: &mut R) -> OrderKind {
    let u: f64 = rng.gen();
    if u < policy.p_original {
        OrderKind::Original
    } else if u < policy.p_original + policy.p_permute {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(rng);
        OrderKind::Permute(perm)
    } else if policy.p_reverse > 0.0 {
        OrderKind::Reverse
    } else if policy.p_permute > 0.0 {
        // u landed on the rounding sliver above p_original + p_permute
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(rng);
        OrderKind::Permute(perm)
    } else {
        OrderKind::Original
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutedSample {
    pub source_id: u64,
    pub order: OrderKind,
    pub z_chunks: Vec<Vec<String>>,
    pub tagged_text: String,
}

pub fn reorder(source_id: u64, chunks: &ChunkSeq, order: OrderKind) -> Result<PermutedSample> {
    let z_chunks: Vec<Vec<String>> = order
        .indices(chunks.len())?
        .into_iter()
        .map(|i| chunks.chunks()[i].clone())
        .collect();
    let mut sample = PermutedSample {
        source_id,
        order,
        z_chunks,
        tagged_text: String::new(),
    };
    sample.tagged_text = wrap_tags(&sample);
    Ok(sample)
}

/// Serializes `z_chunks` with single spaces, wrapped in the mode tags for
/// reversed and permuted samples.
pub fn wrap_tags(sample: &PermutedSample) -> String {
    let body = sample
        .z_chunks
        .iter()
        .map(|c| c.join(" "))
        .collect::<Vec<_>>()
        .join(" ");
    match sample.order {
        OrderKind::Original => body,
        OrderKind::Reverse => format!("<reverse> {body} </reverse>"),
        OrderKind::Permute(_) => format!("<permute> {body} </permute>"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    Forward,
    Reverse,
}

/// Token-level baseline: identity or full reversal (tagged). Returns the new
/// token list and the position index of each token. With
/// `shuffle_positions`, content tokens keep their source index and the tags
/// get fresh indices past the content.
pub fn permute_tokens(tokens: &[TokenId], mode: TokenMode, shuffle_positions: bool) -> (Vec<TokenId>, Vec<usize>) {
    let t = tokens.len();
    match mode {
        TokenMode::Forward => (tokens.to_vec(), (0..t).collect()),
        TokenMode::Reverse => {
            let mut out = Vec::with_capacity(t + 2);
            out.push(REVERSE_OPEN);
            out.extend(tokens.iter().rev());
            out.push(REVERSE_CLOSE);
            let positions = if shuffle_positions {
                std::iter::once(t)
                    .chain((0..t).rev())
                    .chain(std::iter::once(t + 1))
                    .collect()
            } else {
                (0..t + 2).collect()
            };
            (out, positions)
        }
    }
}

/// Strips mode tags from serialized text.
pub fn strip_tags(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| !matches!(*w, "<reverse>" | "</reverse>" | "<permute>" | "</permute>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_tag(id: TokenId) -> bool {
    matches!(id, REVERSE_OPEN | REVERSE_CLOSE | PERMUTE_OPEN | PERMUTE_CLOSE)
}
