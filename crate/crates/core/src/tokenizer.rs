//! Word-level tokenizer with atomic mode tags.
//!
//! Text is split on whitespace; each unit is then split into a bare word core
//! plus its leading/trailing punctuation and a possessive `'s` clitic, so that
//! `Lawrence`, `Lawrence's` and `Lawrence.` share one word id. Affix pieces
//! carry a glue marker (`##x` attaches to the previous piece, `x##` to the
//! next one), which makes decoding exact up to whitespace normalization.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const REVERSE_OPEN: TokenId = 4;
pub const REVERSE_CLOSE: TokenId = 5;
pub const PERMUTE_OPEN: TokenId = 6;
pub const PERMUTE_CLOSE: TokenId = 7;

pub const SPECIALS: [&str; 8] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<reverse>",
    "</reverse>",
    "<permute>",
    "</permute>",
];

/// The four mode tags, in id order.
pub const TAGS: [&str; 4] = ["<reverse>", "</reverse>", "<permute>", "</permute>"];

const GLUE: &str = "##";
const LEADING: &[char] = &['"', '(', '[', '\''];
const TRAILING: &[char] = &['.', ',', '?', '!', ':', ';', '"', ')', ']', '\''];

/// Splits text into tokenizer pieces (strings, before id lookup).
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for unit in text.split_whitespace() {
        split_tags(unit, &mut out);
    }
    out
}

fn split_tags(unit: &str, out: &mut Vec<String>) {
    let mut rest = unit;
    while !rest.is_empty() {
        let hit = TAGS
            .iter()
            .filter_map(|t| rest.find(t).map(|at| (at, *t)))
            .min_by_key(|(at, _)| *at);
        match hit {
            Some((at, tag)) => {
                if at > 0 {
                    split_unit(&rest[..at], out);
                }
                out.push(tag.to_string());
                rest = &rest[at + tag.len()..];
            }
            None => {
                split_unit(rest, out);
                break;
            }
        }
    }
}

fn split_unit(unit: &str, out: &mut Vec<String>) {
    let lead_len: usize = unit
        .chars()
        .take_while(|c| LEADING.contains(c))
        .map(char::len_utf8)
        .sum();
    let after_lead = &unit[lead_len..];
    if after_lead.is_empty() {
        out.push(unit.to_string());
        return;
    }

    let mut trailing = Vec::new();
    let mut core = after_lead;
    loop {
        if let Some(stripped) = core.strip_suffix("'s") {
            if !stripped.is_empty() && !stripped.ends_with(TRAILING) {
                trailing.push("'s".to_string());
                core = stripped;
                continue;
            }
        }
        match core.chars().last() {
            Some(c) if TRAILING.contains(&c) && core.len() > c.len_utf8() => {
                trailing.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            }
            _ => break,
        }
    }
    if core.is_empty() {
        out.push(unit.to_string());
        return;
    }
    for c in unit[..lead_len].chars() {
        out.push(format!("{c}{GLUE}"));
    }
    out.push(core.to_string());
    for t in trailing.into_iter().rev() {
        out.push(format!("{GLUE}{t}"));
    }
}

/// Joins pieces back into text, honouring glue markers.
pub fn join_pieces<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for p in pieces {
        let p = p.as_ref();
        if let Some(suffix) = p.strip_prefix(GLUE).filter(|s| !s.is_empty()) {
            out.push_str(suffix);
            glue_next = false;
            continue;
        }
        if !glue_next {
            out.push(' ');
        }
        match p.strip_suffix(GLUE).filter(|s| !s.is_empty()) {
            Some(prefix) => {
                out.push_str(prefix);
                glue_next = true;
            }
            None => {
                out.push_str(p);
                glue_next = false;
            }
        }
    }
    out
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, index }
    }

    /// Builds the vocabulary: specials at ids 0..8, then every piece of the
    /// corpus in lexicographic order.
    pub fn build<I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = BTreeSet::new();
        for line in corpus {
            for p in pieces(line.as_ref()) {
                if !SPECIALS.contains(&p.as_str()) {
                    words.insert(p);
                }
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text` without framing.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        pieces(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(UNK))
            .collect()
    }

    /// `BOS text EOS`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() / 4 + 2);
        ids.push(BOS);
        ids.extend(self.tokenize(text));
        ids.push(EOS);
        ids
    }

    /// `BOS text`, the form fed to the model for completion.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text));
        ids
    }

    /// Inverse of [`Vocab::encode`]; PAD/BOS/EOS are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect();
        join_pieces(&pieces)
    }

    /// Short content hash used to pair checkpoints with evaluation sets.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_then_sorted_words() {
        let v = Vocab::build(["a b", "b c"]);
        assert_eq!(v.len(), 11);
        assert_eq!(&v.tokens()[8..], &["a", "b", "c"]);
        assert_eq!(v, Vocab::build(["a b", "b c"]));
    }

    #[test]
    fn inline_tags_map_to_specials() {
        let v = Vocab::build(["<reverse> x y </reverse>", "<permute>z</permute>"]);
        assert_eq!(v.len(), 11);
        assert_eq!(
            v.tokenize("<reverse> x y </reverse>"),
            vec![REVERSE_OPEN, v.id("x").unwrap(), v.id("y").unwrap(), REVERSE_CLOSE]
        );
        assert_eq!(v.tokenize("<permute>z</permute>")[0], PERMUTE_OPEN);
    }

    #[test]
    fn punctuation_and_possessives_split_off() {
        assert_eq!(
            pieces("Gary Lawrence's father is \"A: 1993\" end?\""),
            vec!["Gary", "Lawrence", "##'s", "father", "is", "\"##", "A", "##:", "1993", "##\"", "end", "##?", "##\""]
        );
        assert_eq!(pieces("- ... \""), vec!["-", ".", "##.", "##.", "\""]);
    }

    #[test]
    fn empty_text_frames_to_bos_eos() {
        let v = Vocab::build(["a"]);
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]), "");
    }

    #[test]
    fn unseen_words_are_unk() {
        let v = Vocab::build(["known words"]);
        assert_eq!(v.tokenize("known stranger"), vec![v.id("known").unwrap(), UNK]);
    }

    #[test]
    fn round_trip_on_sentences() {
        let corpus = [
            "Jennifer Lawrence's father is Gary Lawrence.",
            "The test requires you to answer \"A: 1993\" after \"Q: When did the Cold War end?\"",
            "<reverse> Gary Lawrence. father is Jennifer Lawrence's </reverse>",
            "Never shy about being (the best-selling) author, 'really'.",
        ];
        let v = Vocab::build(corpus);
        for s in corpus {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[\"(']{0,2}[A-Za-z0-9-]{0,5}('s)?[.,?!:;\")']{0,3}", 0..12)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()]);
            prop_assert_eq!(v.decode(&v.encode(&text)), normalize_whitespace(&text));
        }
    }
}
