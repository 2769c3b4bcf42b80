//! Synthetic entity names.
//!
//! A name is a pure function of `(seed, namespace, index)`. First names
//! encode a seed-keyed bijection of `(index, namespace)`, so names within one
//! seed never collide; family names end in an encoding of the seed itself, so
//! sets generated under different seeds never share a full name.

use crate::rng::{derive, mix64};

const SYLLABLES: [&str; 16] = [
    "ba", "da", "fe", "ga", "ji", "ka", "lo", "ma", "ne", "po", "ri", "sa", "tu", "vo", "wy", "ze",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace {
    Child = 0,
    Parent = 1,
    Person = 2,
    Entity = 3,
}

fn syllables(mut x: u64, min_len: usize) -> String {
    let mut digits = Vec::new();
    while x > 0 || digits.len() < min_len {
        digits.push((x & 0xF) as usize);
        x >>= 4;
    }
    digits.iter().rev().map(|&d| SYLLABLES[d]).collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Four-round Feistel network on 16 bits, keyed by the seed.
fn permute16(seed: u64, x: u16) -> u16 {
    let (mut l, mut r) = ((x >> 8) as u8, x as u8);
    for round in 0..4u64 {
        let f = (mix64(derive(seed, &[0xFE15, round]) ^ r as u64) & 0xFF) as u8;
        (l, r) = (r, l ^ f);
    }
    ((l as u16) << 8) | r as u16
}

/// Capitalized single word, unique per `(namespace, index)` for a fixed seed.
pub fn given_name(seed: u64, ns: Namespace, index: u64) -> String {
    let ordinal = index
        .checked_mul(4)
        .and_then(|v| v.checked_add(ns as u64))
        .expect("entity index overflow");
    let body = match u16::try_from(ordinal) {
        Ok(small) => syllables(permute16(seed, small) as u64, 4),
        // Five or more syllables: disjoint from every 4-syllable name.
        Err(_) => syllables(ordinal, 5),
    };
    capitalize(&body)
}

/// Family name: one of 256 roots followed by the seed tag.
pub fn family_name(seed: u64, root: u8) -> String {
    capitalize(&format!("{}{}", syllables(root as u64, 2), syllables(seed, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn feistel_is_a_bijection() {
        let seen: HashSet<u16> = (0..=u16::MAX).map(|x| permute16(42, x)).collect();
        assert_eq!(seen.len(), 1 << 16);
    }

    #[test]
    fn given_names_unique() {
        let mut seen = HashSet::new();
        for ns in [Namespace::Child, Namespace::Parent, Namespace::Person, Namespace::Entity] {
            for i in 0..5000 {
                assert!(seen.insert(given_name(9, ns, i)));
            }
        }
        assert!(seen.insert(given_name(9, Namespace::Child, 20_000)));
    }

    #[test]
    fn family_names_carry_the_seed() {
        assert_ne!(family_name(1, 7), family_name(17, 7));
        assert_ne!(family_name(0, 7), family_name(16, 7));
        assert!(family_name(3, 200).chars().next().unwrap().is_uppercase());
    }
}
