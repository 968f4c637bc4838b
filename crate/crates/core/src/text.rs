//! Small text utilities shared by chunking, the stub providers and the metrics.

use std::collections::BTreeSet;

/// Whitespace token count. This is the tokenizer used for chunk budgets.
pub fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Lower-cased whitespace tokens with surrounding punctuation stripped.
///
/// Tokens that are pure punctuation disappear. Metrics (leakage, TriCR,
/// AvgEW) all count words with this function.
pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Lower-cased alphanumeric characters only: `"I.B.M."` and `"ibm"` share a key.
pub fn normalize_key(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Lower-cased, whitespace runs collapsed to single underscores.
pub fn slug(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Crude English singular form of one word, used for label comparison.
pub fn singular(word: &str) -> String {
    let w = word.to_lowercase();
    if w.len() > 4 && w.ends_with("ies") {
        format!("{}y", &w[..w.len() - 3])
    } else if w.len() > 4 && (w.ends_with("ses") || w.ends_with("xes") || w.ends_with("ches")) {
        w[..w.len() - 2].to_string()
    } else if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") {
        w[..w.len() - 1].to_string()
    } else {
        w
    }
}

/// Label key insensitive to case, punctuation, camelCase and plural forms:
/// "Cities" ~ "city", "birthPlace" ~ "birth_place".
pub fn label_key(label: &str) -> String {
    let mut spaced = String::with_capacity(label.len() + 4);
    let mut prev_lower = false;
    for c in label.chars() {
        if c.is_uppercase() && prev_lower {
            spaced.push(' ');
        }
        prev_lower = c.is_lowercase() || c.is_ascii_digit();
        spaced.push(c);
    }
    spaced
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(singular)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Set of character trigrams of the normalized key (padded).
pub fn char_trigrams(s: &str) -> BTreeSet<String> {
    let key: Vec<char> = format!("  {}  ", normalize_key(s)).chars().collect();
    key.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex SHA-256 of a string.
pub fn sha256_hex(s: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_strip_punctuation() {
        assert_eq!(words("Hello, World! -- (ok)"), vec!["hello", "world", "ok"]);
        assert_eq!(token_count("  a  b\tc\n"), 3);
    }

    #[test]
    fn keys() {
        assert_eq!(normalize_key("I.B.M."), normalize_key("IBM"));
        assert_eq!(slug("Works  At"), "works_at");
        assert_eq!(label_key("Cities"), label_key("city"));
        assert_eq!(label_key("Research Universities"), "research university");
        assert_eq!(singular("class"), "class");
        assert_eq!(label_key("birthPlace"), label_key("birth_place"));
        assert_eq!(singular("boxes"), "box");
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn trigram_similarity() {
        let a = char_trigrams("Acme Corp");
        let b = char_trigrams("ACME corp.");
        assert_eq!(jaccard(&a, &b), 1.0);
        assert!(jaccard(&a, &char_trigrams("Borealis")) < 0.2);
    }
}
