//! Sub-word vocabulary: greedy pair-merge training and longest-match encoding.
//!
//! Words are split into characters, continuation characters carry a `##`
//! prefix, and the most frequent adjacent pair is merged repeatedly. Digits,
//! the decimal point and special tokens are never merged, so any number is
//! encoded one digit per token.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_FORMAT: &str = "medembed-vocab/1";

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
/// Ids `DIGIT_BASE..DIGIT_BASE + 10` are the atomic tokens "0".."9".
pub const DIGIT_BASE: u32 = 5;
pub const POINT_ID: u32 = 15;

const CONT: &str = "##";
const MIN_PAIR_COUNT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    format_version: String,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Lowercases and splits text into words. A decimal number such as `7.5` stays one word; every
/// other non-alphanumeric character becomes a word of its own.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
                && !cur.is_empty();
            if c.is_alphanumeric() || decimal_point {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

fn is_atomic(symbol: &str) -> bool {
    let bare = symbol.strip_prefix(CONT).unwrap_or(symbol);
    bare.chars().any(|c| c.is_ascii_digit() || c == '.') || bare.starts_with('[')
}

fn fixed_tokens() -> Vec<String> {
    let mut t: Vec<String> = [PAD, CLS, SEP, MASK, UNK]
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend((0..10).map(|d| d.to_string()));
    t.push(".".into());
    t.extend((0..10).map(|d| format!("{CONT}{d}")));
    t.push(format!("{CONT}."));
    t
}

impl Vocabulary {
    /// Learns merges on `corpus` until `target_size` tokens exist or no pair
    /// occurs at least twice.
    pub fn train(corpus: &[String], target_size: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.trim().is_empty()) {
            return Err(Error::Input("tokenizer corpus is empty".into()));
        }
        if target_size < 64 {
            return Err(Error::Config(format!(
                "target vocabulary size {target_size} is below 64"
            )));
        }
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in pre_tokenize(line) {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }

        let mut tokens = fixed_tokens();
        let mut seen: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut words: Vec<(Vec<String>, usize)> = Vec::with_capacity(word_counts.len());
        // base alphabet in first-seen order over the sorted word list
        for (w, &n) in &word_counts {
            let symbols: Vec<String> = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONT}{c}")
                    }
                })
                .collect();
            for s in &symbols {
                if !seen.contains_key(s) {
                    seen.insert(s.clone(), tokens.len() as u32);
                    tokens.push(s.clone());
                }
            }
            words.push((symbols, n));
        }
        if tokens.len() > target_size {
            return Err(Error::Config(format!(
                "corpus alphabet needs {} tokens, above target {target_size}",
                tokens.len()
            )));
        }

        let mut merges = Vec::new();
        while tokens.len() < target_size {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, n) in &words {
                for w in symbols.windows(2) {
                    if is_atomic(&w[0]) || is_atomic(&w[1]) {
                        continue;
                    }
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += n;
                }
            }
            // highest count, ties broken lexicographically
            let best = pairs
                .into_iter()
                .filter(|&(_, n)| n >= MIN_PAIR_COUNT)
                .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{}", b.strip_prefix(CONT).unwrap_or(&b));
            for (symbols, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < symbols.len() {
                    if symbols[i] == a && symbols[i + 1] == b {
                        symbols[i] = merged.clone();
                        symbols.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if !seen.contains_key(&merged) {
                seen.insert(merged.clone(), tokens.len() as u32);
                tokens.push(merged);
            }
            merges.push((a, b));
        }
        Ok(Vocabulary {
            format_version: VOCAB_FORMAT.to_string(),
            tokens,
            merges,
            index: seen,
        })
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_digit_id(id: u32) -> bool {
        (DIGIT_BASE..DIGIT_BASE + 10).contains(&id)
    }

    /// Greedy longest-match segmentation of `text` (no special tokens added).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let mut found = None;
                for end in (start + 1..=chars.len()).rev() {
                    let piece: String = chars[start..end].iter().collect();
                    let key = if start == 0 {
                        piece
                    } else {
                        format!("{CONT}{piece}")
                    };
                    if let Some(&id) = self.index.get(&key) {
                        found = Some((id, end));
                        break;
                    }
                }
                match found {
                    Some((id, end)) => {
                        ids.push(id);
                        start = end;
                    }
                    None => {
                        ids.push(UNK_ID);
                        start += 1;
                    }
                }
            }
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace between words.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            if id == CLS_ID || id == PAD_ID || id == SEP_ID {
                continue;
            }
            if let Some(rest) = tok.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(text)?;
        if v.format_version != VOCAB_FORMAT {
            return Err(Error::Input(format!(
                "unsupported vocabulary format {:?}",
                v.format_version
            )));
        }
        if v.tokens.get(..fixed_tokens().len()) != Some(&fixed_tokens()[..]) {
            return Err(Error::Input("vocabulary is missing reserved tokens".into()));
        }
        v.reindex();
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn learns_aa_merge() {
        let v = Vocabulary::train(&corpus(&["aa aa ab"]), 64).unwrap();
        assert!(v.id("aa").is_some());
        assert_eq!(v.merges()[0], ("a".to_string(), "##a".to_string()));
        // "ab" occurs once, below the pair threshold
        assert!(v.id("ab").is_none());
    }

    #[test]
    fn empty_corpus_is_input_error() {
        assert!(matches!(
            Vocabulary::train(&corpus(&["", "  "]), 64),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn digits_never_merge() {
        let v = Vocabulary::train(&corpus(&["1351 1351 1351 13 13 51 51 x1351"]), 128).unwrap();
        for id in v.encode("1351") {
            let tok = v.token(id).unwrap();
            assert_eq!(tok.trim_start_matches("##").len(), 1, "{tok}");
        }
        assert!(v.tokens.iter().all(|t| t
            .trim_start_matches("##")
            .chars()
            .filter(char::is_ascii_digit)
            .count()
            <= 1));
    }

    #[test]
    fn round_trip_words() {
        let v = Vocabulary::train(&corpus(&["sodium level", "sodium", "potassium level"]), 100)
            .unwrap();
        assert_eq!(v.decode(&v.encode("sodium level")), "sodium level");
    }

    #[test]
    fn unknown_char_is_unk() {
        let v = Vocabulary::train(&corpus(&["abc abc"]), 64).unwrap();
        assert_eq!(v.encode("z"), vec![UNK_ID]);
    }

    #[test]
    fn pre_tokenize_keeps_decimals() {
        assert_eq!(
            pre_tokenize("na 7.5 mg/dl"),
            vec!["na", "7.5", "mg", "/", "dl"]
        );
        assert_eq!(pre_tokenize("end."), vec!["end", "."]);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::train(
            &corpus(&["heparin drip", "heparin flush", "insulin drip"]),
            80,
        )
        .unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.to_json().unwrap(), v.to_json().unwrap());
    }
}
