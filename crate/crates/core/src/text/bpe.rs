use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 77;
const BYTE_TOKENS: usize = 256;

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits normalized text into word chunks; every word after the first
/// carries its leading space so that decoding is lossless.
fn words(normalized: &str) -> Vec<Vec<u8>> {
    normalized
        .split(' ')
        .filter(|w| !w.is_empty())
        .enumerate()
        .map(|(i, w)| {
            let mut bytes = Vec::with_capacity(w.len() + 1);
            if i > 0 {
                bytes.push(b' ');
            }
            bytes.extend_from_slice(w.as_bytes());
            bytes
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub start: u32,
    pub end: u32,
    pub pad: u32,
}

/// Byte-level BPE vocabulary: 256 byte tokens, one token per merge (in rank
/// order), then the start/end/pad specials.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), usize>,
    special: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    merges: Vec<(u32, u32)>,
    special: SpecialIds,
}

impl BpeVocab {
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = tokens.len() as u32;
            if a >= n || b >= n {
                return Err(Error::Format {
                    expected: format!("merge {rank} to reference ids below {n}"),
                    found: format!("({a}, {b})"),
                });
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            tokens.push(t);
            ranks.insert((a, b), rank);
        }
        let base = tokens.len() as u32;
        let special = SpecialIds {
            start: base,
            end: base + 1,
            pad: base + 2,
        };
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            merges,
            tokens,
            token_to_id,
            ranks,
            special,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte strings of a merge's two sides.
    pub fn merge_bytes(&self, rank: usize) -> (&[u8], &[u8]) {
        let (a, b) = self.merges[rank];
        (&self.tokens[a as usize], &self.tokens[b as usize])
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut syms: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let merged = (BYTE_TOKENS + rank) as u32;
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    /// Content ids (no specials) of normalized text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(&normalize_text(text))
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Concatenated bytes of all non-special ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter_map(|&id| self.token_bytes(id))
            .flatten()
            .copied()
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: 1,
            merges: self.merges.clone(),
            special: self.special,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != 1 {
            return Err(Error::Format {
                expected: "vocab version 1".into(),
                found: format!("version {}", file.version),
            });
        }
        let vocab = Self::from_merges(file.merges)?;
        if vocab.special != file.special {
            return Err(Error::Format {
                expected: format!("special ids {:?}", vocab.special),
                found: format!("{:?}", file.special),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Trains byte-level BPE. `vocab_size` counts the 256 byte tokens plus
/// merges; the three specials come on top. Merging stops early once no
/// adjacent pair occurs at least twice. Frequency ties go to the
/// lexicographically smallest `(left bytes, right bytes)` pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("BPE corpus is empty".into()));
    }
    if vocab_size <= BYTE_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "vocab_size must exceed the {BYTE_TOKENS} byte tokens, got {vocab_size}"
        )));
    }
    let mut freq: HashMap<Vec<u8>, usize> = HashMap::new();
    for text in corpus {
        for w in words(&normalize_text(text.as_ref())) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(Vec<u8>, usize)> = freq.into_iter().collect();
    entries.sort();
    let mut seqs: Vec<(Vec<u32>, usize)> = entries
        .into_iter()
        .map(|(w, c)| (w.into_iter().map(u32::from).collect(), c))
        .collect();
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (seq, c) in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some(((a, b), _)) = best else { break };
        let new_id = tokens.len() as u32;
        let mut t = tokens[a as usize].clone();
        t.extend_from_slice(&tokens[b as usize]);
        tokens.push(t);
        merges.push((a, b));
        for (seq, _) in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    BpeVocab::from_merges(merges)
}

/// Fixed-length token ids wrapped in start/end markers and padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Length before padding (start and end markers included).
    pub true_len: usize,
    pub eot_index: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Ids up to and including the end marker.
    pub fn active(&self) -> &[u32] {
        &self.ids[..=self.eot_index]
    }
}

/// Tokenizes `text` into exactly `max_len` ids. Overlong content is truncated
/// so the end marker occupies the last kept position.
pub fn tokenize(text: &str, vocab: &BpeVocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len must be at least 2, got {max_len}")));
    }
    let sp = vocab.special();
    let mut content = vocab.encode(text);
    content.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(sp.start);
    ids.extend_from_slice(&content);
    ids.push(sp.end);
    let true_len = ids.len();
    ids.resize(max_len, sp.pad);
    Ok(TokenSequence {
        ids,
        true_len,
        eot_index: true_len - 1,
    })
}

/// Inverse of [`tokenize`] up to normalization and truncation.
pub fn detokenize(tokens: &TokenSequence, vocab: &BpeVocab) -> String {
    vocab.decode(&tokens.ids[1..tokens.eot_index])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn aaaa_first_merge_is_a_a() {
        let v = train_bpe(&["aaaa"], 259).unwrap();
        assert_eq!(v.merge_bytes(0), (&b"a"[..], &b"a"[..]));
        assert!(v.id_of(b"aa").is_some());
        // "aa aa" no longer has a repeated pair
        assert_eq!(v.merges().len(), 1);
    }

    #[test]
    fn empty_strings_give_alphabet_only() {
        let v = train_bpe(&["", "  "], 500).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 256 + 3);
    }

    #[test]
    fn disjoint_alphabets_give_disjoint_merges() {
        let a = train_bpe(&["abab abab cdcd"], 300).unwrap();
        let b = train_bpe(&["xyxy zwzw xyzw"], 300).unwrap();
        let set = |v: &BpeVocab| {
            (0..v.merges().len())
                .map(|r| {
                    let (l, r) = v.merge_bytes(r);
                    (l.to_vec(), r.to_vec())
                })
                .collect::<std::collections::HashSet<_>>()
        };
        assert!(!a.merges().is_empty() && !b.merges().is_empty());
        assert!(set(&a).is_disjoint(&set(&b)));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice
        let v = train_bpe(&["cd ab cd ab"], 257).unwrap();
        assert_eq!(v.merge_bytes(0), (&b" "[..], &b"a"[..]));
        let v = train_bpe(&["cdab", "cdab"], 257).unwrap();
        assert_eq!(v.merge_bytes(0), (&b"a"[..], &b"b"[..]));
    }

    #[test]
    fn vocab_too_small_is_rejected() {
        assert!(train_bpe(&["abc"], 256).is_err());
        assert!(train_bpe::<&str>(&[], 300).is_err());
    }

    #[test]
    fn empty_text_is_start_end_then_pad() {
        let v = train_bpe(&["hello world"], 270).unwrap();
        let t = tokenize("", &v, 77).unwrap();
        let sp = v.special();
        assert_eq!(t.ids.len(), 77);
        assert_eq!(&t.ids[..2], &[sp.start, sp.end]);
        assert!(t.ids[2..].iter().all(|&i| i == sp.pad));
        assert_eq!(t.true_len, 2);
        assert_eq!(t.eot_index, 1);
    }

    #[test]
    fn overlong_text_keeps_end_marker() {
        let v = train_bpe(&["a b c"], 260).unwrap();
        let text = vec!["q"; 200].join(" ");
        let t = tokenize(&text, &v, 77).unwrap();
        assert_eq!(t.ids.len(), 77);
        assert_eq!(t.true_len, 77);
        assert_eq!(t.eot_index, 76);
        assert_eq!(t.ids[76], v.special().end);
        assert_eq!(t.ids[0], v.special().start);
    }

    #[test]
    fn merges_are_applied_in_rank_order() {
        let v = train_bpe(&["slow slow slow tempo tempo"], 300).unwrap();
        let ids = v.encode("slow tempo");
        assert!(ids.len() <= 3, "{ids:?}");
        assert_eq!(v.decode(&ids), "slow tempo");
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = train_bpe(&["an up tempo bright track", "a slow dark track"], 320).unwrap();
        let back = BpeVocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(BpeVocab::from_json(r#"{"version":1,"merges":[[999,1]],"special":{"start":0,"end":1,"pad":2}}"#).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_recovers_normalized_text(text in "[a-zA-Z ,.é]{0,60}") {
            let v = train_bpe(&["an up tempo bright track with high pitch", "quiet dynamics"], 400).unwrap();
            let t = tokenize(&text, &v, 200).unwrap();
            prop_assert_eq!(detokenize(&t, &v), normalize_text(&text));
            prop_assert_eq!(tokenize(&text, &v, 200).unwrap(), t);
        }
    }
}
