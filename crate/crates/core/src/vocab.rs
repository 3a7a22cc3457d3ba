//! Closed word-level vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const SPLIT: &str = "__split__";
pub const PAIR_SEP: &str = ";";
pub const LABEL_SEP: &str = "!";

/// Smallest vocabulary we construct; short word lists are padded with
/// `<extra_N>` placeholders.
pub const MIN_VOCAB: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
    pub split: TokenId,
    pub pair_sep: TokenId,
    pub label_sep: TokenId,
    /// Reserved `<gen_k>` markers, first id and count.
    pub gen_first: TokenId,
    pub gen_count: u32,
}

impl SpecialIds {
    pub fn gen(&self, k: u32) -> Option<TokenId> {
        (k < self.gen_count).then_some(self.gen_first + k)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    gen_slots: u32,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        let v = Vocabulary::build(Vec::<String>::new(), f.gen_slots);
        // Rebuild from the stored order so ids are exactly preserved.
        let mut index = HashMap::with_capacity(f.tokens.len());
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for (i, t) in v.tokens.iter().take(v.special_prefix_len()).enumerate() {
            if f.tokens.get(i) != Some(t) {
                return Err(Error::Format(format!("special token {t:?} not at id {i}")));
            }
        }
        Ok(Self { tokens: f.tokens, index, special: v.special })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { gen_slots: v.special.gen_count, tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Specials first, then `<gen_k>` slots, then the sorted distinct words.
    pub fn build<I, S>(words: I, gen_slots: u32) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> =
            [PAD, EOS, UNK, SPLIT, PAIR_SEP, LABEL_SEP].iter().map(|s| s.to_string()).collect();
        let gen_first = tokens.len() as TokenId;
        tokens.extend((0..gen_slots).map(|k| format!("<gen_{k}>")));
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| w.as_ref().split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .filter(|w| !reserved.contains(w))
            .collect();
        tokens.extend(words);
        let mut extra = 0;
        while tokens.len() < MIN_VOCAB {
            tokens.push(format!("<extra_{extra}>"));
            extra += 1;
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self {
            tokens,
            index,
            special: SpecialIds {
                pad: 0,
                eos: 1,
                unk: 2,
                split: 3,
                pair_sep: 4,
                label_sep: 5,
                gen_first,
                gen_count: gen_slots,
            },
        }
    }

    fn special_prefix_len(&self) -> usize {
        (self.special.gen_first + self.special.gen_count) as usize
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> &SpecialIds {
        &self.special
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Whitespace word segmentation; out-of-vocabulary words become UNK.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(self.special.unk)).collect()
    }

    /// Token ids with EOS appended, as fed to the model.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.tokenize(text);
        ids.push(self.special.eos);
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace
    /// canonicalization. Stops at the first EOS; PAD is skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == self.special.eos {
                break;
            }
            if id == self.special.pad {
                continue;
            }
            out.push(self.token(id));
        }
        out.join(" ")
    }

    /// Number of UNK ids the text maps to.
    pub fn unk_count(&self, text: &str) -> usize {
        text.split_whitespace().filter(|w| !self.contains(w)).count()
    }
}

/// Whitespace-normalized form of a text.
pub fn canonical(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocabulary {
        Vocabulary::build(["alpha beta", "gamma", "delta"], 4)
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(small().tokenize("").is_empty());
    }

    #[test]
    fn in_vocab_words_round_trip() {
        let v = small();
        let ids = v.tokenize("alpha  gamma delta");
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids), canonical("alpha  gamma delta"));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = small();
        let ids = v.tokenize("alpha zeta gamma");
        assert!(!v.contains("zeta"));
        assert_eq!(ids[1], v.special().unk);
        assert_ne!(ids[0], v.special().unk);
    }

    #[test]
    fn specials_distinct_and_size_floor() {
        let v = small();
        let s = v.special();
        let mut ids = vec![s.pad, s.eos, s.unk, s.split, s.pair_sep, s.label_sep];
        ids.extend((0..s.gen_count).map(|k| s.gen(k).unwrap()));
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(v.len() >= MIN_VOCAB);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
        }
    }

    #[test]
    fn serde_preserves_ids() {
        let v = small();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.special(), v.special());
    }
}
