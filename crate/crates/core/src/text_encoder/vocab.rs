use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>"];

/// Lowercased word tokens: maximal alphanumeric runs, with every other
/// non-whitespace character as its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical text form: word tokens joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Validation(format!("vocabulary line {} has no tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Validation(format!("vocabulary line {} has a bad id", n + 1)))?;
            if id != n {
                return Err(Error::Validation(format!("vocabulary ids must be dense, line {} has {id}", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation("vocabulary does not start with the special tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Frequency-descending, then lexicographic, after the five specials.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for w in split_words(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    /// True for BOS, word and EOS positions.
    pub mask: Vec<bool>,
}

/// `BOS words EOS PAD...`, exactly `max_len` long. Long texts are cut so
/// that EOS stays last.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Tokenized> {
    if max_len < 2 {
        return Err(Error::Argument(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(split_words(text).iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    let valid = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < valid).collect();
    Ok(Tokenized { ids, mask })
}

/// Inverse of [`tokenize`] for in-vocabulary text; specials other than UNK
/// are dropped and decoding stops at the first EOS.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut words = Vec::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS | CLS => {}
            _ => words.push(vocab.token(id).unwrap_or(SPECIALS[UNK as usize])),
        }
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn counting_example() {
        let v = build_vocab(&["qrs qrs wave"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("qrs"), 5);
        assert_eq!(v.id("wave"), 6);
    }

    #[test]
    fn rare_tokens_become_unk() {
        let v = build_vocab(&["qrs qrs wave"], 2).unwrap();
        assert!(!v.contains("wave"));
        assert_eq!(tokenize("wave", &v, 4).unwrap().ids, vec![BOS, UNK, EOS, PAD]);
    }

    #[test]
    fn empty_text_and_truncation() {
        let v = build_vocab(&["a b c d e"], 1).unwrap();
        let t = tokenize("", &v, 5).unwrap();
        assert_eq!(t.ids, vec![BOS, EOS, PAD, PAD, PAD]);
        assert_eq!(t.mask, vec![true, true, false, false, false]);
        let t = tokenize("a b c d e", &v, 5).unwrap();
        assert_eq!(t.ids.len(), 5);
        assert_eq!(*t.ids.last().unwrap(), EOS);
        assert!(t.mask.iter().all(|&m| m));
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(split_words("RSR' in V1-V3."), vec!["rsr", "'", "in", "v1", "-", "v3", "."]);
    }

    #[test]
    fn build_is_deterministic_and_ordered() {
        let corpus = ["b a a", "c b a", "d"];
        let v1 = build_vocab(&corpus, 1).unwrap();
        assert_eq!(v1, build_vocab(&corpus, 1).unwrap());
        assert_eq!(&v1.tokens()[5..], &["a", "b", "c", "d"]);
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocab(&["Sinus rhythm, 72 bpm."], 1).unwrap();
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in prop::collection::vec("[a-z]{1,6}|[.,:']", 0..20)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str(), "x"], 1).unwrap();
            let t = tokenize(&text, &v, words.len() + 2).unwrap();
            prop_assert_eq!(detokenize(&t.ids, &v), normalize_text(&text));
        }
    }
}
