use std::collections::{BTreeSet, HashMap};

use hoi_core::Taxonomy;

use crate::error::{ModelError, Result};
use crate::templates;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const HOI: &str = "<|hoi|>";
pub const SPECIALS: [&str; 5] = [UNK, EOS, HOI, templates::F_IMG, templates::F_INTER];

const PUNCT: &[char] = &[',', '.', ':', ';', '?', '!'];

/// Whitespace tokenizer that also splits off punctuation and recognizes the
/// special tokens anywhere inside a word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Specials first, then `words` in order with duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for w in SPECIALS.iter().map(|s| s.to_string()).chain(words.into_iter().map(|w| w.as_ref().to_string())) {
            if !index.contains_key(&w) {
                index.insert(w.clone(), vocab.len() as u32);
                vocab.push(w);
            }
        }
        Self { vocab, index }
    }

    /// Vocabulary from the templates, the taxonomy's phrases and choice letters.
    pub fn for_taxonomy(taxonomy: &Taxonomy) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| {
            for piece in split(text) {
                if !SPECIALS.contains(&piece) {
                    words.insert(piece.to_string());
                }
            }
        };
        for t in templates::ALL {
            add(t);
        }
        for o in taxonomy.objects() {
            add(&o.name);
            add(&o.article);
        }
        for v in taxonomy.verbs() {
            add(&v.gerund);
        }
        for i in 0..26 {
            add(&templates::choice_letter(i).unwrap().to_string());
        }
        words.remove(templates::CANDIDATES);
        Self::new(words)
    }

    /// Rebuilds from a persisted vocabulary list, which must start with the
    /// specials.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(ModelError::InvalidInput("vocabulary must start with the special tokens".into()));
        }
        let t = Self::new(vocab.iter().skip(SPECIALS.len()));
        if t.vocab.len() != vocab.len() {
            return Err(ModelError::InvalidInput("vocabulary contains duplicates".into()));
        }
        Ok(t)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        1
    }

    pub fn hoi_id(&self) -> u32 {
        2
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split(text).into_iter().map(|p| self.id(p).unwrap_or(self.unk_id())).collect()
    }

    /// Inverse of [`Tokenizer::encode`] up to whitespace normalization.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            let glue = tok.starts_with(PUNCT) || tok == HOI;
            if !out.is_empty() && !glue {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

/// Pieces of `text` in order: words, single punctuation marks and specials.
pub fn split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(sp) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
                out.push(&rest[..sp.len()]);
                rest = &rest[sp.len()..];
                continue;
            }
            let first = rest.chars().next().unwrap();
            if PUNCT.contains(&first) {
                out.push(&rest[..first.len_utf8()]);
                rest = &rest[first.len_utf8()..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(i, c)| PUNCT.contains(&c) || (i > 0 && SPECIALS.iter().any(|s| rest[i..].starts_with(*s))))
                .map_or(rest.len(), |(i, _)| i);
            out.push(&rest[..end]);
            rest = &rest[end..];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_specials() {
        assert_eq!(
            split("feeding a bird<|hoi|>, holding a bird."),
            vec!["feeding", "a", "bird", "<|hoi|>", ",", "holding", "a", "bird", "."]
        );
        assert_eq!(split("Answer:"), vec!["Answer", ":"]);
    }

    #[test]
    fn round_trips_its_vocabulary() {
        let t = Tokenizer::new(["feeding", "a", "bird", ",", "."]);
        for (i, w) in t.vocab().iter().enumerate() {
            assert_eq!(t.encode(w), vec![i as u32]);
        }
        let text = "feeding a bird<|hoi|>, feeding a bird.";
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.encode("zebra"), vec![t.unk_id()]);
        assert_eq!(t.id(HOI), Some(t.hoi_id()));
    }

    #[test]
    fn persisted_vocab_must_lead_with_specials() {
        let t = Tokenizer::new(["x", "y"]);
        assert_eq!(Tokenizer::from_vocab(t.vocab().to_vec()).unwrap(), t);
        assert!(Tokenizer::from_vocab(vec!["x".into()]).is_err());
    }
}
