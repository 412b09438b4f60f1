use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::captions::FeaturePhrase;
use crate::error::{Error, Result};

/// How a phrase is turned into a set before hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShingleMode {
    #[default]
    Unigram,
    Bigram,
    CharTrigram,
}

impl std::str::FromStr for ShingleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigram" | "word-unigram" => Ok(ShingleMode::Unigram),
            "bigram" | "word-bigram" => Ok(ShingleMode::Bigram),
            "trigram" | "char-trigram" => Ok(ShingleMode::CharTrigram),
            other => Err(Error::invalid(format!("unknown shingling mode {other:?}"))),
        }
    }
}

/// Boundary marker for character trigrams; cannot occur in a cleaned phrase.
pub const BOUNDARY: char = '#';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShingleSet(BTreeSet<String>);

impl ShingleSet {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::empty("shingle set"));
        }
        Ok(ShingleSet(set))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_set(&self) -> &BTreeSet<String> {
        &self.0
    }

    /// Exact Jaccard similarity.
    pub fn jaccard(&self, other: &ShingleSet) -> f64 {
        let inter = self.0.intersection(&other.0).count();
        let union = self.0.len() + other.0.len() - inter;
        if union == 0 {
            return 1.0;
        }
        inter as f64 / union as f64
    }
}

pub fn shingle(phrase: &FeaturePhrase, mode: ShingleMode) -> Result<ShingleSet> {
    shingle_text(phrase.as_str(), mode)
}

pub(crate) fn shingle_text(text: &str, mode: ShingleMode) -> Result<ShingleSet> {
    if text.trim().is_empty() {
        return Err(Error::empty("cannot shingle an empty phrase"));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    match mode {
        ShingleMode::Unigram => ShingleSet::from_tokens(words.iter().copied()),
        ShingleMode::Bigram if words.len() < 2 => ShingleSet::from_tokens(words.iter().copied()),
        ShingleMode::Bigram => {
            ShingleSet::from_tokens(words.windows(2).map(|w| format!("{} {}", w[0], w[1])))
        }
        ShingleMode::CharTrigram => {
            let padded: Vec<char> = std::iter::once(BOUNDARY)
                .chain(text.chars())
                .chain(std::iter::once(BOUNDARY))
                .collect();
            ShingleSet::from_tokens(padded.windows(3).map(|w| w.iter().collect::<String>()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phrase(s: &str) -> FeaturePhrase {
        FeaturePhrase::new(s).unwrap()
    }

    #[test]
    fn reordering_is_invisible_to_unigrams() {
        let a = shingle(&phrase("zip and hook fastening"), ShingleMode::Unigram).unwrap();
        let b = shingle(&phrase("hook and zip fastening"), ShingleMode::Unigram).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.jaccard(&b), 1.0);
    }

    #[test]
    fn unigram_tokens() {
        let s = shingle(&phrase("cable knit"), ShingleMode::Unigram).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec!["cable", "knit"]);
    }

    #[test]
    fn bigram_falls_back_for_single_word() {
        let s = shingle(&phrase("pockets"), ShingleMode::Bigram).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec!["pockets"]);
        let s = shingle(&phrase("three zipped pockets"), ShingleMode::Bigram).unwrap();
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec!["three zipped", "zipped pockets"]
        );
    }

    #[test]
    fn trigrams_match_naive_substring_scan() {
        let text = "v-neck";
        let padded = format!("{BOUNDARY}{text}{BOUNDARY}");
        let mut expect = BTreeSet::new();
        for start in 0..padded.len() - 2 {
            expect.insert(padded[start..start + 3].to_string());
        }
        let got = shingle(&phrase(text), ShingleMode::CharTrigram).unwrap();
        assert_eq!(got.as_set(), &expect);
        assert!(expect.contains("#v-") && expect.contains("ck#"));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(shingle_text("", ShingleMode::Unigram).is_err());
        assert!(shingle_text("   ", ShingleMode::CharTrigram).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("unigram".parse::<ShingleMode>().unwrap(), ShingleMode::Unigram);
        assert_eq!("char-trigram".parse::<ShingleMode>().unwrap(), ShingleMode::CharTrigram);
        assert!("fourgram".parse::<ShingleMode>().is_err());
    }
}
