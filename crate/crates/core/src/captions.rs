//! Caption cleaning and the universe of feature phrases.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};

/// A cleaned caption phrase: lowercase, trimmed, single-spaced, free of
/// delimiters, containing at least one letter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeaturePhrase(String);

impl FeaturePhrase {
    /// Accepts only text that is already in cleaned form.
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        match clean_piece(&text) {
            Some(cleaned) if cleaned == text => Ok(FeaturePhrase(text)),
            _ => Err(Error::invalid(format!("{text:?} is not a cleaned feature phrase"))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FeaturePhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for FeaturePhrase {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        FeaturePhrase::new(s)
    }
}

impl From<FeaturePhrase> for String {
    fn from(p: FeaturePhrase) -> String {
        p.0
    }
}

impl AsRef<str> for FeaturePhrase {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

const DELIMITERS: [char; 3] = [',', ';', '.'];

/// Split raw caption text into delimiter-separated pieces, untouched.
pub fn split_pieces(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(DELIMITERS)
}

/// Clean one delimiter-free piece. `None` when nothing with a letter is left.
fn clean_piece(piece: &str) -> Option<String> {
    let mut out = String::with_capacity(piece.len());
    let mut pending_space = false;
    for c in piece.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_alphanumeric() || c == '-' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out.chars().any(char::is_alphabetic).then_some(out)
}

/// Lowercase, split on commas/semicolons/periods, strip symbols other than
/// letters, digits, spaces and hyphens, and drop empty or letterless
/// pieces. First occurrence wins for repeated phrases.
pub fn clean_caption(raw: &str) -> Vec<FeaturePhrase> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for piece in split_pieces(raw) {
        if let Some(p) = clean_piece(piece) {
            if seen.insert(p.clone()) {
                out.push(FeaturePhrase(p));
            }
        }
    }
    out
}

/// All phrases seen across a catalog, with the products containing each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureUniverse {
    sources: BTreeMap<FeaturePhrase, BTreeSet<String>>,
}

impl FeatureUniverse {
    pub fn phrases(&self) -> impl Iterator<Item = &FeaturePhrase> {
        self.sources.keys()
    }

    /// Number of distinct products whose caption contains the phrase.
    pub fn frequency(&self, phrase: &FeaturePhrase) -> usize {
        self.sources.get(phrase).map_or(0, BTreeSet::len)
    }

    pub fn products_with(&self, phrase: &FeaturePhrase) -> Option<&BTreeSet<String>> {
        self.sources.get(phrase)
    }

    pub fn contains(&self, phrase: &FeaturePhrase) -> bool {
        self.sources.contains_key(phrase)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn frequencies(&self) -> BTreeMap<&FeaturePhrase, usize> {
        self.sources.iter().map(|(k, v)| (k, v.len())).collect()
    }
}

pub fn build_universe(catalog: &Catalog) -> FeatureUniverse {
    let mut sources: BTreeMap<FeaturePhrase, BTreeSet<String>> = BTreeMap::new();
    for p in catalog.products() {
        for phrase in clean_caption(&p.caption) {
            sources.entry(phrase).or_default().insert(p.id.clone());
        }
    }
    FeatureUniverse { sources }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Product;
    use proptest::prelude::*;

    fn texts(v: Vec<FeaturePhrase>) -> Vec<String> {
        v.into_iter().map(String::from).collect()
    }

    fn catalog(captions: &[&str]) -> Catalog {
        Catalog::new(
            captions
                .iter()
                .enumerate()
                .map(|(i, c)| Product {
                    id: format!("p{i}"),
                    caption: c.to_string(),
                    image_ref: String::new(),
                    sales: i as f64,
                    categoricals: Default::default(),
                    numerics: Default::default(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cleans_mixed_delimiter_caption() {
        assert_eq!(
            texts(clean_caption("Cable Knit, Folded Cuffs.")),
            vec!["cable knit", "folded cuffs"]
        );
    }

    #[test]
    fn empty_caption() {
        assert!(clean_caption("").is_empty());
    }

    #[test]
    fn dedups_and_drops_empty_pieces() {
        assert_eq!(texts(clean_caption("Zip detail,, zip detail.")), vec!["zip detail"]);
    }

    #[test]
    fn keeps_hyphens_and_digits_drops_symbols() {
        assert_eq!(
            texts(clean_caption("V-Neck; 3 Pockets™ . ★Logo  Print★, 100%, ...")),
            vec!["v-neck", "3 pockets", "logo print"]
        );
    }

    #[test]
    fn phrase_constructor_rejects_uncleaned_text() {
        assert!(FeaturePhrase::new("cable knit").is_ok());
        assert!(FeaturePhrase::new("Cable knit").is_err());
        assert!(FeaturePhrase::new(" cable").is_err());
        assert!(FeaturePhrase::new("a, b").is_err());
        assert!(FeaturePhrase::new("123").is_err());
        assert!(FeaturePhrase::new("").is_err());
    }

    #[test]
    fn universe_counts_products() {
        let u = build_universe(&catalog(&["a, b", "b, c"]));
        let freq: Vec<(String, usize)> = u
            .frequencies()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(
            freq,
            vec![("a".into(), 1), ("b".into(), 2), ("c".into(), 1)]
        );
    }

    #[test]
    fn universe_can_be_empty() {
        assert!(build_universe(&catalog(&["", "...", "42"])).is_empty());
    }

    #[test]
    fn universe_matches_brute_force_recount() {
        use rand::{Rng, SeedableRng};
        let vocab = ["cable knit", "folded cuffs", "zip detail", "palm print", "glass beads", "v-neck"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let captions: Vec<String> = (0..200)
            .map(|_| {
                let k = rng.random_range(0..5);
                (0..k)
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_uppercase())
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect();
        let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
        let u = build_universe(&catalog(&refs));
        for word in vocab {
            let expect = captions
                .iter()
                .filter(|c| {
                    c.split(',')
                        .any(|piece| piece.trim().to_lowercase() == word)
                })
                .count();
            let phrase = FeaturePhrase::new(word).unwrap();
            assert_eq!(u.frequency(&phrase), expect, "{word}");
            assert_eq!(u.products_with(&phrase).map_or(0, |s| s.len()), expect);
        }
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(raw in ".{0,80}") {
            let once = clean_caption(&raw);
            let joined = once.iter().map(FeaturePhrase::as_str).collect::<Vec<_>>().join(", ");
            prop_assert_eq!(clean_caption(&joined), once);
        }

        #[test]
        fn cleaned_phrases_satisfy_invariants(raw in "[A-Za-z0-9 ,.;!?-]{0,60}") {
            for p in clean_caption(&raw) {
                let s = p.as_str();
                prop_assert!(!s.is_empty());
                prop_assert_eq!(s.trim(), s);
                prop_assert!(!s.contains(',') && !s.contains('.') && !s.contains(';'));
                prop_assert_eq!(s.to_lowercase(), s);
            }
        }

        #[test]
        fn total_frequency_bounded_by_phrase_count(captions in proptest::collection::vec("[a-c ,]{0,12}", 1..20)) {
            let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
            let u = build_universe(&catalog(&refs));
            let total: usize = u.frequencies().values().sum();
            let per_product: usize = captions.iter().map(|c| clean_caption(c).len()).sum();
            prop_assert_eq!(total, per_product);
        }
    }
}
