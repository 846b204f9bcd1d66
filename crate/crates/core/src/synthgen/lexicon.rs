use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthgen::glyphs::script_for;

pub const MIN_WORD_LEN: usize = 3;
pub const MAX_WORD_LEN: usize = 6;
const MIN_ALPHABET: usize = 8;

/// Fixed semantic vocabulary: one word per (semantic id, language).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    languages: Vec<String>,
    /// `words[language][semantic_id]`
    words: Vec<Vec<String>>,
}

impl Lexicon {
    /// Draws `num_classes` words per language from that language's script.
    pub fn build(num_classes: usize, languages: &[String], seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        let mut words = Vec::with_capacity(languages.len());
        for lang in languages {
            let alphabet = &script_for(lang)?.alphabet;
            if alphabet.len() < MIN_ALPHABET {
                return Err(Error::Capacity(format!(
                    "alphabet of `{lang}` has {} symbols, need {MIN_ALPHABET}",
                    alphabet.len()
                )));
            }
            let capacity: f64 = (MIN_WORD_LEN..=MAX_WORD_LEN)
                .map(|n| (alphabet.len() as f64).powi(n as i32))
                .sum();
            // Stay well under capacity so rejection sampling terminates quickly.
            if num_classes as f64 > capacity / 2.0 {
                return Err(Error::Capacity(format!(
                    "{num_classes} classes exceed the collision-free capacity of `{lang}`"
                )));
            }
            let mut rng = seed::rng(&[seed, seed::str_key(lang), 0x1e71]);
            let mut seen = HashSet::new();
            let mut list = Vec::with_capacity(num_classes);
            while list.len() < num_classes {
                let len = rng.random_range(MIN_WORD_LEN..=MAX_WORD_LEN);
                let w: String = (0..len)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect();
                if seen.insert(w.clone()) {
                    list.push(w);
                }
            }
            words.push(list);
        }
        Ok(Lexicon {
            languages: languages.to_vec(),
            words,
        })
    }

    /// Rebuilds a lexicon from stored words, re-checking its invariants.
    pub fn from_words(languages: Vec<String>, words: Vec<Vec<String>>) -> Result<Self> {
        if languages.len() != words.len() || languages.is_empty() {
            return Err(Error::Validation(
                "lexicon languages and word lists disagree".into(),
            ));
        }
        let c = words[0].len();
        for (lang, list) in languages.iter().zip(&words) {
            let script = script_for(lang)?;
            if list.len() != c {
                return Err(Error::Validation(format!(
                    "language `{lang}` has {} words, expected {c}",
                    list.len()
                )));
            }
            let distinct: HashSet<_> = list.iter().collect();
            if distinct.len() != list.len() {
                return Err(Error::Validation(format!("duplicate words in `{lang}`")));
            }
            for w in list {
                if w.is_empty() || !w.chars().all(|ch| script.alphabet.contains(&ch)) {
                    return Err(Error::Validation(format!(
                        "word `{w}` is not written in the `{lang}` alphabet"
                    )));
                }
            }
        }
        Ok(Lexicon { languages, words })
    }

    pub fn num_classes(&self) -> usize {
        self.words[0].len()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn words(&self) -> &[Vec<String>] {
        &self.words
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn word(&self, semantic_id: usize, lang: &str) -> Result<&str> {
        let li = self.language_index(lang)?;
        self.words[li]
            .get(semantic_id)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("semantic id {semantic_id} out of range")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs() -> Vec<String> {
        ["en", "zh", "es"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn deterministic_in_seed() {
        let a = Lexicon::build(20, &langs(), 3).unwrap();
        let b = Lexicon::build(20, &langs(), 3).unwrap();
        let c = Lexicon::build(20, &langs(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn words_unique_and_well_formed() {
        let lex = Lexicon::build(2, &langs(), 0).unwrap();
        assert_ne!(lex.word(0, "en").unwrap(), lex.word(1, "en").unwrap());
        let lex = Lexicon::build(50, &langs(), 1).unwrap();
        for list in lex.words() {
            let set: HashSet<_> = list.iter().collect();
            assert_eq!(set.len(), 50);
            for w in list {
                let n = w.chars().count();
                assert!((MIN_WORD_LEN..=MAX_WORD_LEN).contains(&n));
            }
        }
    }

    #[test]
    fn scripts_share_no_characters() {
        let lex = Lexicon::build(20, &langs(), 9).unwrap();
        for y in 0..20 {
            let en: HashSet<char> = lex.word(y, "en").unwrap().chars().collect();
            let zh: HashSet<char> = lex.word(y, "zh").unwrap().chars().collect();
            let es: HashSet<char> = lex.word(y, "es").unwrap().chars().collect();
            assert!(en.is_disjoint(&zh));
            assert!(en.is_disjoint(&es));
            assert!(zh.is_disjoint(&es));
        }
    }

    #[test]
    fn rejects_too_few_classes_and_capacity() {
        assert!(matches!(
            Lexicon::build(1, &langs(), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Lexicon::build(100_000_000, &langs(), 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn unknown_language_is_rejected() {
        let r = Lexicon::build(5, &["xx".to_string()], 0);
        assert!(matches!(r, Err(Error::UnknownLanguage(_))));
        let lex = Lexicon::build(5, &langs(), 0).unwrap();
        assert!(matches!(lex.word(0, "fr"), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn from_words_validates() {
        let lex = Lexicon::build(4, &langs(), 0).unwrap();
        let back = Lexicon::from_words(lex.languages().to_vec(), lex.words().to_vec()).unwrap();
        assert_eq!(back, lex);
        let mut dup = lex.words().to_vec();
        dup[0][1] = dup[0][0].clone();
        assert!(Lexicon::from_words(lex.languages().to_vec(), dup).is_err());
    }
}
