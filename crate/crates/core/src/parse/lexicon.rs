use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::Result;

const BUNDLED: &str = include_str!("../../data/lexicon.txt");

/// Multi-word verb phrases recognised as motion indicators.
#[derive(Debug, Clone, Default)]
pub struct MotionLexicon {
    phrases: BTreeSet<String>,
    // first word -> phrases (as word lists), longest first
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl MotionLexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let mut lex = MotionLexicon::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            lex.insert(line);
        }
        lex
    }

    pub fn insert(&mut self, phrase: &str) {
        let words: Vec<String> = phrase.split_whitespace().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            return;
        }
        let joined = words.join(" ");
        if !self.phrases.insert(joined) {
            return;
        }
        let entry = self.by_first.entry(words[0].clone()).or_default();
        entry.push(words);
        entry.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    }

    pub fn size(&self) -> usize {
        self.phrases.len()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.contains(&phrase.to_lowercase())
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.iter().map(String::as_str)
    }

    /// Words that start some phrase.
    pub fn is_phrase_head(&self, word: &str) -> bool {
        self.by_first.contains_key(word)
    }

    /// Length in words of the longest phrase that is a prefix of `words`.
    pub fn longest_match<S: AsRef<str>>(&self, words: &[S]) -> Option<usize> {
        let first = words.first()?.as_ref();
        self.by_first.get(first)?.iter().find_map(|p| {
            let ok = p.len() <= words.len() && p.iter().zip(words).all(|(a, b)| a == b.as_ref());
            ok.then_some(p.len())
        })
    }
}
