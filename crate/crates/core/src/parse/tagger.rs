//! Deterministic fallback tagger for raw instruction text.
//!
//! Assigns coarse POS tags from closed-class word lists, a small list of
//! motion verbs and the motion lexicon, then attaches heads with a handful of
//! positional rules so that downstream extraction sees the same kind of tree
//! an off-the-shelf parser produces (prepositions headed by the verb or noun
//! they follow, prepositional objects headed by the preposition).

use super::conll::{Pos, Sentence, Token};
use super::lexicon::MotionLexicon;

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "your", "its", "another", "each", "every",
    "some", "any", "both", "their", "my", "our",
];
const PRONOUNS: &[&str] = &["you", "it", "they", "we", "i", "he", "she", "there", "them", "yourself"];
const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "will", "would", "should", "can",
    "could", "may", "might", "must", "do", "does", "did", "have", "has", "had", "'s", "'re",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but"];
const SUBORDINATORS: &[&str] = &["once", "when", "while", "if", "as", "where", "because", "so", "whereupon"];
const PREPOSITIONS: &[&str] = &[
    "to", "with", "past", "through", "into", "in", "on", "at", "by", "from", "toward", "towards",
    "of", "up", "down", "around", "across", "along", "over", "under", "inside", "outside", "near",
    "onto", "between", "behind", "beside", "before", "after", "until", "out", "off", "beyond",
    "within", "against", "for", "about", "above", "below", "beneath", "next", "away", "upstairs",
    "downstairs",
];
const ADVERBS: &[&str] = &[
    "left", "right", "straight", "forward", "forwards", "slightly", "back", "ahead", "again",
    "then", "here", "just", "immediately", "directly", "now", "finally", "afterwards", "slowly",
    "carefully", "all", "way", "also", "sharply", "hard", "halfway", "not",
];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "white", "black", "brown", "grey", "gray", "yellow", "large", "small",
    "big", "little", "wooden", "glass", "first", "second", "third", "last", "other", "open",
    "closed", "rocking", "dining", "living", "long", "short", "narrow", "wide", "double", "front",
    "main", "same", "nearest", "far", "final", "empty", "round", "tall", "dark", "bright",
];
const NUMBERS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
const VERBS: &[&str] = &[
    "walk", "turn", "go", "move", "stop", "head", "exit", "enter", "pass", "take", "make",
    "continue", "proceed", "climb", "jump", "wait", "follow", "leave", "step", "descend", "ascend",
    "keep", "veer", "stand", "face", "approach", "cross", "reach", "bear", "circle", "travel",
    "walked", "turned", "went", "moved", "stopped", "passed", "entered", "exited", "go", "come",
    "get", "run", "stay", "hang", "walking", "turning", "going", "arrive", "finish", "end",
];
/// Adverbs that open a new clause and attach to the following verb.
pub(crate) const CLAUSE_ADVERBS: &[&str] = &["then", "now", "finally", "afterwards", "next", "again"];

fn is_punct(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| c.is_ascii_punctuation())
}

/// Splits on whitespace and detaches leading/trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut a = 0;
        let mut b = chars.len();
        let mut lead = Vec::new();
        while a < b && is_edge_punct(chars[a]) {
            lead.push(chars[a].to_string());
            a += 1;
        }
        let mut trail = Vec::new();
        while b > a && is_edge_punct(chars[b - 1]) {
            trail.push(chars[b - 1].to_string());
            b -= 1;
        }
        out.extend(lead);
        if a < b {
            out.push(chars[a..b].iter().collect());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

fn is_edge_punct(c: char) -> bool {
    matches!(c, ',' | '.' | '!' | '?' | ';' | ':' | '"' | '(' | ')' | '[' | ']')
}

/// Splits raw text after `.`, `!` or `?` when followed by whitespace or the
/// end of input.
pub fn split_sentences(raw: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = raw.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(i, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let next_is_break = chars.get(k + 1).map_or(true, |&(_, n)| n.is_whitespace());
        if next_is_break {
            let end = i + c.len_utf8();
            let s = raw[start..end].trim();
            if !s.is_empty() && !s.chars().all(|ch| matches!(ch, '.' | '!' | '?')) {
                out.push(s.to_string());
            } else if !s.is_empty() {
                if let Some(last) = out.last_mut() {
                    last.push_str(s);
                }
            }
            start = end;
        }
    }
    let rest = raw[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

fn closed_class(w: &str) -> Option<Pos> {
    if is_punct(w) {
        return Some(Pos::Punct);
    }
    if w.chars().all(|c| c.is_ascii_digit()) || NUMBERS.contains(&w) {
        return Some(Pos::Num);
    }
    let lists: [(&[&str], Pos); 8] = [
        (DETERMINERS, Pos::Det),
        (PRONOUNS, Pos::Pron),
        (AUXILIARIES, Pos::Aux),
        (CONJUNCTIONS, Pos::Cconj),
        (SUBORDINATORS, Pos::Sconj),
        (PREPOSITIONS, Pos::Adp),
        (ADVERBS, Pos::Adv),
        (ADJECTIVES, Pos::Adj),
    ];
    lists.iter().find(|(l, _)| l.contains(&w)).map(|&(_, p)| p)
}

/// Tags and attaches one tokenized sentence.
pub fn tag_sentence(words: &[String], lexicon: &MotionLexicon) -> Sentence {
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let n = lower.len();
    let mut pos = vec![Pos::Noun; n];
    // token -> index of the motion verb whose lexicon phrase covers it
    let mut phrase_of: Vec<Option<usize>> = vec![None; n];

    let mut i = 0;
    while i < n {
        let w = lower[i].as_str();
        let prev = if i > 0 { Some(pos[i - 1]) } else { None };
        let after_nominal_modifier = matches!(prev, Some(Pos::Det | Pos::Adj));
        let verbish = (VERBS.contains(&w) || lexicon.is_phrase_head(w)) && !after_nominal_modifier;
        if verbish {
            if let Some(len) = lexicon.longest_match(&lower[i..]) {
                pos[i] = Pos::Verb;
                for k in i + 1..i + len {
                    pos[k] = match closed_class(&lower[k]) {
                        Some(Pos::Adj) | None => Pos::Adv,
                        Some(p) => p,
                    };
                    phrase_of[k] = Some(i);
                }
                i += len;
                continue;
            }
            pos[i] = Pos::Verb;
            i += 1;
            continue;
        }
        pos[i] = closed_class(w).unwrap_or(Pos::Noun);
        // "the left", "a right": direction words used as nouns
        if matches!(w, "left" | "right") && after_nominal_modifier {
            pos[i] = Pos::Noun;
        }
        i += 1;
    }
    // "in front of": keep "front" nominal when it follows a preposition
    for k in 1..n {
        if lower[k] == "front" && pos[k - 1] == Pos::Adp {
            pos[k] = Pos::Noun;
        }
    }

    let heads = attach(&lower, &pos, &phrase_of);
    let tokens = (0..n)
        .map(|k| Token {
            index: k,
            text: words[k].clone(),
            lemma: lower[k].clone(),
            pos: pos[k],
            head: heads[k].0,
            deprel: heads[k].1.to_string(),
        })
        .collect();
    Sentence::new(tokens)
}

/// Noun-phrase runs as `(start, head)` pairs: maximal DET/ADJ/NUM/NOUN runs
/// whose head is the last noun; a determiner after a noun starts a new run.
fn np_runs(pos: &[Pos], phrase_of: &[Option<usize>]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_noun: Option<usize> = None;
    let close = |runs: &mut Vec<(usize, usize)>, start: Option<usize>, last: Option<usize>| {
        if let (Some(s), Some(h)) = (start, last) {
            runs.push((s, h));
        }
    };
    for k in 0..pos.len() {
        let p = pos[k];
        let member = matches!(p, Pos::Det | Pos::Adj | Pos::Num | Pos::Noun | Pos::Propn) && phrase_of[k].is_none();
        if !member {
            close(&mut runs, start, last_noun);
            start = None;
            last_noun = None;
            continue;
        }
        if p == Pos::Det && last_noun.is_some() {
            close(&mut runs, start, last_noun);
            start = None;
            last_noun = None;
        }
        if start.is_none() {
            start = Some(k);
        }
        if p.is_nominal() {
            last_noun = Some(k);
        }
    }
    close(&mut runs, start, last_noun);
    runs
}

fn attach(lower: &[String], pos: &[Pos], phrase_of: &[Option<usize>]) -> Vec<(usize, &'static str)> {
    let n = pos.len();
    let mut head: Vec<Option<(usize, &'static str)>> = vec![None; n];
    let verbs: Vec<usize> = (0..n).filter(|&k| pos[k] == Pos::Verb).collect();
    let root = verbs
        .first()
        .copied()
        .or_else(|| (0..n).find(|&k| pos[k].is_nominal()))
        .unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    head[root] = Some((root, "root"));

    let prev_verb = |k: usize| verbs.iter().rev().find(|&&v| v < k).copied();
    let next_verb = |k: usize| verbs.iter().find(|&&v| v > k).copied();

    // other verbs hang off the root
    for &v in &verbs {
        if v == root {
            continue;
        }
        let subordinate = (0..v).rev().take_while(|&k| pos[k] != Pos::Verb && pos[k] != Pos::Punct).any(|k| pos[k] == Pos::Sconj);
        head[v] = Some((root, if subordinate { "advcl" } else { "conj" }));
    }
    for k in 0..n {
        if let Some(v) = phrase_of[k] {
            head[k] = Some((v, "prt"));
        }
    }

    // noun phrases: internal tokens -> head noun
    let runs = np_runs(pos, phrase_of);
    let mut np_head_of: Vec<Option<usize>> = vec![None; n];
    for &(s, h) in &runs {
        for k in s..=h {
            np_head_of[k] = Some(h);
            if k != h {
                let rel = match pos[k] {
                    Pos::Det => "det",
                    Pos::Adj => "amod",
                    Pos::Num => "nummod",
                    _ => "compound",
                };
                head[k] = Some((h, rel));
            }
        }
    }

    for k in 0..n {
        if head[k].is_some() && np_head_of[k] != Some(k) {
            continue;
        }
        if k == root {
            continue;
        }
        let left = (0..k).rev().find(|&j| pos[j] != Pos::Punct);
        let attachment = match pos[k] {
            Pos::Adp => {
                // attach to the verb phrase or noun it immediately follows
                match left {
                    Some(j) if pos[j] == Pos::Verb || phrase_of[j].is_some() => {
                        (phrase_of[j].unwrap_or(j), "prep")
                    }
                    Some(j) if pos[j] == Pos::Adp => (j, "pcomp"),
                    Some(j) if np_head_of[j] == Some(j) => (j, "prep"),
                    Some(j) if pos[j] == Pos::Adv => (head_or(&head, j, root), "prep"),
                    _ => (prev_verb(k).unwrap_or(root), "prep"),
                }
            }
            Pos::Noun | Pos::Propn => {
                // head of a noun phrase
                let start = runs.iter().find(|r| r.1 == k).map_or(k, |r| r.0);
                let before = (0..start).rev().find(|&j| pos[j] != Pos::Punct);
                match before {
                    Some(j) if pos[j] == Pos::Adp => (j, "pobj"),
                    Some(j) if pos[j] == Pos::Cconj => {
                        let prev_np = runs.iter().rev().find(|r| r.1 < j).map(|r| r.1);
                        match prev_np {
                            Some(p) if prev_verb(k).map_or(true, |v| v < p) => (p, "conj"),
                            _ => (prev_verb(k).unwrap_or(root), "dobj"),
                        }
                    }
                    _ => match prev_verb(k) {
                        Some(v) => (v, "dobj"),
                        None => (next_verb(k).unwrap_or(root), "nsubj"),
                    },
                }
            }
            Pos::Pron => match left {
                Some(j) if pos[j] == Pos::Adp => (j, "pobj"),
                _ => (next_verb(k).or(prev_verb(k)).unwrap_or(root), "nsubj"),
            },
            Pos::Aux => (next_verb(k).unwrap_or(root), "aux"),
            Pos::Sconj => (next_verb(k).unwrap_or(root), "mark"),
            Pos::Cconj => (next_verb(k).unwrap_or(root), "cc"),
            Pos::Adv => {
                if CLAUSE_ADVERBS.contains(&lower[k].as_str()) {
                    (next_verb(k).or(prev_verb(k)).unwrap_or(root), "advmod")
                } else {
                    (prev_verb(k).or(next_verb(k)).unwrap_or(root), "advmod")
                }
            }
            Pos::Punct => (prev_verb(k).unwrap_or(root), "punct"),
            _ => (prev_verb(k).or(next_verb(k)).unwrap_or(root), "dep"),
        };
        head[k] = Some(attachment);
    }

    let mut out: Vec<(usize, &'static str)> = head.into_iter().map(|h| h.unwrap_or((root, "dep"))).collect();
    // Break any accidental cycle by re-attaching to the root.
    for k in 0..n {
        let mut cur = k;
        let mut steps = 0;
        while out[cur].0 != cur && steps <= n {
            cur = out[cur].0;
            steps += 1;
        }
        if out[cur].0 != cur || cur != root {
            out[k] = (root, "dep");
        }
    }
    out[root] = (root, "root");
    out
}

fn head_or(head: &[Option<(usize, &'static str)>], j: usize, root: usize) -> usize {
    head[j].map_or(root, |h| h.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> Sentence {
        tag_sentence(&tokenize(s), &MotionLexicon::bundled())
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(
            tokenize("Move to the table with chair, and stop."),
            ["Move", "to", "the", "table", "with", "chair", ",", "and", "stop", "."]
        );
        assert_eq!(tokenize("don't stop"), ["don't", "stop"]);
    }

    #[test]
    fn splits_on_final_punctuation() {
        assert_eq!(
            split_sentences("Turn left. There is a rocking chair in it."),
            ["Turn left.", "There is a rocking chair in it."]
        );
        assert_eq!(split_sentences("stop"), ["stop"]);
        assert_eq!(split_sentences("Walk up the stairs."), ["Walk up the stairs."]);
        assert_eq!(split_sentences(""), Vec::<String>::new());
        assert_eq!(split_sentences("Walk 3.5 meters. Stop!"), ["Walk 3.5 meters.", "Stop!"]);
    }

    #[test]
    fn move_to_table_tree_shape() {
        let s = tag("Move to the table with chair, and stop.");
        s.validate().unwrap();
        let p: Vec<Pos> = s.tokens.iter().map(|t| t.pos).collect();
        assert_eq!(p[0], Pos::Verb);
        assert_eq!(p[1], Pos::Adp);
        assert_eq!(p[3], Pos::Noun);
        assert_eq!(p[8], Pos::Verb);
        assert_eq!(s.tokens[1].head, 0);
        assert_eq!(s.tokens[3].head, 1);
        assert_eq!(s.tokens[4].head, 3);
        assert_eq!(s.tokens[5].head, 4);
        assert_eq!(s.depth(3), 2);
        assert_eq!(s.depth(5), 4);
    }

    #[test]
    fn lexicon_phrase_suppresses_inner_verbs() {
        let s = tag("Make a left turn and stop.");
        let verbs: Vec<&str> = s.tokens.iter().filter(|t| t.pos == Pos::Verb).map(|t| t.text.as_str()).collect();
        assert_eq!(verbs, ["Make", "stop"]);
        s.validate().unwrap();
    }

    #[test]
    fn copula_is_not_a_verb() {
        let s = tag("There is a rocking chair in it.");
        assert!(s.tokens.iter().all(|t| t.pos != Pos::Verb));
        s.validate().unwrap();
    }
}
