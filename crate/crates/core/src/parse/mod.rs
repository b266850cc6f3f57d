//! Spatial-configuration extraction from navigation instructions.

pub mod conll;
pub mod eval;
pub mod lexicon;
pub mod tagger;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conll::{load_parsed_corpus, parse_conll, Pos, Sentence, Token};
pub use eval::{evaluate_annotations, evaluate_parser, read_annotations, ConfigAnnotation, GoldAnnotation, ParserReport};
pub use lexicon::MotionLexicon;
pub use tagger::{split_sentences, tag_sentence, tokenize};

/// Pseudo delimiter appended after every configuration in the token stream.
pub const DELIMITER: &str = "<P>";

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty span {start}..{end}");
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn covers(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn shift(self, by: usize) -> Span {
        Span::new(self.start + by, self.end + by)
    }
}

impl From<[usize; 2]> for Span {
    fn from(a: [usize; 2]) -> Self {
        Span { start: a[0], end: a[1] }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// One spatial configuration. All spans index the instruction's flattened
/// token sequence (sentences concatenated, no delimiters).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialConfiguration {
    pub tokens: Span,
    pub motion_indicator: Option<Span>,
    /// Preposition linking the main landmark when it was not merged into
    /// the motion indicator.
    pub spatial_indicator: Option<Span>,
    pub landmarks: Vec<Span>,
    pub main_landmark: Option<usize>,
    /// The delimiter is inserted before this token index (always `tokens.end`).
    pub delimiter_pos: usize,
}

impl SpatialConfiguration {
    fn new(tokens: Span, motion: Option<Span>) -> Self {
        SpatialConfiguration {
            tokens,
            motion_indicator: motion,
            spatial_indicator: None,
            landmarks: Vec::new(),
            main_landmark: None,
            delimiter_pos: tokens.end,
        }
    }

    pub fn main_landmark_span(&self) -> Option<Span> {
        self.main_landmark.map(|i| self.landmarks[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub instruction_id: Option<String>,
    pub sentences: Vec<Sentence>,
    pub configurations: Vec<SpatialConfiguration>,
    /// Lowercased tokens with a [`DELIMITER`] after each configuration.
    pub token_stream: Vec<String>,
}

impl ParsedInstruction {
    pub fn num_configurations(&self) -> usize {
        self.configurations.len()
    }

    /// Global offset of each sentence's first token.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            off.push(acc);
            acc += s.len();
        }
        off
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Lowercased surface tokens without delimiters.
    pub fn words(&self) -> Vec<String> {
        self.tokens().map(Token::lower).collect()
    }

    pub fn pos_tags(&self) -> Vec<Pos> {
        self.tokens().map(|t| t.pos).collect()
    }

    /// Range of configuration `i` inside `token_stream`, delimiter included.
    pub fn stream_span(&self, i: usize) -> Span {
        let c = &self.configurations[i];
        Span::new(c.tokens.start + i, c.tokens.end + i + 1)
    }

    pub fn words_in(&self, span: Span) -> Vec<String> {
        let w = self.words();
        w[span.start..span.end].to_vec()
    }

    /// Configuration text with punctuation and a trailing conjunction removed.
    pub fn config_text(&self, i: usize) -> String {
        let c = &self.configurations[i];
        let toks: Vec<&Token> = self.tokens().collect();
        let mut kept: Vec<&Token> = toks[c.tokens.start..c.tokens.end]
            .iter()
            .copied()
            .filter(|t| t.pos != Pos::Punct)
            .collect();
        while kept.last().map_or(false, |t| t.pos == Pos::Cconj) {
            kept.pop();
        }
        kept.iter().map(|t| t.lower()).collect::<Vec<_>>().join(" ")
    }

    pub fn span_text(&self, span: Span) -> String {
        self.words_in(span).join(" ")
    }

    pub fn to_annotation(&self) -> GoldAnnotation {
        GoldAnnotation {
            instruction_id: self.instruction_id.clone().unwrap_or_default(),
            tokens: Some(self.words()),
            configurations: self
                .configurations
                .iter()
                .map(|c| ConfigAnnotation {
                    span: c.tokens,
                    motion: c.motion_indicator,
                    landmarks: c.landmarks.clone(),
                    main_landmark: c.main_landmark,
                })
                .collect(),
        }
    }
}

fn attaches_to(sentence: &Sentence, k: usize, span: Span) -> bool {
    let h = sentence.tokens[k].head;
    if span.contains(h) {
        return true;
    }
    // a preposition headed by its own object, which hangs off the verb
    let t = &sentence.tokens[h];
    t.pos.is_nominal() && t.head != h && span.contains(t.head) && h > k
}

/// Motion-indicator spans of one sentence, in order (sentence-local indices).
pub fn extract_motion_indicators(sentence: &Sentence, lexicon: &MotionLexicon) -> Vec<Span> {
    let words = sentence.words();
    let n = words.len();
    let mut spans = Vec::new();
    let mut k = 0;
    while k < n {
        if sentence.tokens[k].pos != Pos::Verb {
            k += 1;
            continue;
        }
        let len = lexicon.longest_match(&words[k..]).unwrap_or(1);
        let mut span = Span::new(k, k + len);
        while span.end < n {
            let j = span.end;
            let t = &sentence.tokens[j];
            if matches!(t.pos, Pos::Adp | Pos::Part) && attaches_to(sentence, j, span) {
                span.end += 1;
            } else {
                break;
            }
        }
        spans.push(span);
        k = span.end;
    }
    spans
}

fn extends_clause_left(t: &Token) -> bool {
    match t.pos {
        Pos::Pron | Pos::Sconj | Pos::Aux | Pos::Part => true,
        Pos::Adv => tagger::CLAUSE_ADVERBS.contains(&t.lower().as_str()),
        _ => false,
    }
}

/// Splits one sentence at its motion indicators (sentence-local indices).
/// Each clause opens at its verb, pulled left over subject pronouns,
/// subordinators, auxiliaries and connective adverbs; material before the
/// first clause joins the first configuration.
pub fn split_configurations(sentence: &Sentence, motions: &[Span]) -> Vec<SpatialConfiguration> {
    let n = sentence.len();
    if n == 0 {
        return Vec::new();
    }
    if motions.is_empty() {
        return vec![SpatialConfiguration::new(Span::new(0, n), None)];
    }
    let mut starts = Vec::with_capacity(motions.len());
    for (i, m) in motions.iter().enumerate() {
        if i == 0 {
            starts.push(0);
            continue;
        }
        let floor = motions[i - 1].end;
        let mut s = m.start;
        while s > floor && extends_clause_left(&sentence.tokens[s - 1]) {
            s -= 1;
        }
        starts.push(s);
    }
    (0..motions.len())
        .map(|i| {
            let end = starts.get(i + 1).copied().unwrap_or(n);
            SpatialConfiguration::new(Span::new(starts[i], end), Some(motions[i]))
        })
        .collect()
}

/// Noun-phrase runs (landmark candidates) inside `region`, skipping tokens
/// in `exclude`. Returns `(span, head)` pairs, sentence-local.
fn noun_phrases(sentence: &Sentence, region: Span, exclude: Option<Span>) -> Vec<(Span, usize)> {
    let mut runs: Vec<(Span, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    let mut head: Option<usize> = None;
    let flush = |runs: &mut Vec<(Span, usize)>, start: Option<usize>, head: Option<usize>| {
        if let (Some(s), Some(h)) = (start, head) {
            runs.push((Span::new(s, h + 1), h));
        }
    };
    for k in region.start..region.end {
        let t = &sentence.tokens[k];
        let excluded = exclude.map_or(false, |e| e.contains(k));
        let member = !excluded && matches!(t.pos, Pos::Det | Pos::Adj | Pos::Num | Pos::Noun | Pos::Propn);
        // a non-noun after the head noun closes the phrase
        if !member || (!t.pos.is_nominal() && head.is_some()) {
            flush(&mut runs, start, head);
            start = None;
            head = None;
            if !member {
                continue;
            }
        }
        if start.is_none() {
            start = Some(k);
        }
        if t.pos.is_nominal() {
            head = Some(k);
        }
    }
    flush(&mut runs, start, head);

    // "X of Y" collapses into one phrase headed by X
    let mut merged: Vec<(Span, usize)> = Vec::new();
    for (span, h) in runs {
        if let Some(last) = merged.last_mut() {
            let gap = last.0.end;
            if span.start == gap + 1 && sentence.tokens[gap].lower() == "of" {
                last.0.end = span.end;
                continue;
            }
        }
        merged.push((span, h));
    }
    merged
}

/// Landmark spans of a configuration inside one sentence (sentence-local).
pub fn extract_landmarks(config: &SpatialConfiguration, sentence: &Sentence) -> Vec<Span> {
    noun_phrases(sentence, config.tokens, config.motion_indicator)
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

/// Head token of a landmark span: the first noun-phrase head it contains.
fn landmark_head(sentence: &Sentence, span: Span) -> usize {
    noun_phrases(sentence, span, None)
        .first()
        .map_or(span.end - 1, |&(_, h)| h)
}

/// Index of the landmark whose head is closest to the root; ties go to
/// the earliest landmark.
pub fn select_main_landmark(landmarks: &[Span], sentence: &Sentence) -> Option<usize> {
    landmarks
        .iter()
        .enumerate()
        .min_by_key(|(i, s)| (sentence.depth(landmark_head(sentence, **s)), s.start, *i))
        .map(|(i, _)| i)
}

/// Parses raw instruction text with the built-in fallback tagger.
pub fn parse_instruction(raw: &str, lexicon: &MotionLexicon) -> Result<ParsedInstruction> {
    let sentences: Vec<Sentence> = split_sentences(raw)
        .iter()
        .map(|s| tag_sentence(&tokenize(s), lexicon))
        .filter(|s| !s.is_empty())
        .collect();
    parse_sentences(sentences, lexicon)
}

/// Runs the configuration pipeline over already-parsed sentences.
pub fn parse_sentences(sentences: Vec<Sentence>, lexicon: &MotionLexicon) -> Result<ParsedInstruction> {
    let sentences: Vec<Sentence> = sentences.into_iter().filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::Invalid("empty instruction".into()));
    }
    for s in &sentences {
        s.validate()?;
    }
    let instruction_id = sentences.iter().find_map(|s| s.instruction_id.clone());

    // (sentence, local config) pieces; a config may absorb later verbless sentences
    let mut configs: Vec<Vec<(usize, SpatialConfiguration)>> = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        let motions = extract_motion_indicators(s, lexicon);
        let local = split_configurations(s, &motions);
        if motions.is_empty() && !configs.is_empty() {
            configs.last_mut().unwrap().extend(local.into_iter().map(|c| (si, c)));
        } else {
            configs.extend(local.into_iter().map(|c| vec![(si, c)]));
        }
    }

    let mut offsets = Vec::with_capacity(sentences.len());
    let mut acc = 0;
    for s in &sentences {
        offsets.push(acc);
        acc += s.len();
    }

    let mut out = Vec::with_capacity(configs.len());
    for pieces in configs {
        let (first_s, first) = &pieces[0];
        let (last_s, last) = pieces.last().unwrap();
        let tokens = Span::new(first.tokens.start + offsets[*first_s], last.tokens.end + offsets[*last_s]);
        let motion = first.motion_indicator.map(|m| m.shift(offsets[*first_s]));
        let mut cfg = SpatialConfiguration::new(tokens, motion);

        // (global span, depth of head) for every landmark
        let mut cands: Vec<(Span, usize, usize, usize)> = Vec::new();
        for (si, piece) in &pieces {
            let s = &sentences[*si];
            for lm in extract_landmarks(piece, s) {
                let h = landmark_head(s, lm);
                cands.push((lm.shift(offsets[*si]), s.depth(h), *si, h));
            }
        }
        cfg.landmarks = cands.iter().map(|c| c.0).collect();
        cfg.main_landmark = cands
            .iter()
            .enumerate()
            .min_by_key(|(i, c)| (c.1, c.0.start, *i))
            .map(|(i, _)| i);
        if let Some(i) = cfg.main_landmark {
            let (_, _, si, h) = cands[i];
            let s = &sentences[si];
            let p = s.tokens[h].head;
            let global = p + offsets[si];
            let merged = cfg.motion_indicator.map_or(false, |m| m.contains(global));
            if s.tokens[p].pos == Pos::Adp && !merged && cfg.tokens.contains(global) {
                cfg.spatial_indicator = Some(Span::new(global, global + 1));
            }
        }
        out.push(cfg);
    }

    let words: Vec<String> = sentences.iter().flat_map(|s| s.tokens.iter().map(Token::lower)).collect();
    let mut token_stream = Vec::with_capacity(words.len() + out.len());
    for c in &out {
        token_stream.extend_from_slice(&words[c.tokens.start..c.tokens.end]);
        token_stream.push(DELIMITER.to_string());
    }

    Ok(ParsedInstruction {
        instruction_id,
        sentences,
        configurations: out,
        token_stream,
    })
}
