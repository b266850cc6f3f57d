//! Dependency-parsed sentences and the 10-column tab-separated reader.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse part-of-speech tag (Universal POS).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Propn,
    Verb,
    Aux,
    Adj,
    Adv,
    Adp,
    Det,
    Pron,
    Cconj,
    Sconj,
    Part,
    Num,
    Punct,
    Other,
}

impl Pos {
    pub fn from_upos(tag: &str) -> Pos {
        match tag.to_ascii_uppercase().as_str() {
            "NOUN" => Pos::Noun,
            "PROPN" => Pos::Propn,
            "VERB" => Pos::Verb,
            "AUX" => Pos::Aux,
            "ADJ" => Pos::Adj,
            "ADV" => Pos::Adv,
            "ADP" => Pos::Adp,
            "DET" => Pos::Det,
            "PRON" => Pos::Pron,
            "CCONJ" | "CONJ" => Pos::Cconj,
            "SCONJ" => Pos::Sconj,
            "PART" => Pos::Part,
            "NUM" => Pos::Num,
            "PUNCT" => Pos::Punct,
            _ => Pos::Other,
        }
    }

    pub fn upos(self) -> &'static str {
        match self {
            Pos::Noun => "NOUN",
            Pos::Propn => "PROPN",
            Pos::Verb => "VERB",
            Pos::Aux => "AUX",
            Pos::Adj => "ADJ",
            Pos::Adv => "ADV",
            Pos::Adp => "ADP",
            Pos::Det => "DET",
            Pos::Pron => "PRON",
            Pos::Cconj => "CCONJ",
            Pos::Sconj => "SCONJ",
            Pos::Part => "PART",
            Pos::Num => "NUM",
            Pos::Punct => "PUNCT",
            Pos::Other => "X",
        }
    }

    pub fn is_nominal(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn)
    }
}

/// One token of a dependency-parsed sentence. `head == index` at the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub text: String,
    pub lemma: String,
    pub pos: Pos,
    pub head: usize,
    pub deprel: String,
}

impl Token {
    pub fn lower(&self) -> String {
        self.text.to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    /// From a `# instruction_id = ...` comment, when present.
    pub instruction_id: Option<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence {
            tokens,
            instruction_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> Option<usize> {
        self.tokens.iter().position(|t| t.head == t.index)
    }

    /// Checks contiguous indices, exactly one root and no cycles.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i {
                return Err(Error::Structure(format!("token {i} has index {}", t.index)));
            }
            if t.head >= n {
                return Err(Error::Structure(format!("token {i} head {} out of range", t.head)));
            }
        }
        let roots = self.tokens.iter().filter(|t| t.head == t.index).count();
        if roots != 1 {
            return Err(Error::Structure(format!("expected exactly one root, found {roots}")));
        }
        for i in 0..n {
            let mut cur = i;
            for _ in 0..=n {
                let h = self.tokens[cur].head;
                if h == cur {
                    break;
                }
                cur = h;
            }
            if self.tokens[cur].head != cur {
                return Err(Error::Structure(format!("cycle through token {i}")));
            }
        }
        Ok(())
    }

    /// Distance from token `i` to the root. Assumes a validated tree.
    pub fn depth(&self, i: usize) -> usize {
        let mut d = 0;
        let mut cur = i;
        while self.tokens[cur].head != cur && d <= self.tokens.len() {
            cur = self.tokens[cur].head;
            d += 1;
        }
        d
    }

    pub fn words(&self) -> Vec<String> {
        self.tokens.iter().map(Token::lower).collect()
    }

    /// Renders back to the 10-column format.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.instruction_id {
            out.push_str(&format!("# instruction_id = {id}\n"));
        }
        for t in &self.tokens {
            let head = if t.head == t.index { 0 } else { t.head + 1 };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_\n",
                t.index + 1,
                t.text,
                t.lemma,
                t.pos.upos(),
                head,
                t.deprel
            ));
        }
        out
    }
}

/// Reads a corpus of pre-parsed sentences.
pub fn load_parsed_corpus(path: &Path) -> Result<Vec<Sentence>> {
    parse_conll(&std::fs::read_to_string(path)?)
}

/// Parses 10-column tab-separated token lines. Blank lines separate
/// sentences and `#` lines are comments. Multi-word ranges (`3-4`) and empty
/// nodes (`3.1`) are skipped.
pub fn parse_conll(text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut cur: Vec<(usize, Token, usize)> = Vec::new(); // (line, token, 1-based head)
    let mut meta: Option<String> = None;

    let mut flush = |cur: &mut Vec<(usize, Token, usize)>, meta: &mut Option<String>| -> Result<()> {
        if cur.is_empty() {
            return Ok(());
        }
        let n = cur.len();
        let mut tokens = Vec::with_capacity(n);
        for (line, mut tok, head) in cur.drain(..) {
            tok.head = if head == 0 {
                tok.index
            } else if head > n {
                return Err(Error::Parse {
                    line,
                    msg: format!("head {head} beyond sentence length {n}"),
                });
            } else {
                head - 1
            };
            if tok.head == tok.index && head != 0 && !tok.deprel.eq_ignore_ascii_case("root") {
                return Err(Error::Structure(format!(
                    "token {} is its own head but deprel is {}",
                    tok.index + 1,
                    tok.deprel
                )));
            }
            tokens.push(tok);
        }
        let s = Sentence {
            tokens,
            instruction_id: meta.take(),
        };
        s.validate()?;
        sentences.push(s);
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut cur, &mut meta)?;
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some(v) = c.trim().strip_prefix("instruction_id") {
                meta = Some(v.trim_start_matches([' ', '=']).trim().to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad token id {:?}", cols[0]),
        })?;
        if id != cur.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("token id {id} out of sequence"),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad head {:?}", cols[6]),
        })?;
        let lemma = if cols[2] == "_" { cols[1].to_lowercase() } else { cols[2].to_lowercase() };
        cur.push((
            lineno,
            Token {
                index: id - 1,
                text: cols[1].to_string(),
                lemma,
                pos: Pos::from_upos(cols[3]),
                head: 0,
                deprel: cols[7].to_string(),
            },
            head,
        ));
    }
    flush(&mut cur, &mut meta)?;
    Ok(sentences)
}
