//! Gold annotations and the three-way parser accuracy report.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParsedInstruction, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigAnnotation {
    pub span: Span,
    pub motion: Option<Span>,
    #[serde(default)]
    pub landmarks: Vec<Span>,
    #[serde(default)]
    pub main_landmark: Option<usize>,
}

/// One annotated instruction; spans index the tokenized instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub instruction_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    pub configurations: Vec<ConfigAnnotation>,
}

impl GoldAnnotation {
    /// Checks the same well-formedness rules a parsed configuration obeys.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("{}: {msg}", self.instruction_id)));
        let mut prev_end = 0;
        for (i, c) in self.configurations.iter().enumerate() {
            if c.span.start >= c.span.end || c.span.start < prev_end {
                return bad(format!("configuration {i} span {:?} is empty or overlaps", c.span));
            }
            prev_end = c.span.end;
            if let Some(m) = c.motion {
                if !c.span.covers(&m) || m.is_empty() {
                    return bad(format!("configuration {i} motion outside span"));
                }
            }
            if c.landmarks.iter().any(|l| !c.span.covers(l) || l.is_empty()) {
                return bad(format!("configuration {i} landmark outside span"));
            }
            match c.main_landmark {
                Some(k) if k >= c.landmarks.len() => return bad(format!("configuration {i} main landmark out of range")),
                None if !c.landmarks.is_empty() => return bad(format!("configuration {i} has landmarks but no main landmark")),
                _ => {}
            }
        }
        if let Some(t) = &self.tokens {
            if prev_end > t.len() {
                return bad("span beyond token count".into());
            }
        }
        Ok(())
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<GoldAnnotation>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: GoldAnnotation = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        a.validate()?;
        out.push(a);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParserReport {
    pub instructions: usize,
    pub configurations: usize,
    pub configuration_accuracy: f64,
    pub motion_accuracy: f64,
    pub landmark_accuracy: f64,
}

/// Scores predictions against gold, per gold configuration:
/// boundary exact match, motion-indicator exact match, and exact match of
/// the landmark set predicted inside the gold span.
pub fn evaluate_parser(predicted: &[ParsedInstruction], gold: &[GoldAnnotation]) -> Result<ParserReport> {
    let pred: Vec<GoldAnnotation> = predicted.iter().map(ParsedInstruction::to_annotation).collect();
    evaluate_annotations(&pred, gold)
}

pub fn evaluate_annotations(predicted: &[GoldAnnotation], gold: &[GoldAnnotation]) -> Result<ParserReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold instructions",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut total, mut cfg_ok, mut mot_ok, mut lm_ok) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        if !p.instruction_id.is_empty() && !g.instruction_id.is_empty() && p.instruction_id != g.instruction_id {
            return Err(Error::Invalid(format!(
                "misaligned instructions {} / {}",
                p.instruction_id, g.instruction_id
            )));
        }
        let spans: BTreeSet<Span> = p.configurations.iter().map(|c| c.span).collect();
        let motions: BTreeSet<Span> = p.configurations.iter().filter_map(|c| c.motion).collect();
        let landmarks: Vec<Span> = p.configurations.iter().flat_map(|c| c.landmarks.iter().copied()).collect();
        for gc in &g.configurations {
            total += 1;
            if spans.contains(&gc.span) {
                cfg_ok += 1;
            }
            let motion_hit = match gc.motion {
                Some(m) => motions.contains(&m),
                None => p.configurations.iter().any(|c| c.span == gc.span && c.motion.is_none()),
            };
            if motion_hit {
                mot_ok += 1;
            }
            let inside: BTreeSet<Span> = landmarks.iter().copied().filter(|l| gc.span.covers(l)).collect();
            let expected: BTreeSet<Span> = gc.landmarks.iter().copied().collect();
            if inside == expected {
                lm_ok += 1;
            }
        }
    }
    let frac = |k: usize| if total == 0 { 1.0 } else { k as f64 / total as f64 };
    Ok(ParserReport {
        instructions: gold.len(),
        configurations: total,
        configuration_accuracy: frac(cfg_ok),
        motion_accuracy: frac(mot_ok),
        landmark_accuracy: frac(lm_ok),
    })
}
