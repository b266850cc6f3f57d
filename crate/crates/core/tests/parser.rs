use proptest::prelude::*;
use spcnav::parse::{parse_instruction, MotionLexicon, ParsedInstruction, DELIMITER};

const VERBS: &[&str] = &["walk past", "go to", "turn left", "turn right", "stop", "walk up", "exit", "enter", "move to", "wait near"];
const NOUNS: &[&str] = &["sofa", "table", "door", "stairs", "kitchen", "bed", "lamp", "counter", "dining room table", "middle of the hall"];
const ADJS: &[&str] = &["", "red ", "large ", "wooden "];
const JOINS: &[&str] = &[", and ", ". ", ", then ", " and ", ". Then "];

fn clause() -> impl Strategy<Value = String> {
    (0..VERBS.len(), 0..NOUNS.len(), 0..ADJS.len(), any::<bool>()).prop_map(|(v, n, a, obj)| {
        let verb = VERBS[v];
        if obj && !verb.starts_with("turn") && verb != "stop" {
            format!("{verb} the {}{}", ADJS[a], NOUNS[n])
        } else {
            verb.to_string()
        }
    })
}

fn instruction() -> impl Strategy<Value = String> {
    prop::collection::vec((clause(), 0..JOINS.len()), 1..6).prop_map(|parts| {
        let mut s = String::new();
        for (i, (c, j)) in parts.iter().enumerate() {
            if i > 0 {
                s.push_str(JOINS[*j]);
            }
            s.push_str(c);
        }
        s.push('.');
        s
    })
}

fn check_structure(p: &ParsedInstruction) -> Result<(), TestCaseError> {
    let n = p.num_tokens();
    prop_assert!(p.num_configurations() >= 1);
    let mut next = 0;
    for c in &p.configurations {
        prop_assert_eq!(c.tokens.start, next);
        prop_assert!(c.tokens.end > c.tokens.start);
        prop_assert_eq!(c.delimiter_pos, c.tokens.end);
        next = c.tokens.end;
        if let Some(m) = c.motion_indicator {
            prop_assert!(c.tokens.covers(&m));
        }
        for l in &c.landmarks {
            prop_assert!(c.tokens.covers(l));
        }
        for w in c.landmarks.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
        match c.main_landmark {
            Some(i) => prop_assert!(i < c.landmarks.len()),
            None => prop_assert!(c.landmarks.is_empty()),
        }
    }
    prop_assert_eq!(next, n);
    prop_assert_eq!(p.token_stream.len(), n + p.num_configurations());
    prop_assert_eq!(p.token_stream.iter().filter(|t| t.as_str() == DELIMITER).count(), p.num_configurations());
    prop_assert_eq!(p.token_stream.last().map(String::as_str), Some(DELIMITER));
    Ok(())
}

proptest! {
    #[test]
    fn configurations_tile_the_instruction(text in instruction()) {
        let lex = MotionLexicon::bundled();
        let p = parse_instruction(&text, &lex).unwrap();
        check_structure(&p)?;
        prop_assert_eq!(parse_instruction(&text, &lex).unwrap(), p.clone());
        p.to_annotation().validate().unwrap();
    }

    #[test]
    fn one_configuration_per_verb_clause(parts in prop::collection::vec(0..VERBS.len(), 1..6)) {
        let text = parts.iter().map(|&v| VERBS[v]).collect::<Vec<_>>().join(". ") + ".";
        let p = parse_instruction(&text, &MotionLexicon::bundled()).unwrap();
        prop_assert_eq!(p.num_configurations(), parts.len());
        for (c, &v) in p.configurations.iter().zip(&parts) {
            prop_assert_eq!(p.span_text(c.motion_indicator.unwrap()), VERBS[v]);
        }
    }

    #[test]
    fn arbitrary_text_never_panics(text in "[a-zA-Z ,.;!?'-]{0,80}") {
        if let Ok(p) = parse_instruction(&text, &MotionLexicon::bundled()) {
            check_structure(&p)?;
        }
    }

    #[test]
    fn case_does_not_change_structure(text in instruction()) {
        let lex = MotionLexicon::bundled();
        let a = parse_instruction(&text, &lex).unwrap();
        let b = parse_instruction(&text.to_uppercase(), &lex).unwrap();
        prop_assert_eq!(a.token_stream, b.token_stream);
    }
}
