//! Templated episodes with gold configuration annotations.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{observe, shortest_paths, GraphWorld, STAIR_LABELS};
use crate::error::{Error, Result};
use crate::parse::{ConfigAnnotation, GoldAnnotation, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub world_id: String,
    pub instruction: String,
    pub gold_parse: GoldAnnotation,
    pub start: usize,
    pub goal: usize,
    pub gold_path: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub min_hops: usize,
    pub max_hops: usize,
    /// Objects visible per image; landmarks are drawn from these.
    pub k_objects: usize,
    /// Chance of an opening "turn ..." clause.
    pub turn_prob: f64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            min_hops: 1,
            max_hops: 3,
            k_objects: 6,
            turn_prob: 0.5,
        }
    }
}

const WALK_PREPS: &[&str] = &["past", "to", "through", "toward", "by"];
const TURNS: &[&str] = &["left", "right", "around"];

struct Clause {
    words: Vec<String>,
    motion_len: usize,
    landmark: Option<(usize, usize)>,
}

enum Joint {
    And,
    Then,
    Period,
}

/// Most salient object shown towards `next` from `at` whose label is not
/// visible in any other direction.
fn distinctive_landmark(world: &GraphWorld, at: usize, next: usize, k: usize) -> Result<Option<String>> {
    let obs = observe(world, at, k)?;
    let target = obs
        .neighbors
        .iter()
        .position(|&u| u == next)
        .ok_or_else(|| Error::Invalid(format!("{next} is not adjacent to {at}")))?;
    let mut elsewhere = BTreeSet::new();
    let mut here = Vec::new();
    for (j, group) in obs.kappa.iter().enumerate() {
        for &img in group {
            for o in &obs.objects[img] {
                if j == target {
                    here.push(o);
                } else {
                    elsewhere.insert(o.label.as_str());
                }
            }
        }
    }
    here.sort_by(|a, b| b.salience.total_cmp(&a.salience).then_with(|| a.label.cmp(&b.label)));
    Ok(here
        .into_iter()
        .find(|o| !elsewhere.contains(o.label.as_str()))
        .map(|o| o.label.clone()))
}

/// Samples a start/goal pair, takes the shortest path between them and
/// describes each hop by a distinctive object in its direction.
pub fn generate_episode(world: &GraphWorld, opts: &EpisodeOptions, id: &str, split: Split, seed: u64) -> Result<Episode> {
    if opts.min_hops == 0 || opts.min_hops > opts.max_hops {
        return Err(Error::Invalid("hop range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = world.len();
    'attempt: for _ in 0..500 {
        let start = rng.gen_range(0..n);
        let from_start = shortest_paths(world, start)?;
        let mut goals: Vec<usize> = (0..n)
            .filter(|&t| {
                let hops = from_start.path_to(t).map_or(0, |p| p.len() - 1);
                (opts.min_hops..=opts.max_hops).contains(&hops)
            })
            .collect();
        if goals.is_empty() {
            continue;
        }
        goals.shuffle(&mut rng);
        let goal = goals[0];
        // follow the goal-rooted tree so the path agrees with teacher actions
        let to_goal = shortest_paths(world, goal)?;
        let mut path = vec![start];
        while let Some(next) = to_goal.pred[*path.last().unwrap()] {
            path.push(next);
        }
        let hops = path.len() - 1;
        if !(opts.min_hops..=opts.max_hops).contains(&hops) {
            continue;
        }

        let mut clauses = Vec::new();
        if rng.gen_bool(opts.turn_prob) {
            let dir = TURNS[rng.gen_range(0..TURNS.len())];
            clauses.push(Clause {
                words: vec!["turn".into(), dir.into()],
                motion_len: 2,
                landmark: None,
            });
        }
        for w in path.windows(2) {
            let Some(label) = distinctive_landmark(world, w[0], w[1], opts.k_objects)? else {
                continue 'attempt;
            };
            let (verb, prep) = if STAIR_LABELS.contains(&label.as_str()) {
                ("go", if rng.gen_bool(0.5) { "up" } else { "down" })
            } else {
                ("walk", WALK_PREPS[rng.gen_range(0..WALK_PREPS.len())])
            };
            clauses.push(Clause {
                words: vec![verb.into(), prep.into(), "the".into(), label],
                motion_len: 2,
                landmark: Some((2, 2)),
            });
        }
        clauses.push(Clause {
            words: vec!["stop".into()],
            motion_len: 1,
            landmark: None,
        });

        let joints: Vec<Joint> = (1..clauses.len())
            .map(|_| match rng.gen_range(0..3) {
                0 => Joint::And,
                1 => Joint::Then,
                _ => Joint::Period,
            })
            .collect();
        let (instruction, gold) = render(&clauses, &joints, id);
        return Ok(Episode {
            id: id.to_string(),
            world_id: world.id.clone(),
            instruction,
            gold_parse: gold,
            start,
            goal,
            gold_path: path,
            split,
        });
    }
    Err(Error::Invalid(format!(
        "no describable path with {}..={} hops in world {}",
        opts.min_hops, opts.max_hops, world.id
    )))
}

/// Lays out clauses and joints as text and builds the matching annotation.
/// Joint punctuation and "and" close the previous configuration; "then"
/// opens the next one.
fn render(clauses: &[Clause], joints: &[Joint], id: &str) -> (String, GoldAnnotation) {
    let mut tokens: Vec<String> = Vec::new();
    let mut sentence_start = vec![true];
    let mut configs = Vec::with_capacity(clauses.len());
    for (i, c) in clauses.iter().enumerate() {
        let start = tokens.len();
        if i > 0 && matches!(joints[i - 1], Joint::Then) {
            tokens.push("then".into());
            sentence_start.push(false);
        }
        let verb = tokens.len();
        for w in &c.words {
            tokens.push(w.clone());
            sentence_start.push(false);
        }
        match joints.get(i) {
            Some(Joint::And) => {
                tokens.extend([",".to_string(), "and".to_string()]);
                sentence_start.extend([false, false]);
            }
            Some(Joint::Then) => {
                tokens.push(",".into());
                sentence_start.push(false);
            }
            Some(Joint::Period) | None => {
                tokens.push(".".into());
                sentence_start.push(true);
            }
        }
        let landmarks: Vec<Span> = c
            .landmark
            .map(|(off, len)| Span::new(verb + off, verb + off + len))
            .into_iter()
            .collect();
        configs.push(ConfigAnnotation {
            span: Span::new(start, tokens.len()),
            motion: Some(Span::new(verb, verb + c.motion_len)),
            main_landmark: (!landmarks.is_empty()).then_some(0),
            landmarks,
        });
    }
    let mut text = String::new();
    for (k, t) in tokens.iter().enumerate() {
        let punct = t == "," || t == ".";
        if k > 0 && !punct {
            text.push(' ');
        }
        if sentence_start[k] {
            let mut cs = t.chars();
            if let Some(f) = cs.next() {
                text.extend(f.to_uppercase());
                text.push_str(cs.as_str());
            }
        } else {
            text.push_str(t);
        }
    }
    let gold = GoldAnnotation {
        instruction_id: id.to_string(),
        tokens: Some(tokens),
        configurations: configs,
    };
    (text, gold)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        e.gold_parse.validate()?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::{parse_instruction, MotionLexicon};
    use crate::world::{generate_world, WorldParams};

    fn world(seed: u64) -> GraphWorld {
        generate_world("w0", &WorldParams::default(), seed).unwrap()
    }

    #[test]
    fn one_hop_episode() {
        let w = world(1);
        let opts = EpisodeOptions {
            min_hops: 1,
            max_hops: 1,
            turn_prob: 0.0,
            ..EpisodeOptions::default()
        };
        let e = generate_episode(&w, &opts, "e0", Split::Train, 7).unwrap();
        assert_eq!(e.gold_path.len(), 2);
        assert_eq!(e.gold_parse.configurations.len(), 2);
        let label = &e.gold_parse.tokens.as_ref().unwrap()[3];
        assert!(e.instruction.contains(label.as_str()));
        let edge = w.edge(e.gold_path[0], e.gold_path[1]).unwrap();
        assert!(edge.scene.iter().any(|o| &o.label == label));
    }

    #[test]
    fn deterministic() {
        let w = world(2);
        let o = EpisodeOptions::default();
        let a = generate_episode(&w, &o, "e", Split::Train, 3).unwrap();
        let b = generate_episode(&w, &o, "e", Split::Train, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gold_path_is_shortest() {
        let w = world(3);
        for s in 0..30 {
            let e = generate_episode(&w, &EpisodeOptions::default(), "e", Split::Train, s).unwrap();
            let sp = shortest_paths(&w, e.start).unwrap();
            let len = crate::world::path_length(&w, &e.gold_path);
            assert!((len - sp.dist[e.goal]).abs() < 1e-9);
            assert_eq!(*e.gold_path.last().unwrap(), e.goal);
        }
    }

    #[test]
    fn parser_reproduces_gold_boundaries() {
        let lex = MotionLexicon::bundled();
        let w = world(4);
        for s in 0..60 {
            let e = generate_episode(&w, &EpisodeOptions::default(), &format!("e{s}"), Split::Train, s).unwrap();
            let p = parse_instruction(&e.instruction, &lex).unwrap();
            assert_eq!(Some(p.words()), e.gold_parse.tokens, "{}", e.instruction);
            let mut pred = p.to_annotation();
            pred.instruction_id = e.id.clone();
            assert_eq!(pred, e.gold_parse, "{}", e.instruction);
        }
    }

    #[test]
    fn episodes_file_round_trip() {
        let w = world(5);
        let eps: Vec<Episode> = (0..4)
            .map(|s| generate_episode(&w, &EpisodeOptions::default(), &format!("e{s}"), Split::ValSeen, s).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eps.jsonl");
        write_episodes(&p, &eps).unwrap();
        assert_eq!(read_episodes(&p).unwrap(), eps);
    }
}
