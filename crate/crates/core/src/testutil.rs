//! Hand-built worlds and datasets shared by unit tests.

use crate::agent::{Model, ModelConfig};
use crate::parse::{parse_instruction, MotionLexicon};
use crate::train::Dataset;
use crate::world::{shortest_paths, Benchmark, BenchmarkSpec, Episode, GraphWorld, SceneObject, Split, WorldParams};

/// Hub 0 with spokes 1 (east), 2 (north), 3 (west); 4 lies east of 1.
pub fn star_world() -> GraphWorld {
    let label = |v: usize| ["door", "sofa", "bed", "piano", "table"][v];
    GraphWorld::from_edges(
        "star",
        WorldParams::default(),
        vec![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [-3.0, 0.0], [6.0, 0.0]],
        &[(0, 1), (0, 2), (0, 3), (1, 4)],
        |_, v| {
            vec![SceneObject {
                label: label(v).into(),
                salience: 0.9,
            }]
        },
    )
    .unwrap()
}

pub fn episode(world: &GraphWorld, id: &str, text: &str, start: usize, goal: usize, split: Split) -> Episode {
    let mut gold = parse_instruction(text, &MotionLexicon::bundled()).unwrap().to_annotation();
    gold.instruction_id = id.into();
    Episode {
        id: id.into(),
        world_id: world.id.clone(),
        instruction: text.into(),
        gold_parse: gold,
        start,
        goal,
        gold_path: shortest_paths(world, start).unwrap().path_to(goal).unwrap(),
        split,
    }
}

pub fn star_dataset() -> Dataset {
    let w = star_world();
    let eps = vec![
        episode(&w, "e0", "Walk past the sofa, and walk to the table, and stop.", 0, 4, Split::Train),
        episode(&w, "e1", "Walk to the bed, and stop.", 0, 2, Split::Train),
        episode(&w, "e2", "Walk to the piano. Stop.", 0, 3, Split::ValSeen),
        episode(&w, "e3", "Stop.", 2, 2, Split::ValSeen),
        episode(&w, "e4", "Walk to the sofa, then stop.", 0, 1, Split::ValUnseen),
    ];
    let bench = Benchmark::from_parts(BenchmarkSpec::small(), vec![w], eps).unwrap();
    Dataset::new(bench, &MotionLexicon::bundled()).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        token_dim: 6,
        hidden: 5,
        role_dim: 4,
        obj_dim: 4,
        img_proj: 5,
        n_max: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(data: &Dataset, seed: u64) -> Model {
    data.new_model(tiny_config(), seed).unwrap()
}
