//! Benchmark specifications and seen/unseen splits.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_episode, read_episodes, write_episodes, generate_world, observe, shortest_paths, Episode, EpisodeOptions, GraphWorld, PanoramaObservation, ShortestPaths, Split, WorldParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub seed: u64,
    pub seen_worlds: usize,
    pub unseen_worlds: usize,
    pub world: WorldParams,
    pub episodes: EpisodeOptions,
    pub train_per_world: usize,
    pub val_seen_per_world: usize,
    pub val_unseen_per_world: usize,
}

impl BenchmarkSpec {
    /// 60 seen and 20 unseen worlds of 30 viewpoints.
    pub fn reference() -> Self {
        BenchmarkSpec {
            name: "ref".into(),
            seed: 2021,
            seen_worlds: 60,
            unseen_worlds: 20,
            world: WorldParams::default(),
            episodes: EpisodeOptions::default(),
            train_per_world: 10,
            val_seen_per_world: 2,
            val_unseen_per_world: 10,
        }
    }

    /// A few tiny worlds for smoke tests.
    pub fn small() -> Self {
        BenchmarkSpec {
            name: "small".into(),
            seed: 7,
            seen_worlds: 4,
            unseen_worlds: 2,
            world: WorldParams {
                size: 12,
                ..WorldParams::default()
            },
            episodes: EpisodeOptions {
                max_hops: 2,
                ..EpisodeOptions::default()
            },
            train_per_world: 4,
            val_seen_per_world: 2,
            val_unseen_per_world: 3,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ref" => Ok(Self::reference()),
            "small" => Ok(Self::small()),
            _ => Err(Error::Invalid(format!("unknown benchmark {name:?} (expected ref or small)"))),
        }
    }
}

/// A world with its observations and all-pairs shortest paths precomputed.
#[derive(Debug, Clone)]
pub struct Env {
    pub world: GraphWorld,
    pub k_objects: usize,
    obs: Vec<PanoramaObservation>,
    paths: Vec<ShortestPaths>,
}

impl Env {
    pub fn new(world: GraphWorld, k_objects: usize) -> Result<Self> {
        let obs = (0..world.len()).map(|v| observe(&world, v, k_objects)).collect::<Result<_>>()?;
        let paths = (0..world.len()).map(|v| shortest_paths(&world, v)).collect::<Result<_>>()?;
        Ok(Env {
            world,
            k_objects,
            obs,
            paths,
        })
    }

    pub fn observation(&self, v: usize) -> Result<&PanoramaObservation> {
        self.obs.get(v).ok_or(Error::UnknownViewpoint(v))
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.paths[a].dist[b]
    }

    /// Next viewpoint on a shortest path from `from` to `goal`.
    pub fn next_hop(&self, from: usize, goal: usize) -> Option<usize> {
        self.paths[goal].pred[from]
    }

    /// Neighbor index of the teacher move, or `None` at the goal.
    pub fn teacher_action(&self, from: usize, goal: usize) -> Option<usize> {
        let next = self.next_hop(from, goal)?;
        self.world.edges[from].iter().position(|e| e.to == next)
    }
}

pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub envs: Vec<Env>,
    pub episodes: Vec<Episode>,
    index: HashMap<String, usize>,
}

impl Benchmark {
    pub fn from_parts(spec: BenchmarkSpec, worlds: Vec<GraphWorld>, episodes: Vec<Episode>) -> Result<Self> {
        let k = spec.episodes.k_objects;
        let envs: Vec<Env> = worlds.into_iter().map(|w| Env::new(w, k)).collect::<Result<_>>()?;
        let index = envs.iter().enumerate().map(|(i, e)| (e.world.id.clone(), i)).collect::<HashMap<_, _>>();
        for e in &episodes {
            let env = index
                .get(&e.world_id)
                .map(|&i| &envs[i])
                .ok_or_else(|| Error::Invalid(format!("episode {} references unknown world {}", e.id, e.world_id)))?;
            if e.gold_path.iter().any(|&v| v >= env.world.len()) {
                return Err(Error::Invalid(format!("episode {} leaves its world", e.id)));
            }
        }
        Ok(Benchmark {
            spec,
            envs,
            episodes,
            index,
        })
    }

    pub fn env(&self, world_id: &str) -> Result<&Env> {
        self.index
            .get(world_id)
            .map(|&i| &self.envs[i])
            .ok_or_else(|| Error::Invalid(format!("unknown world {world_id}")))
    }

    pub fn split(&self, split: Split) -> Vec<&Episode> {
        self.episodes.iter().filter(|e| e.split == split).collect()
    }
}

fn world_id(seen: bool, i: usize) -> String {
    format!("{}-{i:03}", if seen { "seen" } else { "unseen" })
}

/// Generates all worlds and episodes of a benchmark spec.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let mut worlds = Vec::new();
    let mut episodes = Vec::new();
    for (seen, count) in [(true, spec.seen_worlds), (false, spec.unseen_worlds)] {
        for i in 0..count {
            let id = world_id(seen, i);
            let w = generate_world(&id, &spec.world, derive_seed(spec.seed, &[seen as u64, i as u64]))?;
            let plan: &[(Split, usize)] = if seen {
                &[(Split::Train, spec.train_per_world), (Split::ValSeen, spec.val_seen_per_world)]
            } else {
                &[(Split::ValUnseen, spec.val_unseen_per_world)]
            };
            for &(split, n) in plan {
                for k in 0..n {
                    let eid = format!("{id}-{}-{k:02}", split.as_str());
                    let s = derive_seed(spec.seed, &[seen as u64, i as u64, split as u64 + 10, k as u64]);
                    episodes.push(generate_episode(&w, &spec.episodes, &eid, split, s)?);
                }
            }
            worlds.push(w);
        }
    }
    Benchmark::from_parts(spec.clone(), worlds, episodes)
}

pub const SPEC_FILE: &str = "benchmark.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const WORLDS_DIR: &str = "worlds";

/// Writes `benchmark.json`, `worlds/<id>.json` and `episodes.jsonl` under
/// `dir`; returns every file written.
pub fn save_benchmark(dir: &Path, bench: &Benchmark) -> Result<Vec<PathBuf>> {
    let worlds = dir.join(WORLDS_DIR);
    std::fs::create_dir_all(&worlds)?;
    let mut written = Vec::with_capacity(bench.envs.len() + 2);
    let spec = dir.join(SPEC_FILE);
    std::fs::write(&spec, serde_json::to_vec_pretty(&bench.spec)?)?;
    written.push(spec);
    for env in &bench.envs {
        let p = worlds.join(format!("{}.json", env.world.id));
        env.world.save(&p)?;
        written.push(p);
    }
    let eps = dir.join(EPISODES_FILE);
    write_episodes(&eps, &bench.episodes)?;
    written.push(eps);
    Ok(written)
}

/// Reads a directory written by [`save_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let spec: BenchmarkSpec = serde_json::from_slice(&std::fs::read(dir.join(SPEC_FILE))?)?;
    let episodes = read_episodes(&dir.join(EPISODES_FILE))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join(WORLDS_DIR))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    let worlds = files.iter().map(|p| GraphWorld::load(p)).collect::<Result<Vec<_>>>()?;
    Benchmark::from_parts(spec, worlds, episodes)
}
