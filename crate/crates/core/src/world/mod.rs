//! Procedural navigation worlds: metric viewpoint graphs whose directed
//! edges carry object scenes, plus panoramic observations of them.

mod bench;
mod episode;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bench::{build_benchmark, load_benchmark, save_benchmark, Benchmark, BenchmarkSpec, Env};
pub use episode::{generate_episode, read_episodes, write_episodes, Episode, EpisodeOptions, Split};

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Closed object vocabulary, most frequent first.
pub const OBJECT_LABELS: &[&str] = &[
    "door", "chair", "table", "window", "picture", "plant", "lamp", "sofa", "rug", "cabinet",
    "bed", "shelf", "counter", "stairs", "mirror", "desk", "sink", "painting", "bench", "vase",
    "fireplace", "toilet", "bathtub", "piano", "television", "dresser", "refrigerator", "stove",
    "clock", "armchair", "bookcase", "curtain", "railing", "archway", "pillar", "statue",
    "fountain", "steps", "ottoman", "washer",
];

/// Labels that read as climbable ("go up the stairs").
pub const STAIR_LABELS: &[&str] = &["stairs", "steps"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub size: usize,
    /// Side of the square the viewpoints live in, in meters.
    pub extent: f64,
    pub min_edge: f64,
    pub max_edge: f64,
    pub max_degree: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub elevations: usize,
    pub label_dim: usize,
    pub noise_std: f64,
    pub zipf_exponent: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            size: 30,
            extent: 30.0,
            min_edge: 2.0,
            max_edge: 4.0,
            max_degree: 6,
            min_objects: 3,
            max_objects: 8,
            elevations: 1,
            label_dim: 64,
            noise_std: 0.05,
            zipf_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub salience: f64,
}

/// Directed edge `from -> to`, with the objects seen looking that way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub to: usize,
    /// Radians, `atan2(dy, dx)`.
    pub heading: f64,
    pub length: f64,
    pub scene: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphWorld {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    pub params: WorldParams,
    pub vocab: Vec<String>,
    pub positions: Vec<[f64; 2]>,
    /// Outgoing edges per viewpoint, sorted by target id.
    pub edges: Vec<Vec<Edge>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedObject {
    pub label: String,
    pub salience: f64,
}

/// Everything the agent sees at one viewpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaObservation {
    pub viewpoint: usize,
    /// Navigable viewpoint ids, in action order.
    pub neighbors: Vec<usize>,
    /// One feature vector per image.
    pub images: Vec<Vec<f64>>,
    /// Top-K objects per image, by salience.
    pub objects: Vec<Vec<ObservedObject>>,
    /// Image indices of each navigable viewpoint (one per elevation).
    pub kappa: Vec<Vec<usize>>,
}

impl PanoramaObservation {
    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map_or(0, Vec::len)
    }
}

/// Agent action: move to navigable viewpoint `k` or stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Move(usize),
    Stop,
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        x = splitmix(x ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, stable across platforms and releases.
pub fn stable_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fixed appearance vector of an object label, shared by every world.
pub fn label_feature(label: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(label));
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..dim).map(|_| n.sample(&mut rng)).collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Grows a connected viewpoint graph and furnishes every directed edge.
pub fn generate_world(id: &str, params: &WorldParams, seed: u64) -> Result<GraphWorld> {
    let p = params;
    if p.size < 2 {
        return Err(Error::Invalid(format!("world size must be at least 2, got {}", p.size)));
    }
    if p.elevations == 0 || p.min_objects == 0 || p.min_objects > p.max_objects || p.max_degree == 0 {
        return Err(Error::Invalid("inconsistent world parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<[f64; 2]> = vec![[rng.gen_range(0.0..p.extent), rng.gen_range(0.0..p.extent)]];
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut tree_degree = vec![0usize];
    let mut tries = 0usize;
    while pos.len() < p.size {
        tries += 1;
        if tries > 200_000 {
            return Err(Error::Invalid(format!("could not place {} viewpoints", p.size)));
        }
        let par = rng.gen_range(0..pos.len());
        if tree_degree[par] >= p.max_degree {
            continue;
        }
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rng.gen_range(p.min_edge..p.max_edge);
        let c = [pos[par][0] + r * ang.cos(), pos[par][1] + r * ang.sin()];
        if c[0] < 0.0 || c[1] < 0.0 || c[0] > p.extent || c[1] > p.extent {
            continue;
        }
        if pos.iter().any(|&q| dist(q, c) < p.min_edge) {
            continue;
        }
        pos.push(c);
        parent.push(Some(par));
        tree_degree[par] += 1;
        tree_degree.push(1);
    }

    let n = pos.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, par) in parent.iter().enumerate() {
        if let Some(u) = *par {
            adj[v].push(u);
            adj[u].push(v);
        }
    }
    let mut extra = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let d = dist(pos[a], pos[b]);
            if d <= p.max_edge && !adj[a].contains(&b) {
                extra.push((d, a, b));
            }
        }
    }
    extra.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    for (_, a, b) in extra {
        if adj[a].len() < p.max_degree && adj[b].len() < p.max_degree {
            adj[a].push(b);
            adj[b].push(a);
        }
    }

    let vocab: Vec<String> = OBJECT_LABELS.iter().map(|s| s.to_string()).collect();
    let weights: Vec<f64> = (0..vocab.len()).map(|r| 1.0 / ((r + 1) as f64).powf(p.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(e.to_string()))?;

    let mut edges = Vec::with_capacity(n);
    for (v, nb) in adj.iter_mut().enumerate() {
        nb.sort_unstable();
        let mut out = Vec::with_capacity(nb.len());
        for &u in nb.iter() {
            let k = rng.gen_range(p.min_objects..=p.max_objects);
            let mut labels: Vec<usize> = Vec::with_capacity(k);
            while labels.len() < k {
                let l = zipf.sample(&mut rng);
                if !labels.contains(&l) {
                    labels.push(l);
                }
            }
            let scene = labels
                .into_iter()
                .map(|l| SceneObject {
                    label: vocab[l].clone(),
                    salience: rng.gen_range(0.2..1.0),
                })
                .collect();
            let (dx, dy) = (pos[u][0] - pos[v][0], pos[u][1] - pos[v][1]);
            out.push(Edge {
                to: u,
                heading: dy.atan2(dx),
                length: dist(pos[v], pos[u]),
                scene,
            });
        }
        edges.push(out);
    }

    Ok(GraphWorld {
        version: WORLD_FORMAT_VERSION,
        id: id.to_string(),
        seed,
        params: p.clone(),
        vocab,
        positions: pos,
        edges,
    })
}

impl GraphWorld {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges[v].iter().map(|e| e.to)
    }

    pub fn edge(&self, from: usize, to: usize) -> Option<&Edge> {
        self.edges.get(from)?.iter().find(|e| e.to == to)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        dist(self.positions[a], self.positions[b])
    }

    /// Dimension of observation image features.
    pub fn feature_dim(&self) -> usize {
        self.params.label_dim + 3
    }

    /// BFS reachability of every viewpoint from viewpoint 0.
    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut q = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = q.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    q.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Structural checks used when loading a world file.
    pub fn validate(&self) -> Result<()> {
        if self.version != WORLD_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported world version {}", self.version)));
        }
        if self.edges.len() != self.positions.len() {
            return Err(Error::Invalid("edge table does not match viewpoint count".into()));
        }
        for (v, es) in self.edges.iter().enumerate() {
            if es.is_empty() {
                return Err(Error::Invalid(format!("viewpoint {v} has no neighbors")));
            }
            for e in es {
                if e.to >= self.len() || e.to == v || self.edge(e.to, v).is_none() {
                    return Err(Error::Invalid(format!("bad edge {v} -> {}", e.to)));
                }
                let d = self.distance(v, e.to);
                if (d - e.length).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("edge {v} -> {} length mismatch", e.to)));
                }
            }
        }
        if !self.is_connected() {
            return Err(Error::Invalid("world graph is disconnected".into()));
        }
        Ok(())
    }

    /// Builds a world from explicit coordinates and undirected edges; `scene`
    /// furnishes each directed edge.
    pub fn from_edges<F>(id: &str, params: WorldParams, positions: Vec<[f64; 2]>, pairs: &[(usize, usize)], mut scene: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<SceneObject>,
    {
        let n = positions.len();
        let mut edges: Vec<Vec<Edge>> = vec![Vec::new(); n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::Invalid(format!("edge ({a}, {b}) outside {n} viewpoints")));
            }
            for (u, v) in [(a, b), (b, a)] {
                let (pu, pv) = (positions[u], positions[v]);
                edges[u].push(Edge {
                    to: v,
                    heading: (pv[1] - pu[1]).atan2(pv[0] - pu[0]),
                    length: dist(pu, pv),
                    scene: scene(u, v),
                });
            }
        }
        for es in &mut edges {
            es.sort_by_key(|e| e.to);
        }
        let w = GraphWorld {
            version: WORLD_FORMAT_VERSION,
            id: id.to_string(),
            seed: 0,
            params: WorldParams { size: n, ..params },
            vocab: OBJECT_LABELS.iter().map(|s| s.to_string()).collect(),
            positions,
            edges,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: GraphWorld = serde_json::from_slice(&std::fs::read(path)?)?;
        w.validate()?;
        Ok(w)
    }
}

/// Panoramic observation at `viewpoint`: one image per navigable neighbor
/// and elevation, with the top `k` objects by salience.
pub fn observe(world: &GraphWorld, viewpoint: usize, k: usize) -> Result<PanoramaObservation> {
    let edges = world.edges.get(viewpoint).ok_or(Error::UnknownViewpoint(viewpoint))?;
    let p = &world.params;
    let elev = p.elevations;
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut obs = PanoramaObservation {
        viewpoint,
        neighbors: Vec::with_capacity(edges.len()),
        images: Vec::new(),
        objects: Vec::new(),
        kappa: Vec::with_capacity(edges.len()),
    };
    for e in edges {
        obs.neighbors.push(e.to);
        let mut ranked: Vec<&SceneObject> = e.scene.iter().collect();
        ranked.sort_by(|a, b| b.salience.total_cmp(&a.salience).then_with(|| a.label.cmp(&b.label)));
        let mut group = Vec::with_capacity(elev);
        for lvl in 0..elev {
            let shown: Vec<&SceneObject> = ranked
                .iter()
                .copied()
                .enumerate()
                .filter(|(r, _)| r % elev == lvl)
                .map(|(_, o)| o)
                .take(k)
                .collect();
            let mut feat = vec![0.0; p.label_dim];
            let total: f64 = shown.iter().map(|o| o.salience).sum();
            for o in &shown {
                let f = label_feature(&o.label, p.label_dim);
                for (x, y) in feat.iter_mut().zip(f) {
                    *x += o.salience * y / total;
                }
            }
            let pitch = if elev > 1 { lvl as f64 / (elev - 1) as f64 - 0.5 } else { 0.0 };
            feat.extend([e.heading.sin(), e.heading.cos(), pitch]);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world.seed, &[viewpoint as u64, e.to as u64, lvl as u64]));
            for x in feat.iter_mut() {
                *x += noise.sample(&mut rng);
            }
            group.push(obs.images.len());
            obs.images.push(feat);
            obs.objects.push(
                shown
                    .iter()
                    .map(|o| ObservedObject {
                        label: o.label.clone(),
                        salience: o.salience,
                    })
                    .collect(),
            );
        }
        obs.kappa.push(group);
    }
    Ok(obs)
}

/// Executes an action; returns the new viewpoint and whether the episode ended.
pub fn step_env(world: &GraphWorld, viewpoint: usize, action: Action) -> Result<(usize, bool)> {
    let edges = world.edges.get(viewpoint).ok_or(Error::UnknownViewpoint(viewpoint))?;
    match action {
        Action::Stop => Ok((viewpoint, true)),
        Action::Move(k) => edges
            .get(k)
            .map(|e| (e.to, false))
            .ok_or_else(|| Error::Invalid(format!("action {k} at viewpoint {viewpoint} with {} neighbors", edges.len()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths weighted by edge length.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPaths {
    pub source: usize,
    pub dist: Vec<f64>,
    pub pred: Vec<Option<usize>>,
}

impl ShortestPaths {
    /// Viewpoints from the source to `target`, inclusive.
    pub fn path_to(&self, target: usize) -> Option<Vec<usize>> {
        if !self.dist[target].is_finite() {
            return None;
        }
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.pred[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    }
}

pub fn shortest_paths(world: &GraphWorld, source: usize) -> Result<ShortestPaths> {
    let n = world.len();
    if source >= n {
        return Err(Error::UnknownViewpoint(source));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem(0.0, source));
    while let Some(HeapItem(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for e in &world.edges[v] {
            let nd = d + e.length;
            if nd < dist[e.to] {
                dist[e.to] = nd;
                pred[e.to] = Some(v);
                heap.push(HeapItem(nd, e.to));
            }
        }
    }
    Ok(ShortestPaths { source, dist, pred })
}

/// Total metric length of a viewpoint sequence.
pub fn path_length(world: &GraphWorld, path: &[usize]) -> f64 {
    path.windows(2).map(|w| world.distance(w[0], w[1])).sum()
}
