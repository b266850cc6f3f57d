//! Rollouts, navigation metrics, ablations and attention export.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{select_action, ActionMode, Model, ModelConfig, StepTrace};
use crate::error::{Error, Result};
use crate::parse::ParsedInstruction;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{progress_target, train_loop, Dataset, TrainConfig};
use crate::world::{path_length, Env, Episode, Split};

pub const SUCCESS_THRESHOLD: f64 = 3.0;

/// How the executed action is chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Greedy,
    Sample,
    Teacher,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub path: Vec<usize>,
    pub traces: Vec<StepTrace>,
    /// Summed step losses, present when a loss weight was given.
    pub loss: Option<Var>,
    /// Initial state attention.
    pub alpha0: Vec<f64>,
}

/// Runs the agent from the episode start for at most `max_steps` decisions.
/// The teacher action at every step is the next hop of a shortest path
/// from the current viewpoint, or stop at the goal and at the last step.
/// With `lambda = Some(λ)` each step adds CE(p, teacher) + λ·MSE(progress).
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &Model,
    tape: &mut Tape,
    env: &Env,
    episode: &Episode,
    parsed: &ParsedInstruction,
    policy: Policy,
    lambda: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let bank = model.encode(tape, parsed)?;
    let mut state = model.init_state(tape, &bank);
    let alpha0 = tape.value(state.alpha).to_vec();
    let mut cur = episode.start;
    let mut path = vec![cur];
    let mut traces = Vec::new();
    let mut loss: Option<Var> = None;
    let max_steps = model.config.max_steps;
    for t in 0..max_steps {
        let obs = env.observation(cur)?;
        let (next, out) = model.step(tape, &bank, &state, obs)?;
        state = next;
        let stop = obs.neighbors.len();
        let teacher = if cur == episode.goal || t + 1 == max_steps {
            stop
        } else {
            env.teacher_action(cur, episode.goal).unwrap_or(stop)
        };
        if let Some(lam) = lambda {
            let ce = tape.cross_entropy(out.logits, teacher)?;
            let target = tape.constant(Tensor::vector(vec![progress_target(env, cur, episode.goal, episode.start)]));
            let mse = tape.mse(out.progress, target)?;
            let mse = tape.scale(mse, lam);
            let term = tape.add(ce, mse)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, term)?,
                None => term,
            });
        }
        let mode = match policy {
            Policy::Greedy => ActionMode::Greedy,
            Policy::Sample => ActionMode::Sample,
            Policy::Teacher => ActionMode::Teacher(teacher),
        };
        let action = select_action(tape.value(out.p), mode, rng)?;
        traces.push(out.trace(tape, cur, action));
        if action == stop {
            break;
        }
        cur = obs.neighbors[action];
        path.push(cur);
    }
    Ok(Rollout {
        path,
        traces,
        loss,
        alpha0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub episode_id: String,
    pub path: Vec<usize>,
    pub trajectory_length: f64,
    pub shortest_length: f64,
    pub final_distance: f64,
    pub success: bool,
    pub alpha0: Vec<f64>,
    pub traces: Vec<StepTrace>,
}

impl TrajectoryResult {
    fn new(env: &Env, episode: &Episode, r: Rollout, threshold: f64) -> Self {
        let end = *r.path.last().unwrap_or(&episode.start);
        let final_distance = env.dist(end, episode.goal);
        TrajectoryResult {
            episode_id: episode.id.clone(),
            trajectory_length: path_length(&env.world, &r.path),
            shortest_length: env.dist(episode.start, episode.goal),
            final_distance,
            success: final_distance <= threshold,
            path: r.path,
            alpha0: r.alpha0,
            traces: r.traces,
        }
    }

    /// State attention per step, starting with the initial distribution.
    pub fn alpha_rows(&self) -> Vec<Vec<f64>> {
        std::iter::once(self.alpha0.clone()).chain(self.traces.iter().map(|t| t.alpha.clone())).collect()
    }
}

/// Rolls out every episode with the given policy (no loss). Episodes run in
/// parallel on the current rayon pool; results keep input order.
pub fn run_policy(model: &Model, data: &Dataset, episodes: &[usize], policy: Policy, threshold: f64, seed: u64) -> Result<Vec<TrajectoryResult>> {
    episodes
        .par_iter()
        .map(|&i| {
            let ep = &data.bench.episodes[i];
            let env = data.bench.env(&ep.world_id)?;
            let mut tape = Tape::with_params(&model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(crate::world::derive_seed(seed, &[i as u64]));
            let r = rollout(model, &mut tape, env, ep, &data.parsed[i], policy, None, &mut rng)?;
            Ok(TrajectoryResult::new(env, ep, r, threshold))
        })
        .collect()
}

/// Deterministic greedy rollouts.
pub fn run_greedy(model: &Model, data: &Dataset, episodes: &[usize], threshold: f64) -> Result<Vec<TrajectoryResult>> {
    run_policy(model, data, episodes, Policy::Greedy, threshold, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    /// Mean final distance to the goal.
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
}

/// NE, SR and SPL; success is re-derived from `threshold`.
pub fn metrics(results: &[TrajectoryResult], threshold: f64) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::Invalid("no results to score".into()));
    }
    let n = results.len() as f64;
    let mut ne = 0.0;
    let mut sr = 0.0;
    let mut spl = 0.0;
    for r in results {
        ne += r.final_distance;
        if r.final_distance <= threshold {
            sr += 1.0;
            let denom = r.trajectory_length.max(r.shortest_length);
            spl += if denom > 0.0 { r.shortest_length / denom } else { 1.0 };
        }
    }
    Ok(Metrics {
        episodes: results.len(),
        ne: ne / n,
        sr: sr / n,
        spl: spl / n,
    })
}

/// Greedy metrics on one split.
pub fn evaluate_split(model: &Model, data: &Dataset, split: Split, threshold: f64) -> Result<(Vec<TrajectoryResult>, Metrics)> {
    let idx = data.indices(split);
    let res = run_greedy(model, data, &idx, threshold)?;
    let m = metrics(&res, threshold)?;
    Ok((res, m))
}

pub fn write_results(path: &Path, results: &[TrajectoryResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub motion: bool,
    pub landmark: bool,
    pub similarity: bool,
}

impl Variant {
    /// Base, +M, +M+L and +M+L+S.
    pub fn table() -> [Variant; 4] {
        let v = |motion, landmark, similarity| Variant {
            motion,
            landmark,
            similarity,
        };
        [v(false, false, false), v(true, false, false), v(true, true, false), v(true, true, true)]
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_motion: self.motion,
            use_landmark: self.landmark,
            use_similarity: self.similarity,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub val_seen: Metrics,
    pub val_unseen: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub runs: Vec<AblationRun>,
    pub val_seen: Metrics,
    pub val_unseen: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub benchmark: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        episodes: ms.first().map_or(0, |m| m.episodes),
        ne: ms.iter().map(|m| m.ne).sum::<f64>() / n,
        sr: ms.iter().map(|m| m.sr).sum::<f64>() / n,
        spl: ms.iter().map(|m| m.spl).sum::<f64>() / n,
    }
}

/// Trains every variant once per seed with otherwise identical settings and
/// reports final-epoch greedy metrics, averaged over seeds.
pub fn run_ablation(data: &Dataset, base: &ModelConfig, train: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let mut runs = Vec::with_capacity(seeds.len());
        let mut parameters = 0;
        for &seed in seeds {
            let tc = TrainConfig { seed, ..train.clone() };
            let mut model = data.new_model(cfg.clone(), seed)?;
            parameters = model.params.num_scalars();
            train_loop(&mut model, data, &tc, None)?;
            let threshold = tc.threshold;
            runs.push(AblationRun {
                seed,
                val_seen: evaluate_split(&model, data, Split::ValSeen, threshold)?.1,
                val_unseen: evaluate_split(&model, data, Split::ValUnseen, threshold)?.1,
            });
        }
        let seen: Vec<Metrics> = runs.iter().map(|r| r.val_seen).collect();
        let unseen: Vec<Metrics> = runs.iter().map(|r| r.val_unseen).collect();
        rows.push(AblationRow {
            variant: cfg.variant_name(),
            parameters,
            val_seen: mean_metrics(&seen),
            val_unseen: mean_metrics(&unseen),
            runs,
        });
    }
    Ok(AblationTable {
        benchmark: data.bench.spec.name.clone(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub episode_id: String,
    pub configurations: Vec<String>,
    pub steps: usize,
    pub path: Vec<usize>,
    pub gamma: Vec<[f64; 2]>,
    pub csv: String,
}

/// Writes the `(steps + 1) × m` state-attention matrix as CSV (first row
/// is the initial distribution) and a JSON sidecar next to it. Returns the
/// sidecar path.
pub fn export_attention(result: &TrajectoryResult, parsed: &ParsedInstruction, csv_path: &Path) -> Result<PathBuf> {
    if result.traces.is_empty() {
        return Err(Error::Invalid(format!("episode {} has an empty trace", result.episode_id)));
    }
    let rows = result.alpha_rows();
    let m = parsed.num_configurations();
    let mut csv = String::new();
    csv.push_str(&(0..m).map(|i| format!("c{i}")).collect::<Vec<_>>().join(","));
    csv.push('\n');
    for r in &rows {
        if r.len() != m {
            return Err(Error::Invalid(format!("attention row has {} entries, instruction has {m} configurations", r.len())));
        }
        csv.push_str(&r.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    std::fs::write(csv_path, csv)?;
    let sidecar = AttentionSidecar {
        episode_id: result.episode_id.clone(),
        configurations: (0..m).map(|i| parsed.config_text(i)).collect(),
        steps: result.traces.len(),
        path: result.path.clone(),
        gamma: result.traces.iter().map(|t| t.gamma).collect(),
        csv: csv_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let side = csv_path.with_extension("json");
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(side)
}

/// Reads a matrix written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| {
            l.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// True when the row-argmax sequence (lowest index on ties) never decreases.
pub fn argmax_monotone(rows: &[Vec<f64>]) -> bool {
    let am: Vec<usize> = rows
        .iter()
        .map(|r| {
            let mut b = 0;
            for (i, &x) in r.iter().enumerate() {
                if x > r[b] {
                    b = i;
                }
            }
            b
        })
        .collect();
    am.windows(2).all(|w| w[0] <= w[1])
}
