//! Mixed cross-entropy and progress-monitor training.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{vocab_for, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{rollout, Policy};
use crate::parse::{parse_instruction, MotionLexicon, ParsedInstruction};
use crate::tensor::{adam_step, Adam, ParamGrads, Tape};
use crate::world::{derive_seed, Benchmark, Env, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Progress-loss weight.
    pub lambda: f64,
    /// Chance of a sampled rollout in the final epoch; grows linearly from 0.
    pub sample_max: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    /// Evaluate every this many epochs (and always after the last); 0 never.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            epochs: 30,
            lambda: 0.5,
            sample_max: 0.5,
            seed: 0,
            threshold: crate::eval::SUCCESS_THRESHOLD,
            jobs: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Training schedule paired with [`ModelConfig::compact`].
    pub fn compact() -> Self {
        TrainConfig {
            lr: 3e-3,
            epochs: 60,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.sample_max) {
            return Err(Error::Invalid(format!("sample_max must lie in [0, 1], got {}", self.sample_max)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Invalid("success threshold must be non-negative".into()));
        }
        Ok(())
    }

    /// Probability of a sampled rollout in `epoch`.
    pub fn sample_prob(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            0.0
        } else {
            self.sample_max * epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64
        }
    }
}

/// A benchmark with every instruction parsed once.
pub struct Dataset {
    pub bench: Benchmark,
    pub parsed: Vec<ParsedInstruction>,
}

impl Dataset {
    pub fn new(bench: Benchmark, lexicon: &MotionLexicon) -> Result<Self> {
        let parsed = bench
            .episodes
            .iter()
            .map(|e| parse_instruction(&e.instruction, lexicon))
            .collect::<Result<_>>()?;
        Ok(Dataset { bench, parsed })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.bench.episodes.len()).filter(|&i| self.bench.episodes[i].split == split).collect()
    }

    /// Matches world-dependent sizes in `cfg` to this benchmark.
    pub fn fit_config(&self, mut cfg: ModelConfig) -> ModelConfig {
        let w = &self.bench.spec.world;
        cfg.feature_dim = w.label_dim + 3;
        cfg.elevations = w.elevations;
        cfg.k_objects = self.bench.spec.episodes.k_objects;
        let widest = self.bench.envs.iter().map(|e| e.world.edges.iter().map(Vec::len).max().unwrap_or(0)).max().unwrap_or(0);
        cfg.n_max = cfg.n_max.max(widest * w.elevations);
        cfg
    }

    /// Fresh model over the training vocabulary.
    pub fn new_model(&self, cfg: ModelConfig, seed: u64) -> Result<Model> {
        let train = self.indices(Split::Train);
        let vocab = vocab_for(train.iter().map(|&i| &self.parsed[i]));
        Model::new(self.fit_config(cfg), vocab, seed)
    }
}

/// 1 − d(current, goal)/d(start, goal), clipped to [0, 1].
pub fn progress_target(env: &Env, current: usize, goal: usize, start: usize) -> f64 {
    let total = env.dist(start, goal);
    if total <= 0.0 {
        return 1.0;
    }
    (1.0 - env.dist(current, goal) / total).clamp(0.0, 1.0)
}

/// Loss value and parameter gradients of one episode.
pub fn episode_grads(model: &Model, data: &Dataset, index: usize, policy: Policy, lambda: f64, seed: u64) -> Result<(f64, ParamGrads)> {
    let ep = &data.bench.episodes[index];
    let env = data.bench.env(&ep.world_id)?;
    let mut tape = Tape::with_params(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rollout(model, &mut tape, env, ep, &data.parsed[index], policy, Some(lambda), &mut rng)?;
    let loss = r.loss.ok_or_else(|| Error::Invalid(format!("episode {} produced no steps", ep.id)))?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss on episode {}", ep.id)));
    }
    tape.backward(loss)?;
    Ok((value, tape.into_param_grads()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub sr_seen: Option<f64>,
    pub sr_unseen: Option<f64>,
    pub spl_seen: Option<f64>,
    pub spl_unseen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    epoch: usize,
    wall_time: f64,
}

/// Where a run continues from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub next_epoch: usize,
    pub best_sr: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub state: TrainState,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train_loop(model: &mut Model, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    train_from(model, data, cfg, out, TrainState::default())
}

/// Loads `last.ckpt` from a run directory together with its progress.
pub fn resume(out: &Path) -> Result<(Model, TrainState)> {
    let (model, header) = Model::load(&out.join(LAST_CHECKPOINT))?;
    let state = header
        .get("state")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint header lacks training state".into()))?;
    Ok((model, serde_json::from_value(state)?))
}

fn open_log(path: &Path, keep_before: usize) -> Result<std::fs::File> {
    let kept: Vec<String> = if keep_before > 0 && path.exists() {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()))
                    .is_some_and(|e| (e as usize) < keep_before)
            })
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut f = std::fs::File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Runs epochs `state.next_epoch..cfg.epochs`. Each epoch shuffles the
/// training split, accumulates the mean episode loss over each batch and
/// takes one ADAM step per batch. With `out`, appends to the metrics log
/// and writes `last.ckpt` every epoch and `best.ckpt` on a new best
/// val-seen SR.
pub fn train_from(model: &mut Model, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>, mut state: TrainState) -> Result<TrainReport> {
    cfg.validate()?;
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let opt = Adam::with_lr(cfg.lr);
    let mut logs = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some((open_log(&dir.join(METRICS_FILE), state.next_epoch)?, open_log(&dir.join(TIMING_FILE), state.next_epoch)?))
        }
        None => None,
    };
    let seen = data.indices(Split::ValSeen);
    let unseen = data.indices(Split::ValUnseen);
    let clock = std::time::Instant::now();
    let mut history = Vec::new();

    for epoch in state.next_epoch..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64])));
        let p_sample = cfg.sample_prob(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, Policy, u64)> = batch
                .iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[2, epoch as u64, i as u64]);
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let policy = if r.gen::<f64>() < p_sample { Policy::Sample } else { Policy::Teacher };
                    (i, policy, r.gen())
                })
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<(f64, ParamGrads)>> =
                pool.install(|| jobs.par_iter().map(|&(i, pol, s)| episode_grads(model_ref, data, i, pol, cfg.lambda, s)).collect());
            let mut grads = ParamGrads::new(model.params.len());
            for r in results {
                let (l, g) = r?;
                total += l;
                grads.merge(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            model.params.accumulate(&grads);
            adam_step(&mut model.params, &opt);
        }

        let evaluate = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let score = |idx: &[usize]| -> Result<Option<(f64, f64)>> {
            if !evaluate || idx.is_empty() {
                return Ok(None);
            }
            let res = pool.install(|| crate::eval::run_greedy(model, data, idx, cfg.threshold))?;
            let m = crate::eval::metrics(&res, cfg.threshold)?;
            Ok(Some((m.sr, m.spl)))
        };
        let s = score(&seen)?;
        let u = score(&unseen)?;
        let row = EpochMetrics {
            epoch,
            train_loss: total / train.len() as f64,
            sr_seen: s.map(|x| x.0),
            sr_unseen: u.map(|x| x.0),
            spl_seen: s.map(|x| x.1),
            spl_unseen: u.map(|x| x.1),
        };
        state.next_epoch = epoch + 1;
        let improved = row.sr_seen.is_some_and(|a| state.best_sr.map_or(true, |b| a > b));
        if improved {
            state.best_sr = row.sr_seen;
            state.best_epoch = Some(epoch);
        }
        if let (Some(dir), Some((mlog, tlog))) = (out, logs.as_mut()) {
            writeln!(mlog, "{}", serde_json::to_string(&row)?)?;
            mlog.flush()?;
            let t = Timing {
                epoch,
                wall_time: clock.elapsed().as_secs_f64(),
            };
            writeln!(tlog, "{}", serde_json::to_string(&t)?)?;
            tlog.flush()?;
            let extra = serde_json::json!({ "train": cfg, "state": state });
            model.save(&dir.join(LAST_CHECKPOINT), extra.clone())?;
            if improved {
                model.save(&dir.join(BEST_CHECKPOINT), extra)?;
            }
        }
        history.push(row);
    }
    Ok(TrainReport { metrics: history, state })
}
