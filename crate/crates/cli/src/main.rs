//! `spcnav` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spcnav::agent::{Model, ModelConfig};
use spcnav::eval::{argmax_monotone, evaluate_split, export_attention, metrics, run_ablation, write_results, Metrics, Variant};
use spcnav::parse::{evaluate_parser, parse_instruction, read_annotations, MotionLexicon, ParsedInstruction};
use spcnav::train::{resume, train_from, train_loop, Dataset, TrainConfig, TrainState};
use spcnav::world::{
    build_benchmark, generate_episode, generate_world, load_benchmark, read_episodes, save_benchmark, write_episodes, BenchmarkSpec,
    Episode, EpisodeOptions, GraphWorld, Split, WorldParams,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "spcnav", version, about = "Spatial-configuration navigation: worlds, parsing, training and evaluation")]
struct Cli {
    /// Seed for world generation, model initialisation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Versioned JSON file with `model` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, or an output file whose directory receives everything else.
    #[arg(long, global = true, env = "SPCNAV_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one world, or every world of a benchmark.
    GenWorld(GenWorldArgs),
    /// Generate episodes for a world file, or a whole benchmark directory.
    GenEpisodes(GenEpisodesArgs),
    /// Parse instructions (one per line) into spatial configurations.
    Parse(ParseArgs),
    /// Score parser output against gold configuration annotations.
    EvalParser(EvalParserArgs),
    /// Train a navigation agent.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate the base, +M, +M+L and +M+L+S variants.
    Ablate(AblateArgs),
    /// Export state-attention heatmaps for episodes.
    ExportAttn(ExportArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Bundled benchmark spec (`ref` or `small`).
    #[arg(long, default_value = "ref")]
    benchmark: String,
    /// Benchmark directory written by `gen-episodes --benchmark`; overrides --benchmark.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Motion-indicator lexicon (one phrase per line); defaults to the bundled one.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize)]
struct HyperArgs {
    /// Preset for model and training defaults: `desk` or `compact`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Progress-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Success radius in meters.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    no_landmark: bool,
    #[arg(long)]
    no_similarity: bool,
}

#[derive(Args, Debug)]
struct GenWorldArgs {
    #[arg(long, default_value_t = 30)]
    size: usize,
    #[arg(long, default_value = "world")]
    id: String,
    /// Write every world of this bundled benchmark instead.
    #[arg(long)]
    benchmark: Option<String>,
}

#[derive(Args, Debug)]
struct GenEpisodesArgs {
    /// Build a complete bundled benchmark (worlds and episodes).
    #[arg(long, conflicts_with = "world")]
    benchmark: Option<String>,
    /// World file to draw episodes from.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 1)]
    min_hops: usize,
    #[arg(long, default_value_t = 3)]
    max_hops: usize,
}

#[derive(Args, Debug)]
struct ParseArgs {
    /// Text file with one instruction per line.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalParserArgs {
    /// Episodes file; its instructions are parsed and compared with their gold parses.
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Instructions file (one per line), used together with --gold.
    #[arg(long = "in", requires = "gold")]
    input: Option<PathBuf>,
    /// Gold annotations (JSON lines), aligned with --in.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: train, val_seen, val_unseen or all.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = spcnav::eval::SUCCESS_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode ids to export (default: every episode of --split).
    #[arg(long, value_delimiter = ',')]
    episode: Vec<String>,
    #[arg(long, default_value = "val_seen")]
    split: String,
    /// Roll out the gold path instead of the greedy policy.
    #[arg(long)]
    teacher: bool,
}

/// Versioned configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigFile {
    version: u32,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InputHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    code_version: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
}

/// Validation failure: reported with exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

struct Ctx {
    seed: u64,
    jobs: usize,
    config: Option<ConfigFile>,
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    /// Explicit output file, when --out named one.
    out_file: Option<PathBuf>,
    argv: Vec<String>,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("spcnav-out"));
        let is_file = out.extension().is_some_and(|e| e == "json" || e == "jsonl" || e == "csv");
        let (out_dir, out_file) = if is_file {
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (dir, Some(out))
        } else {
            (out, None)
        };
        let config = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let c: ConfigFile = serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", p.display())))?;
                if c.version != CONFIG_VERSION {
                    return Err(Invalid(format!("config version {} is not supported (expected {CONFIG_VERSION})", c.version)).into());
                }
                Some(c)
            }
            None => None,
        };
        Ok(Ctx {
            seed: cli.seed.unwrap_or(0),
            jobs: cli.jobs.unwrap_or(0),
            config,
            config_path: cli.config.clone(),
            out_dir,
            out_file,
            argv: std::env::args().collect(),
        })
    }

    fn output(&self, default_name: &str) -> PathBuf {
        self.out_file.clone().unwrap_or_else(|| self.out_dir.join(default_name))
    }

    /// Model and training configuration: preset, then config file, then flags.
    fn resolve(&self, h: &HyperArgs) -> Result<(ModelConfig, TrainConfig)> {
        let (mut m, mut t) = match h.preset.as_deref() {
            None | Some("desk") => (ModelConfig::default(), TrainConfig::default()),
            Some("compact") => (ModelConfig::compact(), TrainConfig::compact()),
            Some(other) => return Err(Invalid(format!("unknown preset {other:?} (expected desk or compact)")).into()),
        };
        if let Some(c) = &self.config {
            if let Some(cm) = &c.model {
                m = cm.clone();
            }
            if let Some(ct) = &c.train {
                t = ct.clone();
            }
        }
        t.seed = self.seed;
        t.jobs = self.jobs;
        if let Some(x) = h.epochs {
            t.epochs = x;
        }
        if let Some(x) = h.lr {
            t.lr = x;
        }
        if let Some(x) = h.batch_size {
            t.batch_size = x;
        }
        if let Some(x) = h.lambda {
            t.lambda = x;
        }
        if let Some(x) = h.eval_every {
            t.eval_every = x;
        }
        if let Some(x) = h.threshold {
            t.threshold = x;
        }
        if let Some(x) = h.max_steps {
            m.max_steps = x;
        }
        if let Some(x) = h.hidden {
            m.hidden = x;
        }
        m.use_motion &= !h.no_motion;
        m.use_landmark &= !h.no_landmark;
        m.use_similarity &= !h.no_similarity;
        m.validate().map_err(|e| Invalid(e.to_string()))?;
        t.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok((m, t))
    }

    /// Writes the run manifest before any other artifact.
    fn manifest(&self, command: &str, config: serde_json::Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let mut all_inputs = inputs.to_vec();
        if let Some(p) = &self.config_path {
            all_inputs.push(p.clone());
        }
        let inputs = all_inputs
            .iter()
            .map(|p| Ok(InputHash { path: p.clone(), sha256: hash_path(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config,
            inputs,
            outputs: outputs.to_vec(),
        };
        let name = match &self.out_file {
            Some(f) => format!("{}.manifest.json", f.file_stem().unwrap_or_default().to_string_lossy()),
            None => format!("manifest-{command}.json"),
        };
        std::fs::write(self.out_dir.join(name), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

/// SHA-256 of a file, or of every file below a directory in path order.
fn hash_path(p: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut files = Vec::new();
        collect_files(p, &mut files)?;
        files.sort();
        for f in files {
            h.update(f.strip_prefix(p).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update(std::fs::read(&f)?);
        }
    } else {
        h.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn lexicon(path: &Option<PathBuf>) -> Result<MotionLexicon> {
    Ok(match path {
        Some(p) => MotionLexicon::load(p)?,
        None => MotionLexicon::bundled(),
    })
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "train" => Some(Split::Train),
        "val_seen" => Some(Split::ValSeen),
        "val_unseen" => Some(Split::ValUnseen),
        "all" => None,
        _ => return Err(Invalid(format!("unknown split {s:?}")).into()),
    })
}

fn data_inputs(d: &DataArgs) -> Vec<PathBuf> {
    d.data.iter().chain(d.lexicon.iter()).cloned().collect()
}

fn load_data(d: &DataArgs) -> Result<Dataset> {
    let bench = match &d.data {
        Some(dir) => load_benchmark(dir)?,
        None => build_benchmark(&BenchmarkSpec::by_name(&d.benchmark).map_err(|e| Invalid(e.to_string()))?)?,
    };
    Ok(Dataset::new(bench, &lexicon(&d.lexicon)?)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Re-reads a JSON-lines artifact as `T`.
fn check_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let mut n = 0;
    for (i, l) in text.lines().enumerate() {
        serde_json::from_str::<T>(l).with_context(|| format!("{}:{} does not match its schema", path.display(), i + 1))?;
        n += 1;
    }
    Ok(n)
}

fn check_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("{} does not match its schema", path.display()))
}

fn gen_world(ctx: &Ctx, a: &GenWorldArgs) -> Result<()> {
    match &a.benchmark {
        Some(name) => {
            let spec = BenchmarkSpec::by_name(name).map_err(|e| Invalid(e.to_string()))?;
            let bench = build_benchmark(&spec)?;
            let dir = ctx.out_dir.join("worlds");
            let outs: Vec<PathBuf> = bench.envs.iter().map(|e| dir.join(format!("{}.json", e.world.id))).collect();
            ctx.manifest("gen-world", serde_json::to_value(&spec)?, &[], &outs)?;
            std::fs::create_dir_all(&dir)?;
            for (e, p) in bench.envs.iter().zip(&outs) {
                e.world.save(p)?;
                GraphWorld::load(p)?;
            }
            println!("wrote {} worlds to {}", outs.len(), dir.display());
        }
        None => {
            let params = WorldParams {
                size: a.size,
                ..WorldParams::default()
            };
            let out = ctx.output(&format!("{}.json", a.id));
            ctx.manifest("gen-world", serde_json::to_value(&params)?, &[], &[out.clone()])?;
            let w = generate_world(&a.id, &params, ctx.seed).map_err(|e| Invalid(e.to_string()))?;
            w.save(&out)?;
            GraphWorld::load(&out)?;
            println!("wrote {} ({} viewpoints)", out.display(), w.len());
        }
    }
    Ok(())
}

fn gen_episodes(ctx: &Ctx, a: &GenEpisodesArgs) -> Result<()> {
    if let Some(name) = &a.benchmark {
        let spec = BenchmarkSpec::by_name(name).map_err(|e| Invalid(e.to_string()))?;
        ctx.manifest("gen-episodes", serde_json::to_value(&spec)?, &[], &[ctx.out_dir.clone()])?;
        let bench = build_benchmark(&spec)?;
        let files = save_benchmark(&ctx.out_dir, &bench)?;
        let back = load_benchmark(&ctx.out_dir)?;
        if back.episodes != bench.episodes {
            bail!("benchmark directory did not round-trip");
        }
        println!("wrote {} episodes over {} worlds ({} files)", bench.episodes.len(), bench.envs.len(), files.len());
        return Ok(());
    }
    let Some(world_path) = &a.world else {
        return Err(Invalid("gen-episodes needs --benchmark or --world".into()).into());
    };
    let split = parse_split(&a.split)?.ok_or_else(|| Invalid("choose one split for generated episodes".into()))?;
    let opts = EpisodeOptions {
        min_hops: a.min_hops,
        max_hops: a.max_hops,
        ..EpisodeOptions::default()
    };
    let out = ctx.output("episodes.jsonl");
    ctx.manifest("gen-episodes", serde_json::to_value(&opts)?, &[world_path.clone()], &[out.clone()])?;
    let world = GraphWorld::load(world_path)?;
    let eps: Vec<Episode> = (0..a.count)
        .map(|k| {
            let id = format!("{}-{}-{k:03}", world.id, split.as_str());
            generate_episode(&world, &opts, &id, split, spcnav::world::derive_seed(ctx.seed, &[k as u64]))
        })
        .collect::<spcnav::Result<_>>()
        .map_err(|e| Invalid(e.to_string()))?;
    write_episodes(&out, &eps)?;
    read_episodes(&out)?;
    println!("wrote {} episodes to {}", eps.len(), out.display());
    Ok(())
}

fn parse_cmd(ctx: &Ctx, a: &ParseArgs) -> Result<()> {
    let out = ctx.output("parses.jsonl");
    let inputs: Vec<PathBuf> = std::iter::once(a.input.clone()).chain(a.lexicon.clone()).collect();
    ctx.manifest("parse", serde_json::json!({ "lexicon": a.lexicon }), &inputs, &[out.clone()])?;
    let lex = lexicon(&a.lexicon)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut parsed = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut p = parse_instruction(line, &lex).map_err(|e| Invalid(format!("line {}: {e}", i + 1)))?;
        p.instruction_id = Some(format!("{}", i + 1));
        parsed.push(p);
    }
    write_jsonl(&out, &parsed)?;
    let n = check_jsonl::<ParsedInstruction>(&out)?;
    println!("parsed {n} instructions into {}", out.display());
    Ok(())
}

fn eval_parser_cmd(ctx: &Ctx, a: &EvalParserArgs) -> Result<()> {
    let lex = lexicon(&a.lexicon)?;
    let out = ctx.output("parser_report.json");
    let (inputs, instructions, gold): (Vec<PathBuf>, Vec<String>, Vec<_>) = match (&a.episodes, &a.input, &a.gold) {
        (Some(ep), _, _) => {
            let eps = read_episodes(ep)?;
            (
                vec![ep.clone()],
                eps.iter().map(|e| e.instruction.clone()).collect(),
                eps.into_iter().map(|e| e.gold_parse).collect(),
            )
        }
        (None, Some(inp), Some(g)) => {
            let text = std::fs::read_to_string(inp)?;
            let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
            (vec![inp.clone(), g.clone()], lines, read_annotations(g)?)
        }
        _ => return Err(Invalid("eval-parser needs --episodes, or --in with --gold".into()).into()),
    };
    let inputs: Vec<PathBuf> = inputs.into_iter().chain(a.lexicon.clone()).collect();
    ctx.manifest("eval-parser", serde_json::json!({ "lexicon": a.lexicon }), &inputs, &[out.clone()])?;
    let parsed = instructions
        .iter()
        .zip(&gold)
        .map(|(t, g)| {
            let mut p = parse_instruction(t, &lex)?;
            p.instruction_id = Some(g.instruction_id.clone());
            Ok(p)
        })
        .collect::<spcnav::Result<Vec<_>>>()
        .map_err(|e| Invalid(e.to_string()))?;
    let report = evaluate_parser(&parsed, &gold).map_err(|e| Invalid(e.to_string()))?;
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    check_json::<spcnav::parse::ParserReport>(&out)?;
    println!(
        "configuration accuracy {:.4} over {} instructions ({} configurations)",
        report.configuration_accuracy, report.instructions, report.configurations
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (mcfg, tcfg) = ctx.resolve(&a.hyper)?;
    let dir = ctx.out_dir.clone();
    let outs = vec![dir.join("metrics.jsonl"), dir.join("timing.jsonl"), dir.join("last.ckpt"), dir.join("best.ckpt")];
    let data = load_data(&a.data)?;
    let (mut model, state) = if a.resume {
        let (m, s) = resume(&dir)?;
        (m, s)
    } else {
        (data.new_model(mcfg, tcfg.seed)?, TrainState::default())
    };
    ctx.manifest(
        "train",
        serde_json::json!({ "benchmark": data.bench.spec, "model": model.config, "train": tcfg, "resume_from_epoch": state.next_epoch }),
        &data_inputs(&a.data),
        &outs,
    )?;
    let report = if a.resume {
        train_from(&mut model, &data, &tcfg, Some(&dir), state)?
    } else {
        train_loop(&mut model, &data, &tcfg, Some(&dir))?
    };
    check_jsonl::<spcnav::train::EpochMetrics>(&dir.join("metrics.jsonl"))?;
    Model::load(&dir.join("last.ckpt"))?;
    if let Some(last) = report.metrics.last() {
        println!(
            "epoch {} loss {:.4} SR seen {} unseen {}",
            last.epoch,
            last.train_loss,
            fmt_opt(last.sr_seen),
            fmt_opt(last.sr_unseen)
        );
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalSummary {
    checkpoint: PathBuf,
    threshold: f64,
    splits: Vec<(String, Metrics)>,
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let splits: Vec<Split> = match parse_split(&a.split)? {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::ValSeen, Split::ValUnseen],
    };
    let summary_path = ctx.output("summary.json");
    let mut outs: Vec<PathBuf> = splits.iter().map(|s| ctx.out_dir.join(format!("results_{}.jsonl", s.as_str()))).collect();
    outs.push(summary_path.clone());
    let mut inputs = data_inputs(&a.data);
    inputs.push(a.checkpoint.clone());
    ctx.manifest("eval", serde_json::json!({ "split": a.split, "threshold": a.threshold }), &inputs, &outs)?;
    let (model, _) = Model::load(&a.checkpoint)?;
    let pool = ctx.pool()?;
    let mut rows = Vec::new();
    for (s, path) in splits.iter().zip(&outs) {
        if data.indices(*s).is_empty() {
            continue;
        }
        let (res, m) = pool.install(|| evaluate_split(&model, &data, *s, a.threshold))?;
        write_results(path, &res)?;
        check_jsonl::<spcnav::eval::TrajectoryResult>(path)?;
        println!("{:<10} NE {:.3} SR {:.3} SPL {:.3} ({} episodes)", s.as_str(), m.ne, m.sr, m.spl, m.episodes);
        rows.push((s.as_str().to_string(), m));
    }
    let summary = EvalSummary {
        checkpoint: a.checkpoint.clone(),
        threshold: a.threshold,
        splits: rows,
    };
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    check_json::<EvalSummary>(&summary_path)?;
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let (mcfg, tcfg) = ctx.resolve(&a.hyper)?;
    if a.seeds.is_empty() {
        return Err(Invalid("at least one seed is required".into()).into());
    }
    let out = ctx.output("ablation.json");
    let data = load_data(&a.data)?;
    ctx.manifest(
        "ablate",
        serde_json::json!({ "benchmark": data.bench.spec, "model": mcfg, "train": tcfg, "seeds": a.seeds }),
        &data_inputs(&a.data),
        &[out.clone()],
    )?;
    let table = run_ablation(&data, &mcfg, &tcfg, &Variant::table(), &a.seeds)?;
    std::fs::write(&out, serde_json::to_vec_pretty(&table)?)?;
    check_json::<spcnav::eval::AblationTable>(&out)?;
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "variant", "SR seen", "SPL seen", "SR uns", "SPL uns");
    for r in &table.rows {
        println!(
            "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.variant, r.val_seen.sr, r.val_seen.spl, r.val_unseen.sr, r.val_unseen.spl
        );
    }
    Ok(())
}

fn export_cmd(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let idx: Vec<usize> = if a.episode.is_empty() {
        match parse_split(&a.split)? {
            Some(s) => data.indices(s),
            None => (0..data.bench.episodes.len()).collect(),
        }
    } else {
        a.episode
            .iter()
            .map(|id| {
                data.bench
                    .episodes
                    .iter()
                    .position(|e| &e.id == id)
                    .ok_or_else(|| Invalid(format!("unknown episode {id}")).into())
            })
            .collect::<Result<_>>()?
    };
    let dir = ctx.out_dir.join("attention");
    let outs: Vec<PathBuf> = idx.iter().map(|&i| dir.join(format!("{}.csv", data.bench.episodes[i].id))).collect();
    let mut inputs = data_inputs(&a.data);
    inputs.push(a.checkpoint.clone());
    ctx.manifest("export-attn", serde_json::json!({ "teacher": a.teacher, "split": a.split }), &inputs, &outs)?;
    let (model, _) = Model::load(&a.checkpoint)?;
    let policy = if a.teacher { spcnav::eval::Policy::Teacher } else { spcnav::eval::Policy::Greedy };
    let pool = ctx.pool()?;
    let results = pool.install(|| spcnav::eval::run_policy(&model, &data, &idx, policy, spcnav::eval::SUCCESS_THRESHOLD, ctx.seed))?;
    std::fs::create_dir_all(&dir)?;
    let mut monotone = 0;
    for ((r, &i), path) in results.iter().zip(&idx).zip(&outs) {
        export_attention(r, &data.parsed[i], path)?;
        let rows = spcnav::eval::read_attention_csv(path)?;
        if rows.iter().any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
            bail!("{}: attention rows do not sum to 1", path.display());
        }
        monotone += argmax_monotone(&rows) as usize;
    }
    let m = metrics(&results, spcnav::eval::SUCCESS_THRESHOLD)?;
    println!(
        "exported {} heatmaps to {}; monotone argmax on {monotone}; SR {:.3}",
        results.len(),
        dir.display(),
        m.sr
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::GenWorld(a) => gen_world(&ctx, a),
        Command::GenEpisodes(a) => gen_episodes(&ctx, a),
        Command::Parse(a) => parse_cmd(&ctx, a),
        Command::EvalParser(a) => eval_parser_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::ExportAttn(a) => export_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
