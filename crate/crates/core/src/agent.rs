//! The navigation policy: instruction encoder, configuration bank and the
//! per-step decoder that scores navigable viewpoints.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    config_repr, grounded_instruction, image_attn, object_align, predict_controller, similarity_score, state_attn_update, ObjectAlign,
    SimilarityInput,
};
use crate::error::{Error, Result};
use crate::parse::{ParsedInstruction, Pos, Span, DELIMITER};
use crate::tensor::{init_uniform, load_checkpoint, save_checkpoint, Linear, LstmCell, LstmState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::world::{derive_seed, stable_hash, PanoramaObservation, OBJECT_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub hidden: usize,
    /// Motion/landmark embedding width; also the object embedding width.
    pub role_dim: usize,
    pub obj_dim: usize,
    /// Width of projected image features.
    pub img_proj: usize,
    /// Raw image feature width delivered by the world.
    pub feature_dim: usize,
    pub n_max: usize,
    pub k_objects: usize,
    pub elevations: usize,
    pub max_steps: usize,
    pub use_motion: bool,
    pub use_landmark: bool,
    pub use_similarity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_dim: 64,
            hidden: 128,
            role_dim: 32,
            obj_dim: 32,
            img_proj: 64,
            feature_dim: 67,
            n_max: 16,
            k_objects: 6,
            elevations: 1,
            max_steps: 10,
            use_motion: true,
            use_landmark: true,
            use_similarity: true,
        }
    }
}

impl ModelConfig {
    /// Narrow encoder with a wide image projection; trains in about a
    /// minute per run on the `ref` benchmark.
    pub fn compact() -> Self {
        ModelConfig {
            token_dim: 32,
            hidden: 32,
            role_dim: 32,
            obj_dim: 32,
            img_proj: 64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.role_dim != self.obj_dim {
            return Err(Error::Invalid(format!(
                "role_dim ({}) must equal obj_dim ({}): objects and landmarks share one embedding table",
                self.role_dim, self.obj_dim
            )));
        }
        let dims = [self.token_dim, self.hidden, self.role_dim, self.img_proj, self.feature_dim, self.n_max, self.k_objects, self.elevations, self.max_steps];
        if dims.contains(&0) {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Width of an enriched configuration vector.
    pub fn enriched_dim(&self) -> usize {
        self.hidden + self.role_dim * (self.use_motion as usize + self.use_landmark as usize)
    }

    /// Variant label in the ablation table: `base`, `+M`, `+M+L`, ...
    pub fn variant_name(&self) -> String {
        let mut s = String::new();
        for (on, tag) in [(self.use_motion, "+M"), (self.use_landmark, "+L"), (self.use_similarity, "+S")] {
            if on {
                s.push_str(tag);
            }
        }
        if s.is_empty() {
            s.push_str("base");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

impl Vocab {
    /// Specials first, then the sorted union of `words` and the object labels.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<String> = words.into_iter().map(str::to_lowercase).collect();
        set.extend(OBJECT_LABELS.iter().map(|s| s.to_string()));
        for s in [PAD, UNK, DELIMITER] {
            set.remove(s);
        }
        let mut all = vec![PAD.to_string(), UNK.to_string(), DELIMITER.to_string()];
        all.extend(set);
        Self::from_words(all)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, w: &str) -> usize {
        match self.index.get(w) {
            Some(&i) => i,
            None => self.index.get(&w.to_lowercase()).copied().unwrap_or(1),
        }
    }
}

/// Parameter handles of the model.
#[derive(Debug, Clone)]
pub struct Weights {
    pub tok_emb: ParamId,
    pub role_emb: ParamId,
    pub enc_fwd: LstmCell,
    pub enc_bwd: LstmCell,
    pub w_cfg: ParamId,
    pub fc_img: ParamId,
    pub w_img: ParamId,
    pub fc_gamma: Linear,
    pub w_obj: ParamId,
    pub w_objimg: ParamId,
    pub decoder: LstmCell,
    pub fc_pred: Linear,
    pub fc_stop: Linear,
    pub fc_prog: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub weights: Weights,
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stable_hash(name)]))
}

impl Model {
    /// Fresh parameters. Every parameter draws from its own stream keyed by
    /// name, so variants that differ in one layer share all the others.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mat = |store: &mut ParamStore, name: &str, r: usize, k: usize| -> Result<ParamId> {
            Ok(store.add(name, init_uniform(&mut rng_for(seed, name), r, k))?)
        };
        let v = vocab.len();
        let d = c.enriched_dim();
        let tok_emb = mat(&mut store, "tok_emb", v, c.token_dim)?;
        let role_emb = mat(&mut store, "role_emb", v, c.role_dim)?;
        let enc_fwd = LstmCell::new(&mut store, &mut rng_for(seed, "enc_fwd"), "enc_fwd", c.token_dim, c.hidden)?;
        let enc_bwd = LstmCell::new(&mut store, &mut rng_for(seed, "enc_bwd"), "enc_bwd", c.token_dim, c.hidden)?;
        let w_cfg = mat(&mut store, "w_cfg", c.hidden, c.hidden)?;
        let fc_img = mat(&mut store, "fc_img.weight", c.img_proj, c.feature_dim)?;
        let w_img = mat(&mut store, "w_img", c.hidden, c.img_proj)?;
        let gamma_in = c.hidden + c.img_proj + if c.use_similarity { c.n_max } else { 0 };
        let fc_gamma = Linear::new(&mut store, &mut rng_for(seed, "fc_gamma"), "fc_gamma", gamma_in, 2, true)?;
        let w_obj = mat(&mut store, "w_obj", d, c.obj_dim)?;
        let w_objimg = mat(&mut store, "w_objimg", c.hidden, c.obj_dim)?;
        let decoder = LstmCell::new(&mut store, &mut rng_for(seed, "decoder"), "decoder", d + c.img_proj, c.hidden)?;
        let fc_pred = Linear::new(&mut store, &mut rng_for(seed, "fc_pred"), "fc_pred", d + c.hidden, c.img_proj, true)?;
        let fc_stop = Linear::new(&mut store, &mut rng_for(seed, "fc_stop"), "fc_stop", d + c.hidden, 1, true)?;
        let fc_prog = Linear::new(&mut store, &mut rng_for(seed, "fc_prog"), "fc_prog", c.hidden, 1, true)?;
        let weights = Weights {
            tok_emb,
            role_emb,
            enc_fwd,
            enc_bwd,
            w_cfg,
            fc_img,
            w_img,
            fc_gamma,
            w_obj,
            w_objimg,
            decoder,
            fc_pred,
            fc_stop,
            fc_prog,
        };
        Ok(Model {
            config,
            vocab,
            params: store,
            weights,
        })
    }

    /// Replaces parameter values (and optimizer state) with those of a
    /// checkpoint store, checking names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                store.len(),
                self.params.len()
            )));
        }
        for ((_, a), (_, b)) in self.params.iter().zip(store.iter()) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name, a.tensor.shape, b.name, b.tensor.shape
                )));
            }
        }
        let mut store = store;
        for p in store.iter_mut() {
            p.tensor.requires_grad = true;
        }
        self.params = store;
        Ok(())
    }
}

/// Enriched configuration vectors and landmark embeddings of one instruction.
#[derive(Debug, Clone)]
pub struct ConfigBank {
    pub m: usize,
    /// `[m, enriched_dim]`.
    pub bank: Var,
    /// Per configuration: stream tokens including its delimiter.
    pub token_counts: Vec<usize>,
    /// `[total landmarks, role_dim]`, absent when no configuration has one.
    pub landmarks: Option<Var>,
    pub landmark_groups: Vec<Vec<usize>>,
    /// Main-landmark slot is all zeros.
    pub landmark_free: Vec<bool>,
}

/// Decoder memory, state attention and step counter.
#[derive(Debug, Clone, Copy)]
pub struct AgentState {
    pub lstm: LstmState,
    pub alpha: Var,
    pub t: usize,
}

/// Tape handles produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Navigable-viewpoint scores with the stop logit last.
    pub logits: Var,
    pub p: Var,
    pub progress: Var,
    pub gamma: Var,
    pub alpha: Var,
    pub image_weights: Var,
    pub object_weights: Var,
    pub similarity: Option<Var>,
}

/// Plain values of a step, for traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub viewpoint: usize,
    pub p: Vec<f64>,
    pub gamma: [f64; 2],
    pub alpha: Vec<f64>,
    pub image_weights: Vec<f64>,
    pub progress: f64,
    pub action: usize,
}

impl StepOutput {
    pub fn trace(&self, tape: &Tape, viewpoint: usize, action: usize) -> StepTrace {
        let g = tape.value(self.gamma);
        StepTrace {
            viewpoint,
            p: tape.value(self.p).to_vec(),
            gamma: [g[0], g[1]],
            alpha: tape.value(self.alpha).to_vec(),
            image_weights: tape.value(self.image_weights).to_vec(),
            progress: tape.scalar(self.progress),
            action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Greedy,
    Sample,
    Teacher(usize),
}

/// Picks an index of `p`: argmax (lowest index on ties), a categorical
/// draw, or the given teacher action.
pub fn select_action<R: Rng>(p: &[f64], mode: ActionMode, rng: &mut R) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::Invalid("empty action distribution".into()));
    }
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &x) in p.iter().enumerate() {
                if x > p[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        ActionMode::Sample => {
            let u: f64 = rng.gen();
            let total: f64 = p.iter().sum();
            let mut acc = 0.0;
            for (i, &x) in p.iter().enumerate() {
                acc += x / total;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1))
        }
        ActionMode::Teacher(a) if a < p.len() => Ok(a),
        ActionMode::Teacher(a) => Err(Error::Invalid(format!("teacher action {a} outside {} choices", p.len()))),
    }
}

fn content_words(span: Span, pos: &[Pos]) -> Vec<usize> {
    let keep: Vec<usize> = (span.start..span.end)
        .filter(|&i| matches!(pos[i], Pos::Noun | Pos::Propn | Pos::Adj | Pos::Num))
        .collect();
    if keep.is_empty() {
        (span.start..span.end).collect()
    } else {
        keep
    }
}

impl Model {
    /// Runs the bidirectional encoder over the delimiter-augmented stream
    /// and assembles the configuration bank.
    pub fn encode(&self, tape: &mut Tape, parsed: &ParsedInstruction) -> Result<ConfigBank> {
        let c = &self.config;
        let w = &self.weights;
        let m = parsed.num_configurations();
        if m == 0 {
            return Err(Error::Invalid("instruction has no configurations".into()));
        }
        let ids: Vec<usize> = parsed.token_stream.iter().map(|t| self.vocab.id(t)).collect();
        let table = tape.param(w.tok_emb);
        let x = tape.gather_rows(table, &ids)?;
        let n = ids.len();
        let rows: Vec<Var> = (0..n).map(|i| tape.row(x, i)).collect::<std::result::Result<_, _>>()?;

        let mut fwd = Vec::with_capacity(n);
        let mut s = LstmState::zeros(tape, c.hidden);
        for &r in &rows {
            s = w.enc_fwd.forward(tape, r, s)?;
            fwd.push(s.h);
        }
        let mut bwd = vec![fwd[0]; n];
        let mut s = LstmState::zeros(tape, c.hidden);
        for i in (0..n).rev() {
            s = w.enc_bwd.forward(tape, rows[i], s)?;
            bwd[i] = s.h;
        }
        let ctx: Vec<Var> = (0..n).map(|i| tape.add(fwd[i], bwd[i])).collect::<std::result::Result<_, _>>()?;
        let ctx = tape.stack(&ctx)?;

        let role = tape.param(w.role_emb);
        let words = parsed.words();
        let pos = parsed.pos_tags();
        let word_ids: Vec<usize> = words.iter().map(|t| self.vocab.id(t)).collect();
        let mean_of = |tape: &mut Tape, idx: &[usize]| -> Result<Var> {
            let ids: Vec<usize> = idx.iter().map(|&i| word_ids[i]).collect();
            let e = tape.gather_rows(role, &ids)?;
            Ok(tape.mean_rows(e)?)
        };

        let w_cfg = tape.param(w.w_cfg);
        let mut bank_rows = Vec::with_capacity(m);
        let mut token_counts = Vec::with_capacity(m);
        let mut lm_rows = Vec::new();
        let mut landmark_groups = Vec::with_capacity(m);
        let mut landmark_free = Vec::with_capacity(m);
        for i in 0..m {
            let cfg = &parsed.configurations[i];
            let sp = parsed.stream_span(i);
            token_counts.push(sp.len());
            let idx: Vec<usize> = (sp.start..sp.end).collect();
            let ci = tape.gather_rows(ctx, &idx)?;
            let (cbar, _) = config_repr(tape, ci, w_cfg)?;
            let mut parts = vec![cbar];
            if c.use_motion {
                parts.push(match cfg.motion_indicator {
                    Some(mi) => mean_of(tape, &(mi.start..mi.end).collect::<Vec<_>>())?,
                    None => tape.zeros(c.role_dim),
                });
            }
            let mut group = Vec::with_capacity(cfg.landmarks.len());
            let mut main = None;
            for (k, &lm) in cfg.landmarks.iter().enumerate() {
                let e = mean_of(tape, &content_words(lm, &pos))?;
                if Some(k) == cfg.main_landmark {
                    main = Some(e);
                }
                group.push(lm_rows.len());
                lm_rows.push(e);
            }
            landmark_free.push(main.is_none());
            if c.use_landmark {
                parts.push(match main {
                    Some(e) => e,
                    None => tape.zeros(c.role_dim),
                });
            }
            landmark_groups.push(group);
            bank_rows.push(tape.concat(&parts)?);
        }
        let bank = tape.stack(&bank_rows)?;
        let landmarks = if lm_rows.is_empty() { None } else { Some(tape.stack(&lm_rows)?) };
        Ok(ConfigBank {
            m,
            bank,
            token_counts,
            landmarks,
            landmark_groups,
            landmark_free,
        })
    }

    /// Zero decoder memory with attention on the first configuration.
    pub fn init_state(&self, tape: &mut Tape, bank: &ConfigBank) -> AgentState {
        let mut a = vec![0.0; bank.m];
        a[0] = 1.0;
        AgentState {
            lstm: LstmState::zeros(tape, self.config.hidden),
            alpha: tape.constant(Tensor::vector(a)),
            t: 0,
        }
    }

    /// One decoder step at an observation; returns the next state and the
    /// action distribution over navigable viewpoints plus stop.
    pub fn step(&self, tape: &mut Tape, bank: &ConfigBank, state: &AgentState, obs: &PanoramaObservation) -> Result<(AgentState, StepOutput)> {
        self.step_with(tape, bank, state, obs, None)
    }

    /// As [`Model::step`], optionally overriding the controller output.
    pub fn step_with(
        &self,
        tape: &mut Tape,
        bank: &ConfigBank,
        state: &AgentState,
        obs: &PanoramaObservation,
        force_gamma: Option<[f64; 2]>,
    ) -> Result<(AgentState, StepOutput)> {
        let c = &self.config;
        let w = &self.weights;
        let n = obs.num_images();
        if n == 0 || obs.kappa.is_empty() {
            return Err(Error::Invalid(format!("empty observation at viewpoint {}", obs.viewpoint)));
        }
        if n > c.n_max {
            return Err(Error::Invalid(format!("{n} images exceed n_max = {}", c.n_max)));
        }
        if obs.feature_dim() != c.feature_dim {
            return Err(Error::Invalid(format!(
                "image features have width {}, model expects {}",
                obs.feature_dim(),
                c.feature_dim
            )));
        }
        let h_prev = state.lstm.h;

        // (1) projected images
        let raw = tape.constant(Tensor::matrix(n, c.feature_dim, obs.images.concat())?);
        let fc_img = tape.param(w.fc_img);
        let imgs = tape.matmul_nt(raw, fc_img)?;

        // (2) image attention
        let w_img = tape.param(w.w_img);
        let (img_bar, image_weights) = image_attn(tape, h_prev, imgs, w_img, None)?;

        // objects: one shared embedding lookup
        let role = tape.param(w.role_emb);
        let mut flat = Vec::new();
        let mut groups = Vec::with_capacity(n);
        for objs in &obs.objects {
            let g: Vec<usize> = objs.iter().take(c.k_objects).map(|o| {
                flat.push(self.vocab.id(&o.label));
                flat.len() - 1
            }).collect();
            groups.push(g);
        }
        let obj_rows = if flat.is_empty() { None } else { Some(tape.gather_rows(role, &flat)?) };

        // (3) similarity score, (4) controller, (5) state attention
        let similarity = if c.use_similarity {
            let input = SimilarityInput {
                landmarks: bank.landmarks,
                landmark_groups: &bank.landmark_groups,
                objects: obj_rows,
                object_groups: &groups,
            };
            Some(similarity_score(tape, &input, state.alpha, c.n_max)?)
        } else {
            None
        };
        let gamma = match force_gamma {
            Some(g) => tape.constant(Tensor::vector(g.to_vec())),
            None => predict_controller(tape, &w.fc_gamma, h_prev, img_bar, similarity)?,
        };
        let alpha = state_attn_update(tape, state.alpha, gamma)?;

        // (6) grounded instruction, (7) object alignment
        let c_hat = grounded_instruction(tape, alpha, bank.bank)?;
        let per_image: Vec<Option<Var>> = groups
            .iter()
            .map(|g| match (obj_rows, g.is_empty()) {
                (Some(rows), false) => tape.gather_rows(rows, g).map(Some),
                _ => Ok(None),
            })
            .collect::<std::result::Result<_, _>>()?;
        let align = ObjectAlign {
            w_obj: tape.param(w.w_obj),
            w_objimg: tape.param(w.w_objimg),
        };
        let (i_hat, object_weights) = object_align(tape, &align, c_hat, &per_image, h_prev, imgs, None)?;

        // (8) decoder
        let x = tape.concat(&[c_hat, i_hat])?;
        let lstm = w.decoder.forward(tape, x, state.lstm)?;

        // (9) viewpoint scores grouped over elevations, (10) with stop
        let ch = tape.concat(&[c_hat, lstm.h])?;
        let u = w.fc_pred.forward(tape, ch)?;
        let z = tape.matmul(imgs, u)?;
        let nav = obs.kappa.len();
        let mut g = vec![0.0; nav * n];
        for (k, imgs_k) in obs.kappa.iter().enumerate() {
            for &j in imgs_k {
                g[k * n + j] = 1.0;
            }
        }
        let g = tape.constant(Tensor::matrix(nav, n, g)?);
        let zeta = tape.matmul(g, z)?;
        let stop = w.fc_stop.forward(tape, ch)?;
        let logits = tape.concat(&[zeta, stop])?;
        let p = tape.softmax(logits)?;
        let prog = w.fc_prog.forward(tape, lstm.h)?;
        let progress = tape.sigmoid(prog);

        let next = AgentState {
            lstm,
            alpha,
            t: state.t + 1,
        };
        Ok((
            next,
            StepOutput {
                logits,
                p,
                progress,
                gamma,
                alpha,
                image_weights,
                object_weights,
                similarity,
            },
        ))
    }
}

impl Model {
    /// Writes parameters (with optimizer moments) and a header holding the
    /// config, vocabulary and any `extra` fields.
    pub fn save(&self, path: &std::path::Path, extra: serde_json::Value) -> Result<()> {
        let mut header = serde_json::json!({
            "kind": "spcnav-model",
            "config": self.config,
            "vocab": self.vocab.words,
        });
        if let (Some(h), serde_json::Value::Object(e)) = (header.as_object_mut(), extra) {
            h.extend(e);
        }
        save_checkpoint(path, &header, &self.params, true)
    }

    /// Restores a model written by [`Model::save`]; returns it with the header.
    pub fn load(path: &std::path::Path) -> Result<(Model, serde_json::Value)> {
        let ck = load_checkpoint(path)?;
        let field = |k: &str| ck.header.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("header lacks {k:?}")));
        let config: ModelConfig = serde_json::from_value(field("config")?)?;
        let words: Vec<String> = serde_json::from_value(field("vocab")?)?;
        let mut model = Model::new(config, Vocab::from_words(words), 0)?;
        model.load_params(ck.params)?;
        Ok((model, ck.header))
    }
}

/// Vocabulary covering a set of parsed instructions.
pub fn vocab_for<'a>(parsed: impl IntoIterator<Item = &'a ParsedInstruction>) -> Vocab {
    let words: Vec<String> = parsed.into_iter().flat_map(|p| p.words()).collect();
    Vocab::build(words.iter().map(String::as_str))
}

/// Fixed-seed uniform draws used to pin down sampling behavior.
pub fn sample_sequence(seed: u64, p: &[f64], n: usize) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| select_action(p, ActionMode::Sample, &mut rng)).collect()
}
