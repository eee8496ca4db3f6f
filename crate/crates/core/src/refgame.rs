//! Referential game: batched play, REINFORCE and cross-entropy updates,
//! greedy evaluation, the training loop with checkpoints, and contrastive
//! encoder pretraining.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use relcomm_nn::{Adam, Checkpoint, EncoderSpec, Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::agents::{images_to_tensor, AgentConfig, CandidateLayout, Decode, Listener, Message, Speaker};
use crate::csvlog::{self, CsvLog};
use crate::rng::{indexed_stream, stream, SimRng};
use crate::scene::{
    sample_episode, split_combinations, Combination, DatasetRegime, FixedRegime, GeneratorConfig, SceneImage,
    SceneRegime, SplitSpec,
};
use crate::Error;

pub mod simclr;

pub use simclr::{nt_xent, simclr_pretrain, SimclrConfig, SimclrOutcome};

/// How training candidates are assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Each item draws its own episode with `train_candidates` candidates.
    Independent,
    /// The batch draws `batch_size` distinct combinations; every item is
    /// scored against all Listener-side target images of the batch.
    InBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub regime: DatasetRegime,
    pub batch_size: usize,
    pub train_candidates: usize,
    pub test_candidates: usize,
    pub lr: f64,
    /// Speaker learning rate when it should differ from `lr`.
    pub speaker_lr: Option<f64>,
    pub entropy_coef: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub candidate_mode: CandidateMode,
    pub use_baseline: bool,
    pub baseline_decay: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub agents: AgentConfig,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            regime: DatasetRegime::Random,
            batch_size: 32,
            train_candidates: 32,
            test_candidates: 20,
            lr: 3e-5,
            speaker_lr: None,
            entropy_coef: 0.01,
            total_steps: 10_000,
            seed: 0,
            candidate_mode: CandidateMode::Independent,
            use_baseline: true,
            baseline_decay: 0.99,
            eval_every: 500,
            eval_episodes: 500,
            checkpoint_every: 1000,
            generator: GeneratorConfig::default(),
            agents: AgentConfig::default(),
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("train_candidates", self.train_candidates as f64),
            ("test_candidates", self.test_candidates as f64),
            ("lr", self.lr),
            ("speaker_lr", self.speaker_lr.unwrap_or(self.lr)),
            ("eval_every", self.eval_every as f64),
            ("eval_episodes", self.eval_episodes as f64),
            ("checkpoint_every", self.checkpoint_every as f64),
            ("agents.message_len", self.agents.message_len as f64),
            ("agents.vocab_size", self.agents.vocab_size as f64),
            ("agents.listener_inv_temp", self.agents.listener_inv_temp),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config { path: name.into(), message: format!("must be positive, got {v}") });
            }
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::Config { path: "entropy_coef".into(), message: "must be non-negative".into() });
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config { path: "baseline_decay".into(), message: "must lie in [0, 1)".into() });
        }
        if self.train_candidates < 2 || self.test_candidates < 2 {
            return Err(Error::Config { path: "train_candidates".into(), message: "need at least 2 candidates".into() });
        }
        if self.candidate_mode == CandidateMode::InBatch && self.batch_size != self.train_candidates {
            return Err(Error::Config {
                path: "candidate_mode".into(),
                message: "in_batch needs batch_size == train_candidates".into(),
            });
        }
        if self.agents.vocab_size > 255 {
            return Err(Error::Config { path: "agents.vocab_size".into(), message: "at most 255".into() });
        }
        self.generator.validate().map_err(|e| e.at("generator"))
    }
}

/// Agents plus their optimizer and baseline state.
#[derive(Clone)]
pub struct GameState {
    pub speaker: Speaker<f32>,
    pub listener: Listener<f32>,
    pub baseline: f64,
    pub step: u64,
}

impl GameState {
    pub fn new(cfg: &GameConfig) -> Self {
        let encoder = EncoderSpec::reduced_alexnet();
        let speaker = Speaker::new(&cfg.agents, encoder.clone(), &mut stream(cfg.seed, "init/speaker"));
        let listener = Listener::new(&cfg.agents, encoder, &mut stream(cfg.seed, "init/listener"));
        Self { speaker, listener, baseline: 0.0, step: 0 }
    }

    /// Loads encoder weights into both agents and freezes them.
    pub fn freeze_encoders_from(&mut self, encoder: &ParamStore<f32>) -> Result<(), Error> {
        for store in [&mut self.speaker.store, &mut self.listener.store] {
            for p in store.iter_mut().filter(|p| p.name.starts_with("encoder.")) {
                let id = encoder
                    .find(&p.name)
                    .ok_or_else(|| Error::CheckpointMismatch { expected: p.name.clone(), found: "nothing".into() })?;
                let src = &encoder.get(id).value;
                if src.shape() != p.value.shape() {
                    return Err(Error::CheckpointMismatch {
                        expected: format!("{} {:?}", p.name, p.value.shape()),
                        found: format!("{:?}", src.shape()),
                    });
                }
                p.value = src.clone();
                p.trainable = false;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, cfg: &GameConfig) -> Checkpoint {
        let arch = serde_json::json!({
            "speaker": self.speaker.net.architecture(),
            "listener": self.listener.net.architecture(),
        });
        let mut ck = Checkpoint::new(arch, self.step, serde_json::json!({ "seed": cfg.seed }))
            .with_extra(serde_json::json!({ "baseline": self.baseline, "config": cfg }));
        ck.add_model("speaker", &self.speaker.store);
        ck.add_model("listener", &self.listener.store);
        ck
    }

    /// Restores agents, baseline and step from `ck`. The agent shapes come
    /// from `cfg`.
    pub fn from_checkpoint(cfg: &GameConfig, ck: &Checkpoint) -> Result<Self, Error> {
        let mut state = Self::new(cfg);
        ck.restore_into("speaker", &mut state.speaker.store)?;
        ck.restore_into("listener", &mut state.listener.store)?;
        state.baseline = ck.manifest.extra.get("baseline").and_then(|b| b.as_f64()).unwrap_or(0.0);
        state.step = ck.manifest.step;
        Ok(state)
    }
}

/// Images and targets for one batch of games.
#[derive(Clone, Debug)]
pub struct GameBatch {
    pub speaker_images: Vec<Arc<SceneImage>>,
    pub candidate_images: Vec<Arc<SceneImage>>,
    pub layout: CandidateLayout,
    pub targets: Vec<usize>,
    pub target_combinations: Vec<Combination>,
}

impl GameBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn candidates_per_item(&self) -> usize {
        match self.layout {
            CandidateLayout::Shared => self.candidate_images.len(),
            CandidateLayout::Blocks(k) => k,
        }
    }

    /// `count` independent episodes of `candidates` each.
    pub fn independent(
        regime: &dyn SceneRegime,
        pool: &[Combination],
        count: usize,
        candidates: usize,
        rng: &mut SimRng,
    ) -> Result<Self, Error> {
        let mut batch = Self {
            speaker_images: Vec::with_capacity(count),
            candidate_images: Vec::with_capacity(count * candidates),
            layout: CandidateLayout::Blocks(candidates),
            targets: Vec::with_capacity(count),
            target_combinations: Vec::with_capacity(count),
        };
        for _ in 0..count {
            let ep = sample_episode(regime, pool, candidates, rng)?;
            batch.speaker_images.push(ep.speaker_target);
            batch.candidate_images.extend(ep.candidates);
            batch.targets.push(ep.target_index);
            batch.target_combinations.push(ep.target_combination);
        }
        Ok(batch)
    }

    /// `count` distinct target combinations whose Listener-side images
    /// serve as the shared candidate set.
    pub fn in_batch(
        regime: &dyn SceneRegime,
        pool: &[Combination],
        count: usize,
        rng: &mut SimRng,
    ) -> Result<Self, Error> {
        if pool.len() < count {
            return Err(Error::PoolTooSmall { pool: pool.len(), needed: count });
        }
        let combos: Vec<Combination> = index::sample(rng, pool.len(), count).iter().map(|i| pool[i]).collect();
        let mut batch = Self {
            speaker_images: Vec::with_capacity(count),
            candidate_images: Vec::with_capacity(count),
            layout: CandidateLayout::Shared,
            targets: (0..count).collect(),
            target_combinations: combos.clone(),
        };
        for c in combos {
            let (s, l) = regime.target_views(c, rng)?;
            batch.speaker_images.push(s);
            batch.candidate_images.push(l);
        }
        Ok(batch)
    }
}

/// Outcome of one item of a played batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub target_combination: Combination,
    pub target_index: usize,
    pub message: Message,
    pub log_prob: f64,
    pub entropy: f64,
    pub listener_probs: Vec<f64>,
    pub reward: f64,
}

/// A played batch together with the tapes needed for the updates.
pub struct EpisodeBatch {
    pub records: Vec<EpisodeRecord>,
    speaker_graph: Graph<f32>,
    log_prob: NodeId,
    entropy: NodeId,
    listener_graph: Graph<f32>,
    logits: NodeId,
}

impl EpisodeBatch {
    pub fn mean_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len() as f64
    }

    /// Mean entropy per emitted symbol.
    pub fn mean_symbol_entropy(&self, message_len: usize) -> f64 {
        self.records.iter().map(|r| r.entropy).sum::<f64>() / (self.records.len() * message_len) as f64
    }
}

fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&x| x as f64).collect()).collect()
}

/// Speaker emits (sampled, or greedy when `rng` is `None`); Listener scores
/// the candidates; reward is 1 when its argmax is the target.
pub fn play_batch(state: &GameState, batch: &GameBatch, rng: Option<&mut SimRng>) -> EpisodeBatch {
    let mut sg = Graph::new();
    let speaker_refs: Vec<&SceneImage> = batch.speaker_images.iter().map(|a| a.as_ref()).collect();
    let x = sg.constant(images_to_tensor(&speaker_refs));
    let decode = match rng {
        Some(r) => Decode::Sample(r),
        None => Decode::Greedy,
    };
    let out = state.speaker.forward(&mut sg, x, decode);

    let (net, store) = (&state.listener.net, &state.listener.store);
    let mut lg = Graph::new();
    let hidden = net.encode_messages(&mut lg, store, &out.messages);
    let u = net.project_messages(&mut lg, store, hidden);
    let cand_refs: Vec<&SceneImage> = batch.candidate_images.iter().map(|a| a.as_ref()).collect();
    let cx = lg.constant(images_to_tensor(&cand_refs));
    let v = net.embed_images(&mut lg, store, cx);
    let logits = net.logits(&mut lg, u, v, batch.layout);

    let logit_rows = rows_f64(lg.value(logits));
    let log_probs = sg.value(out.log_prob).data().to_vec();
    let entropies = sg.value(out.entropy).data().to_vec();
    let records = out
        .messages
        .into_iter()
        .enumerate()
        .map(|(i, message)| {
            let probs = crate::agents::order_free_softmax(&logit_rows[i]);
            let chosen = crate::agents::listener_choose(&probs);
            EpisodeRecord {
                target_combination: batch.target_combinations[i],
                target_index: batch.targets[i],
                message,
                log_prob: log_probs[i] as f64,
                entropy: entropies[i] as f64,
                reward: if chosen == batch.targets[i] { 1.0 } else { 0.0 },
                listener_probs: probs,
            }
        })
        .collect();
    EpisodeBatch { records, speaker_graph: sg, log_prob: out.log_prob, entropy: out.entropy, listener_graph: lg, logits }
}

/// Builds the REINFORCE loss on the played batch's Speaker tape and
/// accumulates its gradient into `speaker`. Returns the loss value.
pub fn reinforce_gradient(
    batch: &mut EpisodeBatch,
    speaker: &mut ParamStore<f32>,
    baseline: f64,
    entropy_coef: f64,
) -> f64 {
    let n = batch.records.len();
    let adv: Vec<f32> = batch.records.iter().map(|r| ((r.reward - baseline) / n as f64) as f32).collect();
    let g = &mut batch.speaker_graph;
    let weighted = g.mul_const(batch.log_prob, Tensor::from_vec(&[n], adv));
    let pg = g.sum(weighted);
    let ent = g.mean(batch.entropy);
    let ent = g.scale(ent, entropy_coef as f32);
    let objective = g.add(pg, ent);
    let loss = g.scale(objective, -1.0);
    g.backward_into(loss, speaker);
    g.value(loss).item() as f64
}

/// Speaker update: `-mean((r - b) * log p(m)) - coef * mean(H)`, then Adam.
pub fn reinforce_update(batch: &mut EpisodeBatch, state: &mut GameState, cfg: &GameConfig) -> f64 {
    let b = if cfg.use_baseline { state.baseline } else { 0.0 };
    let loss = reinforce_gradient(batch, &mut state.speaker.store, b, cfg.entropy_coef);
    Adam::new(cfg.speaker_lr.unwrap_or(cfg.lr)).step(&mut state.speaker.store);
    loss
}

/// Listener update: mean cross-entropy against the target index, then Adam.
pub fn listener_ce_update(batch: &mut EpisodeBatch, state: &mut GameState, cfg: &GameConfig) -> f64 {
    let targets: Vec<usize> = batch.records.iter().map(|r| r.target_index).collect();
    let g = &mut batch.listener_graph;
    let loss = g.cross_entropy_mean(batch.logits, &targets);
    g.backward_into(loss, &mut state.listener.store);
    Adam::new(cfg.lr).step(&mut state.listener.store);
    g.value(loss).item() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub train_acc: f64,
    pub speaker_loss: f64,
    pub listener_loss: f64,
    pub entropy: f64,
}

/// One optimization step on both agents from a single played batch.
pub fn train_step(
    state: &mut GameState,
    cfg: &GameConfig,
    regime: &dyn SceneRegime,
    pool: &[Combination],
) -> Result<StepStats, Error> {
    let mut rng = indexed_stream(cfg.seed, "train", state.step);
    let batch = match cfg.candidate_mode {
        CandidateMode::Independent => {
            GameBatch::independent(regime, pool, cfg.batch_size, cfg.train_candidates, &mut rng)?
        }
        CandidateMode::InBatch => GameBatch::in_batch(regime, pool, cfg.batch_size, &mut rng)?,
    };
    let mut played = play_batch(state, &batch, Some(&mut rng));
    let train_acc = played.mean_reward();
    let entropy = played.mean_symbol_entropy(cfg.agents.message_len);
    let speaker_loss = reinforce_update(&mut played, state, cfg);
    let listener_loss = listener_ce_update(&mut played, state, cfg);
    state.baseline = cfg.baseline_decay * state.baseline + (1.0 - cfg.baseline_decay) * train_acc;
    state.step += 1;
    Ok(StepStats { train_acc, speaker_loss, listener_loss, entropy })
}

/// Greedy accuracy over `episodes` fresh episodes with `candidates` each.
pub fn evaluate(
    state: &GameState,
    regime: &dyn SceneRegime,
    pool: &[Combination],
    candidates: usize,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<f64, Error> {
    const CHUNK: usize = 25;
    let mut correct = 0.0;
    let mut done = 0;
    while done < episodes {
        let n = CHUNK.min(episodes - done);
        let batch = GameBatch::independent(regime, pool, n, candidates, rng)?;
        correct += play_batch(state, &batch, None).records.iter().map(|r| r.reward).sum::<f64>();
        done += n;
    }
    Ok(correct / episodes as f64)
}

pub const METRICS_SCHEMA: &str = "relcomm refgame metrics";
pub const METRICS_VERSION: u32 = 1;
pub const METRICS_HEADER: [&str; 7] =
    ["step", "train_acc", "test_acc_fixed_pool", "test_acc_random_pool", "speaker_loss", "listener_loss", "entropy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_acc: f64,
    pub test_acc_fixed_pool: Option<f64>,
    pub test_acc_random_pool: Option<f64>,
    pub speaker_loss: f64,
    pub listener_loss: f64,
    pub entropy: f64,
}

/// Test-pool accuracies: Fixed-regime and Random-regime episodes over the
/// held-out combinations.
pub fn evaluate_test_pools(
    state: &GameState,
    cfg: &GameConfig,
    fixed: &FixedRegime,
    random: &dyn SceneRegime,
    split: &SplitSpec,
) -> Result<(f64, f64), Error> {
    let mut rng = indexed_stream(cfg.seed, "eval", state.step);
    let f = evaluate(state, fixed, &split.test, cfg.test_candidates, cfg.eval_episodes, &mut rng)?;
    let r = evaluate(state, random, &split.test, cfg.test_candidates, cfg.eval_episodes, &mut rng)?;
    Ok((f, r))
}

pub struct TrainOutcome {
    pub state: GameState,
    pub split: SplitSpec,
    pub metrics: Vec<MetricsRow>,
}

/// Run directory layout for one training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.rlck")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.rlck")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
}

/// Trains from scratch, or resumes from the run directory's latest
/// checkpoint when one exists. With `out = None` nothing is written.
pub fn train(cfg: &GameConfig, out: Option<&RunPaths>, frozen_encoder: Option<&ParamStore<f32>>) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    let split = split_combinations(cfg.seed);
    let regime = cfg.regime.build(cfg.generator, cfg.seed)?;
    let fixed = FixedRegime::new(cfg.generator, cfg.seed);
    let random = DatasetRegime::Random.build(cfg.generator, cfg.seed)?;

    let mut state = GameState::new(cfg);
    if let Some(enc) = frozen_encoder {
        state.freeze_encoders_from(enc)?;
    }
    let mut metrics = Vec::new();
    let mut log = None;
    if let Some(paths) = out {
        fs::create_dir_all(&paths.dir)?;
        fs::write(paths.config(), serde_json::to_string_pretty(cfg)?)?;
        let ck_path = paths.latest_checkpoint();
        if ck_path.exists() && paths.metrics().exists() {
            let ck = Checkpoint::load(&ck_path)?;
            state = GameState::from_checkpoint(cfg, &ck)?;
            let resume_step = state.step;
            csvlog::retain_rows::<MetricsRow, _>(
                &paths.metrics(),
                METRICS_SCHEMA,
                METRICS_VERSION,
                &METRICS_HEADER,
                |r| r.step < resume_step,
            )?;
            metrics = csvlog::read_rows(&paths.metrics())?;
            log = Some(CsvLog::append(&paths.metrics(), METRICS_SCHEMA, METRICS_VERSION)?);
        } else {
            log = Some(CsvLog::create(&paths.metrics(), METRICS_SCHEMA, METRICS_VERSION, &METRICS_HEADER)?);
        }
    }

    while state.step < cfg.total_steps {
        let step = state.step;
        let stats = train_step(&mut state, cfg, regime.as_ref(), &split.train)?;
        let is_last = state.step == cfg.total_steps;
        let (tf, tr) = if state.step % cfg.eval_every == 0 || is_last {
            let (f, r) = evaluate_test_pools(&state, cfg, &fixed, random.as_ref(), &split)?;
            (Some(f), Some(r))
        } else {
            (None, None)
        };
        let row = MetricsRow {
            step,
            train_acc: stats.train_acc,
            test_acc_fixed_pool: tf,
            test_acc_random_pool: tr,
            speaker_loss: stats.speaker_loss,
            listener_loss: stats.listener_loss,
            entropy: stats.entropy,
        };
        if let Some(log) = log.as_mut() {
            log.row(&row)?;
        }
        metrics.push(row);
        if let Some(paths) = out {
            if state.step % cfg.checkpoint_every == 0 || is_last {
                state.checkpoint(cfg).save(&paths.latest_checkpoint())?;
            }
            if is_last {
                state.checkpoint(cfg).save(&paths.final_checkpoint())?;
            }
        }
    }
    Ok(TrainOutcome { state, split, metrics })
}

/// Loads a game checkpoint written by [`train`], using the config stored in it.
pub fn load_game_checkpoint(path: &Path) -> Result<(GameConfig, GameState), Error> {
    let ck = Checkpoint::load(path)?;
    let cfg: GameConfig = serde_json::from_value(ck.manifest.extra.get("config").cloned().unwrap_or_default())?;
    let state = GameState::from_checkpoint(&cfg, &ck)?;
    Ok((cfg, state))
}
