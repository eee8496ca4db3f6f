//! Transfer of a learned protocol to Object Placement: a PPO Listener reads
//! the frozen Speaker's message (or a baseline substitute) and moves objects
//! on the grid until the goal relation holds.

pub mod policy;
pub mod ppo;
pub mod sources;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use relcomm_nn::{Adam, Graph};
use serde::{Deserialize, Serialize};

pub use policy::{Observation, Payload, PayloadSpec, PolicyNet};
pub use ppo::{
    collect_rollout, gae, ppo_loss, ppo_update, EnvPool, EpisodeStats, PolicyAgent, PpoBatch, PpoConfig, Rollout,
    Task, UpdateStats,
};
pub use sources::{
    pretrain_cnn_classifier, source_registry, state_payload, CnnClassifier, CnnPretrainConfig, MessageSource,
    SourceContext,
};

use crate::agents::{images_to_tensor, AgentConfig, Decode, Message, Speaker};
use crate::csvlog::CsvLog;
use crate::gridworld::{GridConfig, Goal};
use crate::refgame::{load_game_checkpoint, SimclrConfig};
use crate::rng::{stream, SimRng};
use crate::scene::{split_combinations, GeneratorConfig, SceneImage};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    EmergentLanguage,
    RawPixel,
    CnnFeature,
    SimclrFeature,
    RlScratch,
    RlScratchUpdate,
    State,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::EmergentLanguage,
        BaselineKind::RawPixel,
        BaselineKind::CnnFeature,
        BaselineKind::SimclrFeature,
        BaselineKind::RlScratch,
        BaselineKind::RlScratchUpdate,
        BaselineKind::State,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::EmergentLanguage => "emergent-language",
            BaselineKind::RawPixel => "raw-pixel",
            BaselineKind::CnnFeature => "cnn-feature",
            BaselineKind::SimclrFeature => "simclr-feature",
            BaselineKind::RlScratch => "rl-scratch",
            BaselineKind::RlScratchUpdate => "rl-scratch-update",
            BaselineKind::State => "state",
        }
    }

    /// Conditions whose Speaker keeps learning during transfer.
    pub fn trains_speaker(self) -> bool {
        matches!(self, BaselineKind::RlScratch | BaselineKind::RlScratchUpdate)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownName {
            kind: "baseline",
            name: s.into(),
            available: Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", "),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub kind: BaselineKind,
    pub task: Task,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub grid: GridConfig,
    pub generator: GeneratorConfig,
    /// Used by the scratch Speaker.
    pub agents: AgentConfig,
    pub speaker_checkpoint: Option<PathBuf>,
    /// Seed of the train/test split the goals come from. Defaults to the
    /// checkpoint's game seed, else `seed`.
    pub split_seed: Option<u64>,
    /// Environment steps per phase when Speaker and Listener alternate.
    pub phase_steps: u64,
    pub speaker_lr: f64,
    pub speaker_entropy_coef: f64,
    /// Finished episodes per Speaker update.
    pub speaker_batch: usize,
    pub speaker_baseline_decay: f64,
    pub cnn: CnnPretrainConfig,
    pub simclr: SimclrConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::State,
            task: Task::Single,
            seed: 0,
            ppo: PpoConfig::default(),
            grid: GridConfig::default(),
            generator: GeneratorConfig::with_size(64),
            agents: AgentConfig::default(),
            speaker_checkpoint: None,
            split_seed: None,
            phase_steps: 1000,
            speaker_lr: 3e-5,
            speaker_entropy_coef: 0.01,
            speaker_batch: 32,
            speaker_baseline_decay: 0.99,
            cnn: CnnPretrainConfig::default(),
            simclr: SimclrConfig::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.ppo.validate().map_err(|e| e.at("ppo"))?;
        self.generator.validate().map_err(|e| e.at("generator"))?;
        if self.kind.trains_speaker() {
            if self.phase_steps == 0 || self.phase_steps % self.ppo.num_envs as u64 != 0 {
                return Err(Error::Config {
                    path: "phase_steps".into(),
                    message: "must be a positive multiple of ppo.num_envs".into(),
                });
            }
            if self.speaker_batch == 0 || !(self.speaker_lr > 0.0) {
                return Err(Error::Config {
                    path: "speaker_lr".into(),
                    message: "speaker_lr and speaker_batch must be positive".into(),
                });
            }
        }
        if self.grid.max_steps == 0 {
            return Err(Error::Config { path: "grid.max_steps".into(), message: "must be positive".into() });
        }
        Ok(())
    }
}

pub const TRANSFER_SCHEMA: &str = "relcomm transfer metrics";
pub const TRANSFER_VERSION: u32 = 1;
pub const TRANSFER_HEADER: [&str; 6] = ["env_step", "mean_ep_reward", "mean_ep_len", "policy_loss", "value_loss", "phase"];

/// One update window. `env_step` counts environment steps after the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub env_step: u64,
    pub mean_ep_reward: Option<f64>,
    pub mean_ep_len: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    /// `listener`, or `speaker` during the Speaker's turn when alternating.
    pub phase: String,
}

fn episode_means(eps: &[EpisodeStats]) -> (Option<f64>, Option<f64>) {
    if eps.is_empty() {
        return (None, None);
    }
    let n = eps.len() as f64;
    (Some(eps.iter().map(|e| e.ret).sum::<f64>() / n), Some(eps.iter().map(|e| e.len as f64).sum::<f64>() / n))
}

/// First `env_step` whose window mean reward reaches `threshold`.
pub fn steps_to_threshold(rows: &[TransferRow], threshold: f64) -> Option<u64> {
    rows.iter().filter(|r| r.phase == "listener").find(|r| r.mean_ep_reward.is_some_and(|m| m >= threshold)).map(|r| r.env_step)
}

fn listener_row(env_step: u64, ro: &Rollout, stats: &[UpdateStats]) -> TransferRow {
    let (r, l) = episode_means(&ro.episodes);
    let k = stats.len() as f64;
    TransferRow {
        env_step,
        mean_ep_reward: r,
        mean_ep_len: l,
        policy_loss: Some(stats.iter().map(|s| s.policy_loss).sum::<f64>() / k),
        value_loss: Some(stats.iter().map(|s| s.value_loss).sum::<f64>() / k),
        phase: "listener".into(),
    }
}

/// Receives each timeline row as it is produced.
pub type RowSink<'a> = dyn FnMut(&TransferRow) -> Result<(), Error> + 'a;

/// PPO on the Listener(s) with a frozen message source.
pub fn ppo_train(
    agents: &mut [PolicyAgent],
    pool: &mut EnvPool,
    source: &dyn MessageSource,
    cfg: &PpoConfig,
    seed: u64,
    sink: &mut RowSink<'_>,
) -> Result<Vec<TransferRow>, Error> {
    let mut act_rng = stream(seed, "transfer/actions");
    let mut mb_rng = stream(seed, "transfer/minibatch");
    let mut rows = Vec::new();
    let mut env_step = 0u64;
    let steps_per_env = cfg.rollout_horizon / cfg.num_envs;
    while env_step < cfg.total_steps {
        let ro = collect_rollout(agents, pool, steps_per_env, &mut act_rng, &mut |g: &Goal| source.payload(g))?;
        env_step += ro.len() as u64;
        let stats: Vec<UpdateStats> =
            agents.iter_mut().enumerate().map(|(k, a)| ppo_update(a, k, &ro, cfg, &mut mb_rng)).collect();
        let row = listener_row(env_step, &ro, &stats);
        sink(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// A finished Speaker-phase episode.
struct SpokenEpisode {
    image: Arc<SceneImage>,
    message: Message,
    ret: f64,
}

/// REINFORCE on the Speaker with an EMA baseline; returns the loss.
fn speaker_update(speaker: &mut Speaker<f32>, adam: &Adam, batch: &[SpokenEpisode], baseline: f64, entropy_coef: f64) -> f64 {
    let n = batch.len();
    let images: Vec<&SceneImage> = batch.iter().map(|e| e.image.as_ref()).collect();
    let messages: Vec<Message> = batch.iter().map(|e| e.message.clone()).collect();
    let mut g = Graph::new();
    let x = g.constant(images_to_tensor(&images));
    let out = speaker.net.forward::<f32, SimRng>(&mut g, &speaker.store, x, Decode::Forced(&messages));
    let weights: Vec<f32> = batch.iter().map(|e| ((e.ret - baseline) / n as f64) as f32).collect();
    let weighted = g.mul_const(out.log_prob, relcomm_nn::Tensor::from_vec(&[n], weights));
    let pg = g.sum(weighted);
    let pg = g.scale(pg, -1.0);
    let ent = g.mean(out.entropy);
    let ent = g.scale(ent, -(entropy_coef as f32));
    let loss = g.add(pg, ent);
    g.backward_into(loss, &mut speaker.store);
    adam.step(&mut speaker.store);
    g.value(loss).item() as f64
}

fn sample_message(speaker: &Speaker<f32>, goal: &Goal, rng: &mut SimRng) -> Result<Payload, Error> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(images_to_tensor(&[goal.target_image.as_ref()]));
    let out = speaker.forward(&mut g, x, Decode::Sample(rng));
    Ok(Payload::Message(out.messages.into_iter().next().expect("one message")))
}

/// Speaker and Listener take turns of `phase_steps` environment steps,
/// starting with the Listener. Live episodes are restarted at each phase
/// boundary so every Speaker-phase episode carries a sampled message.
pub fn alternating_train(
    agents: &mut [PolicyAgent],
    pool: &mut EnvPool,
    source: &mut dyn MessageSource,
    cfg: &TransferConfig,
    sink: &mut RowSink<'_>,
) -> Result<Vec<TransferRow>, Error> {
    let ppo = &cfg.ppo;
    let mut act_rng = stream(cfg.seed, "transfer/actions");
    let mut mb_rng = stream(cfg.seed, "transfer/minibatch");
    let mut msg_rng = stream(cfg.seed, "transfer/speaker-sampling");
    let speaker_adam = Adam::new(cfg.speaker_lr);
    let mut baseline = 0.0;
    let mut rows = Vec::new();
    let mut env_step = 0u64;
    let mut phase = 0u64;
    let steps_per_env = (cfg.phase_steps / ppo.num_envs as u64) as usize;
    while env_step < ppo.total_steps {
        if phase % 2 == 0 {
            let src: &dyn MessageSource = source;
            pool.restart(&mut |g: &Goal| src.payload(g))?;
            let ro = collect_rollout(agents, pool, steps_per_env, &mut act_rng, &mut |g: &Goal| src.payload(g))?;
            env_step += ro.len() as u64;
            let stats: Vec<UpdateStats> =
                agents.iter_mut().enumerate().map(|(k, a)| ppo_update(a, k, &ro, ppo, &mut mb_rng)).collect();
            let row = listener_row(env_step, &ro, &stats);
            sink(&row)?;
            rows.push(row);
        } else {
            {
                let speaker: &Speaker<f32> =
                    source.trainable_speaker().ok_or_else(|| Error::Invalid("source has no trainable Speaker".into()))?;
                pool.restart(&mut |g: &Goal| sample_message(speaker, g, &mut msg_rng))?;
            }
            let mut pending = Vec::new();
            let mut finished_eps = Vec::new();
            let mut losses = Vec::new();
            for _ in 0..steps_per_env {
                let obs = pool.observations();
                let refs: Vec<&Observation> = obs.iter().collect();
                let joint: Vec<Vec<usize>> = agents.iter().map(|a| a.act(&refs, None).0).collect();
                let finished = {
                    let speaker: &Speaker<f32> = source.trainable_speaker().expect("checked above");
                    pool.step(&joint, &mut |g: &Goal| sample_message(speaker, g, &mut msg_rng))?.1
                };
                for (stats, slot) in finished.into_iter().flatten() {
                    let Payload::Message(message) = slot.payload else { unreachable!("speaker payload") };
                    pending.push(SpokenEpisode { image: slot.goal.target_image, message, ret: stats.ret });
                    finished_eps.push(stats);
                }
                if pending.len() >= cfg.speaker_batch {
                    let batch: Vec<SpokenEpisode> = std::mem::take(&mut pending);
                    let speaker = source.trainable_speaker().expect("checked above");
                    losses.push(speaker_update(speaker, &speaker_adam, &batch, baseline, cfg.speaker_entropy_coef));
                    let mean = batch.iter().map(|e| e.ret).sum::<f64>() / batch.len() as f64;
                    baseline = cfg.speaker_baseline_decay * baseline + (1.0 - cfg.speaker_baseline_decay) * mean;
                }
            }
            env_step += steps_per_env as u64 * pool.slots.len() as u64;
            let (r, l) = episode_means(&finished_eps);
            let row = TransferRow {
                env_step,
                mean_ep_reward: r,
                mean_ep_len: l,
                policy_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                value_loss: None,
                phase: "speaker".into(),
            };
            sink(&row)?;
            rows.push(row);
        }
        phase += 1;
    }
    Ok(rows)
}

pub struct TransferOutcome {
    pub rows: Vec<TransferRow>,
    pub agents: Vec<PolicyAgent>,
    pub source: Box<dyn MessageSource>,
    /// Source fingerprint before training, for frozen-source checks.
    pub source_fingerprint_before: Option<u64>,
}

impl TransferOutcome {
    pub fn source_unchanged(&self) -> Option<bool> {
        Some(self.source_fingerprint_before? == self.source.fingerprint()?)
    }
}

/// Builds the condition's message source and Listener(s), then trains.
/// With `out`, writes `config.json` and `transfer_metrics.csv` there.
pub fn run_transfer(cfg: &TransferConfig, out: Option<&Path>) -> Result<TransferOutcome, Error> {
    cfg.validate()?;
    let mut game_seed = None;
    let speaker = match &cfg.speaker_checkpoint {
        Some(path) => {
            let (game, state) = load_game_checkpoint(path)?;
            if game.generator.image_size != cfg.generator.image_size {
                return Err(Error::Config {
                    path: "generator.image_size".into(),
                    message: format!(
                        "{} does not match the Speaker checkpoint's {}",
                        cfg.generator.image_size, game.generator.image_size
                    ),
                });
            }
            game_seed = Some(game.seed);
            Some(state.speaker)
        }
        None => None,
    };
    let split = split_combinations(cfg.split_seed.or(game_seed).unwrap_or(cfg.seed));
    let ctx = SourceContext { cfg, split: &split, speaker: speaker.as_ref() };
    let factory = *source_registry().get(cfg.kind.name())?;
    let mut source = factory(&ctx)?;
    let fingerprint_before = source.fingerprint();

    let spec = source.spec();
    let mut agents: Vec<PolicyAgent> = cfg
        .task
        .heads()
        .into_iter()
        .enumerate()
        .map(|(k, actions)| {
            let mut init = stream(cfg.seed, &format!("transfer/init/policy{k}"));
            let mut store = relcomm_nn::ParamStore::new();
            let net = PolicyNet::new(&mut store, spec, actions, &mut init);
            PolicyAgent::new(net, store, cfg.ppo.lr)
        })
        .collect();

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
            Some(CsvLog::create(&dir.join("transfer_metrics.csv"), TRANSFER_SCHEMA, TRANSFER_VERSION, &TRANSFER_HEADER)?)
        }
        None => None,
    };
    let mut sink = |row: &TransferRow| -> Result<(), Error> {
        if let Some(log) = log.as_mut() {
            log.row(row)?;
        }
        Ok(())
    };
    let src: &dyn MessageSource = source.as_ref();
    let mut pool = EnvPool::new(
        cfg.ppo.num_envs,
        cfg.task,
        cfg.grid,
        cfg.generator,
        split.train.clone(),
        cfg.seed,
        &mut |g: &Goal| src.payload(g),
    )?;
    let rows = if cfg.kind.trains_speaker() {
        alternating_train(&mut agents, &mut pool, source.as_mut(), cfg, &mut sink)?
    } else {
        ppo_train(&mut agents, &mut pool, source.as_ref(), &cfg.ppo, cfg.seed, &mut sink)?
    };
    Ok(TransferOutcome { rows, agents, source, source_fingerprint_before: fingerprint_before })
}

/// Two Listeners, one per object, trained together on the shared reward.
pub fn run_multi_listener(cfg: &TransferConfig, out: Option<&Path>) -> Result<TransferOutcome, Error> {
    run_transfer(&TransferConfig { task: Task::Multi, ..cfg.clone() }, out)
}
