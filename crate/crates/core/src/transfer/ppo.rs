//! Clipped-surrogate PPO with GAE over a pool of placement environments.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use relcomm_nn::{argmax, Adam, Graph, NodeId, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::policy::{Observation, Payload, PolicyNet};
use crate::gridworld::{
    self, Direction, GridConfig, GridState, Goal, MultiAction, PlacementAction, StepOutcome, NUM_PLACEMENT_ACTIONS,
};
use crate::rng::{indexed_stream, SimRng};
use crate::scene::{render, Combination, GeneratorConfig};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    /// Environment steps per update, summed over all environments.
    pub rollout_horizon: usize,
    pub num_envs: usize,
    pub minibatch: usize,
    pub epochs_per_update: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            rollout_horizon: 2048,
            num_envs: 8,
            minibatch: 64,
            epochs_per_update: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            total_steps: 300_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let err = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if !(self.lr > 0.0) {
            return err("lr", "must be positive");
        }
        if self.num_envs == 0 || self.rollout_horizon < self.num_envs || self.rollout_horizon % self.num_envs != 0 {
            return err("rollout_horizon", "must be a positive multiple of num_envs");
        }
        if self.minibatch == 0 || self.epochs_per_update == 0 {
            return err("minibatch", "minibatch and epochs_per_update must be positive");
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return err(name, "must lie in [0, 1]");
            }
        }
        if !(self.clip > 0.0) || !(self.max_grad_norm > 0.0) {
            return err("clip", "clip and max_grad_norm must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return err("value_coef", "loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// Advantages and returns for one environment's time-ordered transitions.
/// `dones[t]` means the episode ended with transition `t`, so nothing is
/// bootstrapped across it; `last_value` is the value after the final one.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "length mismatch");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Single-Listener (36 actions) or two Listeners with 4 actions each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Single,
    Multi,
}

impl Task {
    /// Action count of each Listener.
    pub fn heads(self) -> Vec<usize> {
        match self {
            Task::Single => vec![NUM_PLACEMENT_ACTIONS],
            Task::Multi => vec![4, 4],
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "single" => Ok(Task::Single),
            "multi" => Ok(Task::Multi),
            _ => Err(Error::UnknownName { kind: "task", name: s.into(), available: "multi, single".into() }),
        }
    }
}

/// A trainable Listener policy with its optimizer.
#[derive(Clone)]
pub struct PolicyAgent {
    pub net: PolicyNet,
    pub store: ParamStore<f32>,
    pub adam: Adam,
}

impl PolicyAgent {
    pub fn new(net: PolicyNet, store: ParamStore<f32>, lr: f64) -> Self {
        let mut adam = Adam::new(lr);
        adam.eps = 1e-5;
        Self { net, store, adam }
    }

    /// Sampled (or greedy with `rng = None`) actions, their log-probabilities
    /// and the state values.
    pub fn act(&self, obs: &[&Observation], rng: Option<&mut SimRng>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let (logits, values) = self.net.forward(&mut g, &self.store, obs);
        let logp = g.log_softmax(logits);
        let lp = g.value(logp);
        let actions: Vec<usize> = match rng {
            Some(rng) => (0..obs.len()).map(|r| sample_row(lp.row(r), rng)).collect(),
            None => (0..obs.len()).map(|r| argmax(lp.row(r))).collect(),
        };
        let logps = actions.iter().enumerate().map(|(r, &a)| lp.row(r)[a] as f64).collect();
        let vals = g.value(values).data().iter().map(|&v| v as f64).collect();
        (actions, logps, vals)
    }
}

fn sample_row(log_probs: &[f32], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += (lp as f64).exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// One environment slot: the live episode plus its goal and payload.
pub struct EnvSlot {
    pub state: GridState,
    pub goal: Goal,
    pub payload: Payload,
    pub episode: u64,
    pub ep_return: f64,
    pub ep_len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub ret: f64,
    pub len: u32,
    pub success: bool,
}

/// Parallel placement environments. Each episode's goal, target render and
/// initial state come from a stream indexed by (environment, episode), so
/// conditions run with the same seed see the same sequence of tasks.
pub struct EnvPool {
    pub slots: Vec<EnvSlot>,
    pub task: Task,
    pub grid: GridConfig,
    pub generator: GeneratorConfig,
    pub goals: Vec<Combination>,
    seed: u64,
}

/// Fills in the payload of a freshly reset episode.
pub type PayloadFn<'a> = dyn FnMut(&Goal) -> Result<Payload, Error> + 'a;

impl EnvPool {
    pub fn new(
        num_envs: usize,
        task: Task,
        grid: GridConfig,
        generator: GeneratorConfig,
        goals: Vec<Combination>,
        seed: u64,
        payload: &mut PayloadFn<'_>,
    ) -> Result<Self, Error> {
        if goals.is_empty() {
            return Err(Error::Invalid("goal pool is empty".into()));
        }
        let mut pool = Self { slots: Vec::with_capacity(num_envs), task, grid, generator, goals, seed };
        for e in 0..num_envs {
            let slot = pool.fresh_slot(e, 0, payload)?;
            pool.slots.push(slot);
        }
        Ok(pool)
    }

    fn fresh_slot(&self, env: usize, episode: u64, payload: &mut PayloadFn<'_>) -> Result<EnvSlot, Error> {
        let mut rng = indexed_stream(self.seed, &format!("transfer/env{env}"), episode);
        let combination = self.goals[rng.random_range(0..self.goals.len())];
        let image = render(combination, &mut rng, &self.generator)?.0;
        let goal = Goal { combination, target_image: Arc::new(image) };
        let state = gridworld::reset(combination, &self.grid, &mut rng);
        let payload = payload(&goal)?;
        Ok(EnvSlot { state, goal, payload, episode, ep_return: 0.0, ep_len: 0 })
    }

    /// Abandons every live episode and starts the next one.
    pub fn restart(&mut self, payload: &mut PayloadFn<'_>) -> Result<(), Error> {
        for e in 0..self.slots.len() {
            let next = self.fresh_slot(e, self.slots[e].episode + 1, payload)?;
            self.slots[e] = next;
        }
        Ok(())
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.slots.iter().map(|s| Observation { state: s.state, payload: s.payload.clone() }).collect()
    }

    /// Applies one joint action per environment (one action index per
    /// Listener). Finished episodes are reset in place and reported.
    pub fn step(
        &mut self,
        actions: &[Vec<usize>],
        payload: &mut PayloadFn<'_>,
    ) -> Result<(Vec<StepOutcome>, Vec<Option<(EpisodeStats, EnvSlot)>>), Error> {
        let mut outcomes = Vec::with_capacity(self.slots.len());
        let mut finished = Vec::with_capacity(self.slots.len());
        for e in 0..self.slots.len() {
            let slot = &mut self.slots[e];
            let goal = slot.goal.combination;
            let out = match self.task {
                Task::Single => {
                    let a = PlacementAction::from_index(actions[0][e]).expect("action in range");
                    gridworld::step(&mut slot.state, a, goal, &self.grid)?
                }
                Task::Multi => {
                    let dir = |i: usize| Direction::from_index(i).expect("direction in range");
                    let a = MultiAction { dir_a: dir(actions[0][e]), dir_b: dir(actions[1][e]) };
                    gridworld::multi_step(&mut slot.state, a, goal, &self.grid)?
                }
            };
            slot.ep_return += out.reward;
            slot.ep_len += 1;
            outcomes.push(out);
            if out.done {
                let stats = EpisodeStats { ret: slot.ep_return, len: slot.ep_len, success: out.success };
                let episode = slot.episode;
                let next = self.fresh_slot(e, episode + 1, payload)?;
                let old = std::mem::replace(&mut self.slots[e], next);
                finished.push(Some((stats, old)));
            } else {
                finished.push(None);
            }
        }
        Ok((outcomes, finished))
    }
}

/// Transitions of one rollout, time-major (`index = t * num_envs + env`).
pub struct Rollout {
    pub num_envs: usize,
    pub obs: Vec<Observation>,
    /// Per Listener.
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Per Listener, one per environment.
    pub last_values: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub episodes: Vec<EpisodeStats>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// GAE for Listener `agent`, returned in rollout order.
    pub fn advantages(&self, agent: usize, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let e_n = self.num_envs;
        let t_n = self.len() / e_n;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..e_n {
            let idx: Vec<usize> = (0..t_n).map(|t| t * e_n + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[agent][i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, rt) = gae(&r, &v, &d, self.last_values[agent][e], gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = rt[k];
            }
        }
        (adv, ret)
    }
}

/// Runs `steps_per_env` joint steps with sampled actions.
pub fn collect_rollout(
    agents: &[PolicyAgent],
    pool: &mut EnvPool,
    steps_per_env: usize,
    rng: &mut SimRng,
    payload: &mut PayloadFn<'_>,
) -> Result<Rollout, Error> {
    let e_n = pool.slots.len();
    let a_n = agents.len();
    let cap = steps_per_env * e_n;
    let mut ro = Rollout {
        num_envs: e_n,
        obs: Vec::with_capacity(cap),
        actions: vec![Vec::with_capacity(cap); a_n],
        log_probs: vec![Vec::with_capacity(cap); a_n],
        values: vec![Vec::with_capacity(cap); a_n],
        last_values: Vec::new(),
        rewards: Vec::with_capacity(cap),
        dones: Vec::with_capacity(cap),
        episodes: Vec::new(),
    };
    for _ in 0..steps_per_env {
        let obs = pool.observations();
        let refs: Vec<&Observation> = obs.iter().collect();
        let mut joint = Vec::with_capacity(a_n);
        for (k, agent) in agents.iter().enumerate() {
            let (a, lp, v) = agent.act(&refs, Some(rng));
            ro.actions[k].extend_from_slice(&a);
            ro.log_probs[k].extend(lp);
            ro.values[k].extend(v);
            joint.push(a);
        }
        let (outcomes, finished) = pool.step(&joint, payload)?;
        ro.obs.extend(obs);
        for out in outcomes {
            ro.rewards.push(out.reward);
            ro.dones.push(out.done);
        }
        ro.episodes.extend(finished.into_iter().flatten().map(|(s, _)| s));
    }
    let obs = pool.observations();
    let refs: Vec<&Observation> = obs.iter().collect();
    ro.last_values = agents.iter().map(|a| a.act(&refs, None).2).collect();
    Ok(ro)
}

/// Minibatch inputs of the PPO loss; advantages already normalized.
pub struct PpoBatch<'a> {
    pub obs: Vec<&'a Observation>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub struct PpoLoss {
    pub total: NodeId,
    pub policy: NodeId,
    pub value: NodeId,
    pub entropy: NodeId,
}

/// `-mean(min(r A, clip(r) A)) + c_v mean((V - R)^2) - c_e mean(H)`.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &PolicyNet,
    store: &ParamStore<T>,
    batch: &PpoBatch<'_>,
    cfg: &PpoConfig,
) -> PpoLoss {
    let n = batch.obs.len();
    let col = |v: &[f64]| Tensor::from_vec(&[n], v.iter().map(|&x| T::lit(x)).collect());
    let (logits, values) = net.forward(g, store, &batch.obs);
    let logp = g.log_softmax(logits);
    let lp = g.pick_rows(logp, &batch.actions);
    let old = g.constant(col(&batch.old_log_probs));
    let diff = g.sub(lp, old);
    let ratio = g.exp(diff);
    let adv = col(&batch.advantages);
    let surr1 = g.mul_const(ratio, adv.clone());
    let clipped = g.clamp(ratio, T::lit(1.0 - cfg.clip), T::lit(1.0 + cfg.clip));
    let surr2 = g.mul_const(clipped, adv);
    let surr = g.minimum(surr1, surr2);
    let surr = g.mean(surr);
    let policy = g.scale(surr, T::lit(-1.0));
    let ret = g.constant(col(&batch.returns));
    let err = g.sub(values, ret);
    let sq = g.mul(err, err);
    let value = g.mean(sq);
    let ent = g.entropy_rows(logp);
    let entropy = g.mean(ent);
    let wv = g.scale(value, T::lit(cfg.value_coef));
    let we = g.scale(entropy, T::lit(-cfg.entropy_coef));
    let total = g.add(policy, wv);
    let total = g.add(total, we);
    PpoLoss { total, policy, value, entropy }
}

fn normalize(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    adv.iter().map(|a| (a - mean) / (var.sqrt() + 1e-8)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// `epochs_per_update` shuffled passes of minibatch updates for one Listener.
pub fn ppo_update(agent: &mut PolicyAgent, k: usize, ro: &Rollout, cfg: &PpoConfig, rng: &mut SimRng) -> UpdateStats {
    let (adv, ret) = ro.advantages(k, cfg.gamma, cfg.gae_lambda);
    let mut order: Vec<usize> = (0..ro.len()).collect();
    let mut sums = UpdateStats::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for mb in order.chunks(cfg.minibatch) {
            let raw: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
            let batch = PpoBatch {
                obs: mb.iter().map(|&i| &ro.obs[i]).collect(),
                actions: mb.iter().map(|&i| ro.actions[k][i]).collect(),
                old_log_probs: mb.iter().map(|&i| ro.log_probs[k][i]).collect(),
                advantages: normalize(&raw),
                returns: mb.iter().map(|&i| ret[i]).collect(),
            };
            let mut g = Graph::new();
            let loss = ppo_loss(&mut g, &agent.net, &agent.store, &batch, cfg);
            g.backward_into(loss.total, &mut agent.store);
            agent.store.clip_grad_norm(cfg.max_grad_norm as f32);
            agent.adam.step(&mut agent.store);
            sums.policy_loss += g.value(loss.policy).item() as f64;
            sums.value_loss += g.value(loss.value).item() as f64;
            sums.entropy += g.value(loss.entropy).item() as f64;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    UpdateStats { policy_loss: sums.policy_loss / c, value_loss: sums.value_loss / c, entropy: sums.entropy / c }
}
