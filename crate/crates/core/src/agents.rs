//! Speaker (image to discrete message) and Listener (message plus
//! candidate images to a choice distribution).

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use relcomm_nn::{
    argmax, Encoder, EncoderSpec, Graph, Init, Linear, LstmCell, NodeId, ParamStore, Scalar, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::scene::SceneImage;

/// Fixed-length symbol sequence.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Message(pub Vec<u8>);

impl Message {
    pub fn symbols(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub message_len: usize,
    pub vocab_size: usize,
    /// Multiplier on the Listener's cosine similarities before the softmax.
    pub listener_inv_temp: f64,
    /// Scale of the Speaker's output-head init relative to `1/sqrt(fan_in)`.
    /// Zero makes every symbol exactly equally likely.
    pub speaker_head_init: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { message_len: 6, vocab_size: 5, listener_inv_temp: 1.0, speaker_head_init: 1.0 }
    }
}

pub const EMBED_DIM: usize = 216;
pub const SPEAKER_HIDDEN: usize = 128;
pub const LISTENER_HIDDEN: usize = 256;
pub const PROJ_DIM: usize = 128;
pub const COSINE_EPS: f64 = 1e-8;

/// Stacks images into a `[N, 3, H, W]` tensor scaled to [0, 1].
pub fn images_to_tensor<T: Scalar>(images: &[&SceneImage]) -> Tensor<T> {
    let size = images.first().map_or(0, |i| i.size());
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        assert_eq!(img.size(), size, "mixed image sizes");
        data.extend(img.to_chw_unit().into_iter().map(|v| T::lit(v as f64)));
    }
    Tensor::from_vec(&[images.len(), 3, size, size], data)
}

/// How the Speaker picks each symbol.
pub enum Decode<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Greedy,
    /// Score the given messages instead of choosing symbols.
    Forced(&'a [Message]),
}

/// Result of one Speaker pass over a batch.
pub struct SpeakerOutput {
    pub messages: Vec<Message>,
    /// Per step, `[n]` log-probability of the emitted symbol.
    pub step_log_probs: Vec<NodeId>,
    /// Per step, `[n]` entropy of the symbol distribution.
    pub step_entropies: Vec<NodeId>,
    /// `[n]` sum of `step_log_probs`.
    pub log_prob: NodeId,
    /// `[n]` sum of `step_entropies`.
    pub entropy: NodeId,
}

fn sample_categorical<T: Scalar, R: Rng + ?Sized>(log_probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.to_f64().unwrap_or(0.0).exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Speaker layer handles; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct SpeakerNet {
    pub cfg: AgentConfig,
    encoder: Encoder,
    proj: Linear,
    lstm: LstmCell,
    head: Linear,
}

impl SpeakerNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &AgentConfig,
        encoder: EncoderSpec,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::new(store, "encoder", encoder, rng);
        let proj = Linear::relu(store, "proj", encoder.output_dim(), SPEAKER_HIDDEN, rng);
        let lstm = LstmCell::new(store, "lstm", cfg.vocab_size + 1, SPEAKER_HIDDEN, rng);
        let bound = cfg.speaker_head_init / (SPEAKER_HIDDEN as f64).sqrt();
        let head = Linear::new(store, "head", SPEAKER_HIDDEN, cfg.vocab_size, Init::Uniform(bound), rng);
        Self { cfg: cfg.clone(), encoder, proj, lstm, head }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Image features `[N, 216]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        self.encoder.forward(g, store, x)
    }

    /// Runs the symbol LSTM from image input `x: [N, 3, H, W]`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        mut decode: Decode<'_, R>,
    ) -> SpeakerOutput {
        let feats = self.embed(g, store, x);
        self.forward_from_features(g, store, feats, &mut decode)
    }

    pub fn forward_from_features<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: NodeId,
        decode: &mut Decode<'_, R>,
    ) -> SpeakerOutput {
        let (v, steps) = (self.cfg.vocab_size, self.cfg.message_len);
        let n = g.value(feats).dim(0);
        let proj = self.proj.forward(g, store, feats);
        let mut h = g.relu(proj);
        let mut c = g.constant(Tensor::zeros(&[n, SPEAKER_HIDDEN]));
        let mut input = g.constant(Tensor::one_hot(&vec![v; n], v + 1));
        let mut symbols = vec![Vec::with_capacity(steps); n];
        let (mut step_log_probs, mut step_entropies) = (Vec::new(), Vec::new());
        for t in 0..steps {
            (h, c) = self.lstm.step(g, store, input, h, c);
            let logits = self.head.forward(g, store, h);
            let logp = g.log_softmax(logits);
            let chosen: Vec<usize> = {
                let lp = g.value(logp);
                (0..n)
                    .map(|r| match decode {
                        Decode::Sample(rng) => sample_categorical(lp.row(r), &mut **rng),
                        Decode::Greedy => argmax(lp.row(r)),
                        Decode::Forced(msgs) => msgs[r].0[t] as usize,
                    })
                    .collect()
            };
            for (s, &w) in symbols.iter_mut().zip(&chosen) {
                s.push(w as u8);
            }
            step_log_probs.push(g.pick_rows(logp, &chosen));
            step_entropies.push(g.entropy_rows(logp));
            input = g.constant(Tensor::one_hot(&chosen, v + 1));
        }
        let log_prob = sum_nodes(g, &step_log_probs);
        let entropy = sum_nodes(g, &step_entropies);
        SpeakerOutput {
            messages: symbols.into_iter().map(Message).collect(),
            step_log_probs,
            step_entropies,
            log_prob,
            entropy,
        }
    }

    pub fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "role": "speaker",
            "encoder": self.encoder.spec(),
            "hidden": SPEAKER_HIDDEN,
            "message_len": self.cfg.message_len,
            "vocab_size": self.cfg.vocab_size,
        })
    }
}

#[derive(Clone)]
pub struct Speaker<T: Scalar> {
    pub net: SpeakerNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Speaker<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, encoder: EncoderSpec, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = SpeakerNet::new(&mut store, cfg, encoder, rng);
        Self { net, store }
    }

    pub fn cfg(&self) -> &AgentConfig {
        &self.net.cfg
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: NodeId, decode: Decode<'_, R>) -> SpeakerOutput {
        self.net.forward(g, &self.store, x, decode)
    }

    /// Greedy messages for a batch of images, no gradients kept.
    pub fn speak(&self, images: &[&SceneImage]) -> Vec<Message> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        self.forward::<rand::rngs::StdRng>(&mut g, x, Decode::Greedy).messages
    }

    /// Encoder features `[N, 216]` as plain rows.
    pub fn features(&self, images: &[&SceneImage]) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        let f = self.net.embed(&mut g, &self.store, x);
        g.value(f).clone()
    }
}

fn sum_nodes<T: Scalar>(g: &mut Graph<T>, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

/// Arrangement of candidate embeddings relative to messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateLayout {
    /// Every message is scored against all candidate rows.
    Shared,
    /// Message `i` owns candidate rows `i*k .. (i+1)*k`.
    Blocks(usize),
}

/// Listener layer handles; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct ListenerNet {
    pub cfg: AgentConfig,
    encoder: Encoder,
    lstm: LstmCell,
    msg_proj: Linear,
    img_proj1: Linear,
    img_proj2: Linear,
}

impl ListenerNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &AgentConfig,
        encoder: EncoderSpec,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::new(store, "encoder", encoder, rng);
        let lstm = LstmCell::new(store, "lstm", cfg.vocab_size, LISTENER_HIDDEN, rng);
        let msg_proj = Linear::plain(store, "msg_proj", LISTENER_HIDDEN, PROJ_DIM, rng);
        let img_proj1 = Linear::relu(store, "img_proj1", encoder.output_dim(), PROJ_DIM, rng);
        let img_proj2 = Linear::plain(store, "img_proj2", PROJ_DIM, PROJ_DIM, rng);
        Self { cfg: cfg.clone(), encoder, lstm, msg_proj, img_proj1, img_proj2 }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Final LSTM hidden state `[n, 256]` per message. Each distinct message
    /// is encoded once.
    pub fn encode_messages<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, messages: &[Message]) -> NodeId {
        let mut distinct: Vec<&Message> = Vec::new();
        let mut slot: HashMap<&Message, usize> = HashMap::new();
        let idx: Vec<usize> = messages
            .iter()
            .map(|m| {
                *slot.entry(m).or_insert_with(|| {
                    distinct.push(m);
                    distinct.len() - 1
                })
            })
            .collect();
        let d = distinct.len();
        let mut h = g.constant(Tensor::zeros(&[d, LISTENER_HIDDEN]));
        let mut c = g.constant(Tensor::zeros(&[d, LISTENER_HIDDEN]));
        for t in 0..self.cfg.message_len {
            let sym: Vec<usize> = distinct.iter().map(|m| m.0[t] as usize).collect();
            let x = g.constant(Tensor::one_hot(&sym, self.cfg.vocab_size));
            (h, c) = self.lstm.step(g, store, x, h, c);
        }
        if d == messages.len() && idx.iter().enumerate().all(|(i, &j)| i == j) {
            h
        } else {
            g.gather_rows(h, &idx)
        }
    }

    /// Unit-norm message projections `[n, 128]`.
    pub fn project_messages<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: NodeId) -> NodeId {
        let p = self.msg_proj.forward(g, store, hidden);
        g.l2_normalize_rows(p, T::lit(COSINE_EPS))
    }

    /// Unit-norm image projections `[m, 128]` from `x: [m, 3, H, W]`.
    pub fn embed_images<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let f = self.encoder.forward(g, store, x);
        let p = self.img_proj1.forward(g, store, f);
        let p = g.relu(p);
        let p = self.img_proj2.forward(g, store, p);
        g.l2_normalize_rows(p, T::lit(COSINE_EPS))
    }

    /// Cosine-similarity logits `[n, k]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, msgs: NodeId, images: NodeId, layout: CandidateLayout) -> NodeId {
        let sims = match layout {
            CandidateLayout::Shared => g.matmul_t(msgs, images),
            CandidateLayout::Blocks(k) => {
                let n = g.value(msgs).dim(0);
                assert_eq!(g.value(images).dim(0), n * k, "candidate block size");
                let rows: Vec<NodeId> = (0..n)
                    .map(|i| {
                        let u = g.gather_rows(msgs, &[i]);
                        let block: Vec<usize> = (i * k..(i + 1) * k).collect();
                        let v = g.gather_rows(images, &block);
                        g.matmul_t(u, v)
                    })
                    .collect();
                let flat = g.concat(&rows);
                g.reshape(flat, &[n, k])
            }
        };
        if self.cfg.listener_inv_temp == 1.0 {
            sims
        } else {
            g.scale(sims, T::lit(self.cfg.listener_inv_temp))
        }
    }

    pub fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "role": "listener",
            "encoder": self.encoder.spec(),
            "hidden": LISTENER_HIDDEN,
            "proj": PROJ_DIM,
            "message_len": self.cfg.message_len,
            "vocab_size": self.cfg.vocab_size,
        })
    }
}

#[derive(Clone)]
pub struct Listener<T: Scalar> {
    pub net: ListenerNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Listener<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, encoder: EncoderSpec, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = ListenerNet::new(&mut store, cfg, encoder, rng);
        Self { net, store }
    }

    pub fn cfg(&self) -> &AgentConfig {
        &self.net.cfg
    }

    /// Choice distribution over `candidates` for one message, plus the
    /// message's 256-dim hidden state.
    pub fn score(&self, message: &Message, candidates: &[&SceneImage]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let hidden = self.net.encode_messages(&mut g, &self.store, std::slice::from_ref(message));
        let u = self.net.project_messages(&mut g, &self.store, hidden);
        let x = g.constant(images_to_tensor(candidates));
        let v = self.net.embed_images(&mut g, &self.store, x);
        let logits = self.net.logits(&mut g, u, v, CandidateLayout::Shared);
        let to64 = |t: &Tensor<T>| t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>();
        (order_free_softmax(&to64(g.value(logits))), to64(g.value(hidden)))
    }
}

/// Softmax whose normalizer is summed in sorted order, so permuting the
/// input permutes the output bit for bit.
pub fn order_free_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let z: f64 = sorted.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the most probable candidate, ties to the lowest index.
pub fn listener_choose(probs: &[f64]) -> usize {
    argmax(probs)
}
