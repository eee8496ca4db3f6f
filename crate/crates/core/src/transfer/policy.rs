//! Actor-critic policy for the placement Listener: a 2x64 tanh trunk over
//! the encoded grid state plus whatever payload stands in for the message.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use relcomm_nn::{Encoder, EncoderSpec, Graph, Init, Linear, LstmCell, NodeId, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::agents::{images_to_tensor, Message, LISTENER_HIDDEN};
use crate::gridworld::{encode_state, GridState, STATE_FEATURES};
use crate::scene::SceneImage;

pub const TRUNK_HIDDEN: usize = 64;

/// What the Listener receives in place of (or as) the Speaker's message.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    None,
    Vector(Arc<[f32]>),
    Message(Message),
    Pixels(Arc<SceneImage>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadSpec {
    None,
    Vector { dim: usize },
    Message { len: usize, vocab: usize },
    Pixels { size: usize },
}

impl PayloadSpec {
    /// Width of the payload part of a flat observation.
    pub fn flat_len(self) -> usize {
        match self {
            PayloadSpec::None => 0,
            PayloadSpec::Vector { dim } => dim,
            PayloadSpec::Message { len, vocab } => len * vocab,
            PayloadSpec::Pixels { size } => 3 * size * size,
        }
    }

    pub fn accepts(self, payload: &Payload) -> bool {
        match (self, payload) {
            (PayloadSpec::None, Payload::None) => true,
            (PayloadSpec::Vector { dim }, Payload::Vector(v)) => v.len() == dim,
            (PayloadSpec::Message { len, vocab }, Payload::Message(m)) => {
                m.len() == len && m.symbols().iter().all(|&s| (s as usize) < vocab)
            }
            (PayloadSpec::Pixels { size }, Payload::Pixels(img)) => img.size() == size,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub state: GridState,
    pub payload: Payload,
}

impl Observation {
    /// Flat vector: encoded state, then the payload as one-hot symbol blocks,
    /// raw feature values or unit-range CHW pixels.
    pub fn encode(&self, spec: PayloadSpec) -> Vec<f32> {
        let mut out = encode_state(&self.state);
        match (&self.payload, spec) {
            (Payload::None, _) => {}
            (Payload::Vector(v), _) => out.extend_from_slice(v),
            (Payload::Message(m), PayloadSpec::Message { vocab, .. }) => {
                for &s in m.symbols() {
                    let mut block = vec![0.0; vocab];
                    block[s as usize] = 1.0;
                    out.extend(block);
                }
            }
            (Payload::Message(m), _) => panic!("message {m} does not fit payload {spec:?}"),
            (Payload::Pixels(img), _) => out.extend(img.to_chw_unit()),
        }
        out
    }
}

#[derive(Clone, Debug)]
enum PayloadEncoder {
    Flat,
    Lstm { cell: LstmCell, vocab: usize },
    Pixels { encoder: Encoder, flat: usize },
}

/// Layer handles; parameters live in the store passed to each call.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub spec: PayloadSpec,
    pub actions: usize,
    payload: PayloadEncoder,
    fc1: Linear,
    fc2: Linear,
    pi: Linear,
    v: Linear,
}

impl PolicyNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, spec: PayloadSpec, actions: usize, rng: &mut R) -> Self {
        let (payload, payload_dim) = match spec {
            PayloadSpec::None => (PayloadEncoder::Flat, 0),
            PayloadSpec::Vector { dim } => (PayloadEncoder::Flat, dim),
            PayloadSpec::Message { vocab, .. } => {
                let cell = LstmCell::new(store, "msg_lstm", vocab, LISTENER_HIDDEN, rng);
                (PayloadEncoder::Lstm { cell, vocab }, LISTENER_HIDDEN)
            }
            PayloadSpec::Pixels { size } => {
                let trunk = EncoderSpec::small_pixel_trunk();
                let side = trunk.final_spatial(size).expect("image too small for the pixel trunk");
                let flat = trunk.output_dim() * side * side;
                let encoder = Encoder::new(store, "pixels", trunk, rng);
                (PayloadEncoder::Pixels { encoder, flat }, flat)
            }
        };
        let input = STATE_FEATURES + payload_dim;
        let fc1 = Linear::plain(store, "fc1", input, TRUNK_HIDDEN, rng);
        let fc2 = Linear::plain(store, "fc2", TRUNK_HIDDEN, TRUNK_HIDDEN, rng);
        let pi_bound = 0.01 / (TRUNK_HIDDEN as f64).sqrt();
        let pi = Linear::new(store, "pi", TRUNK_HIDDEN, actions, Init::Uniform(pi_bound), rng);
        let v = Linear::plain(store, "v", TRUNK_HIDDEN, 1, rng);
        Self { spec, actions, payload, fc1, fc2, pi, v }
    }

    /// Action logits `[n, actions]` and state values `[n]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: &[&Observation]) -> (NodeId, NodeId) {
        let n = obs.len();
        let mut state = Vec::with_capacity(n * STATE_FEATURES);
        for o in obs {
            state.extend(encode_state(&o.state).into_iter().map(|x| T::lit(x as f64)));
        }
        let mut x = g.constant(Tensor::from_vec(&[n, STATE_FEATURES], state));
        if let Some(p) = self.encode_payload(g, store, obs) {
            x = g.concat(&[x, p]);
        }
        let h = self.fc1.forward(g, store, x);
        let h = g.tanh(h);
        let h = self.fc2.forward(g, store, h);
        let h = g.tanh(h);
        let logits = self.pi.forward(g, store, h);
        let values = self.v.forward(g, store, h);
        let values = g.reshape(values, &[n]);
        (logits, values)
    }

    fn encode_payload<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: &[&Observation]) -> Option<NodeId> {
        let n = obs.len();
        match (&self.payload, self.spec) {
            (_, PayloadSpec::None) => None,
            (PayloadEncoder::Flat, PayloadSpec::Vector { dim }) => {
                let mut data = Vec::with_capacity(n * dim);
                for o in obs {
                    let Payload::Vector(v) = &o.payload else { panic!("expected a feature payload") };
                    data.extend(v.iter().map(|&x| T::lit(x as f64)));
                }
                Some(g.constant(Tensor::from_vec(&[n, dim], data)))
            }
            (PayloadEncoder::Lstm { cell, vocab }, PayloadSpec::Message { len, .. }) => {
                let mut slot: HashMap<&Message, usize> = HashMap::new();
                let mut distinct: Vec<&Message> = Vec::new();
                let idx: Vec<usize> = obs
                    .iter()
                    .map(|o| {
                        let Payload::Message(m) = &o.payload else { panic!("expected a message payload") };
                        *slot.entry(m).or_insert_with(|| {
                            distinct.push(m);
                            distinct.len() - 1
                        })
                    })
                    .collect();
                let d = distinct.len();
                let mut h = g.constant(Tensor::zeros(&[d, cell.hidden]));
                let mut c = g.constant(Tensor::zeros(&[d, cell.hidden]));
                for t in 0..len {
                    let sym: Vec<usize> = distinct.iter().map(|m| m.symbols()[t] as usize).collect();
                    let x = g.constant(Tensor::one_hot(&sym, *vocab));
                    (h, c) = cell.step(g, store, x, h, c);
                }
                Some(g.gather_rows(h, &idx))
            }
            (PayloadEncoder::Pixels { encoder, flat }, PayloadSpec::Pixels { .. }) => {
                let mut slot: HashMap<*const SceneImage, usize> = HashMap::new();
                let mut distinct: Vec<&SceneImage> = Vec::new();
                let idx: Vec<usize> = obs
                    .iter()
                    .map(|o| {
                        let Payload::Pixels(img) = &o.payload else { panic!("expected an image payload") };
                        *slot.entry(Arc::as_ptr(img)).or_insert_with(|| {
                            distinct.push(img);
                            distinct.len() - 1
                        })
                    })
                    .collect();
                let x = g.constant(images_to_tensor(&distinct));
                let maps = encoder.feature_map(g, store, x);
                let rows = g.reshape(maps, &[distinct.len(), *flat]);
                Some(g.gather_rows(rows, &idx))
            }
            _ => unreachable!("payload encoder built from the same spec"),
        }
    }

    pub fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "role": "placement-policy",
            "payload": self.spec,
            "actions": self.actions,
            "trunk": [TRUNK_HIDDEN, TRUNK_HIDDEN],
        })
    }
}
