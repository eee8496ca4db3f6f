use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{conv_out, pool_out, Conv2dSpec, Graph, NodeId};
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Fully connected layer, weight stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_init(format!("{name}.weight"), &[out_dim, in_dim], init, rng);
        let bias = store.add_init(format!("{name}.bias"), &[out_dim], Init::Constant(0.0), rng);
        Self { weight, bias, in_dim, out_dim }
    }

    /// He-uniform weights, for layers followed by a ReLU.
    pub fn relu<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_dim, out_dim, Init::KaimingUniform { fan_in: in_dim }, rng)
    }

    pub fn plain<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_dim, out_dim, Init::FanInUniform { fan_in: in_dim }, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// LSTM cell with gate order (input, forget, cell, output) and a single
/// fused bias.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Weights `U[-1/√h, 1/√h]`, biases zero except the forget gate at 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::FanInUniform { fan_in: hidden };
        let w_ih = store.add_init(format!("{name}.w_ih"), &[4 * hidden, input_dim], init, rng);
        let w_hh = store.add_init(format!("{name}.w_hh"), &[4 * hidden, hidden], init, rng);
        let mut b = vec![T::zero(); 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = T::one());
        let bias = store.add(format!("{name}.bias"), crate::Tensor::from_vec(&[4 * hidden], b));
        Self { w_ih, w_hh, bias, input_dim, hidden }
    }

    /// One step over a batch: `x: [n, input]`, `h, c: [n, hidden]`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        let gx = g.linear(x, w_ih, Some(b));
        let gh = g.linear(h, w_hh, None);
        let gates = g.add(gx, gh);
        let hd = self.hidden;
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, hd);
        let cand = g.slice_cols(gates, 2 * hd, hd);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}

/// One stage of the image encoder. Every convolution is followed by a ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderStage {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize },
}

/// Layer list of a convolutional image encoder ending in global average
/// pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stages: Vec<EncoderStage>,
}

impl EncoderSpec {
    /// The AlexNet-shaped encoder used by both agents; 216-dim output.
    pub fn reduced_alexnet() -> Self {
        use EncoderStage::*;
        Self {
            in_channels: 3,
            stages: vec![
                Conv { out_channels: 16, kernel: 11, stride: 4, pad: 2 },
                MaxPool { kernel: 3, stride: 2 },
                Conv { out_channels: 32, kernel: 5, stride: 1, pad: 2 },
                MaxPool { kernel: 3, stride: 2 },
                Conv { out_channels: 64, kernel: 3, stride: 1, pad: 1 },
                Conv { out_channels: 216, kernel: 3, stride: 1, pad: 1 },
            ],
        }
    }

    /// Small two-conv trunk used where a trainable pixel encoder is needed
    /// inside an RL policy.
    pub fn small_pixel_trunk() -> Self {
        use EncoderStage::*;
        Self {
            in_channels: 3,
            stages: vec![
                Conv { out_channels: 8, kernel: 8, stride: 4, pad: 0 },
                Conv { out_channels: 16, kernel: 4, stride: 2, pad: 0 },
                Conv { out_channels: 32, kernel: 3, stride: 1, pad: 1 },
            ],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .find_map(|s| match s {
                EncoderStage::Conv { out_channels, .. } => Some(*out_channels),
                EncoderStage::MaxPool { .. } => None,
            })
            .unwrap_or(self.in_channels)
    }

    /// Spatial size of the final feature map, or `None` if the input is too
    /// small for some convolution.
    pub fn final_spatial(&self, image_size: usize) -> Option<usize> {
        let mut s = image_size;
        for stage in &self.stages {
            s = match *stage {
                EncoderStage::Conv { kernel, stride, pad, .. } => {
                    if s + 2 * pad < kernel {
                        return None;
                    }
                    conv_out(s, s, kernel, Conv2dSpec { stride, pad }).0
                }
                EncoderStage::MaxPool { kernel, stride } => pool_out(s, kernel, stride),
            };
        }
        Some(s)
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
    spec: Conv2dSpec,
}

/// Convolutional encoder built from an [`EncoderSpec`].
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    convs: Vec<ConvParams>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: EncoderSpec,
        rng: &mut R,
    ) -> Self {
        let mut channels = spec.in_channels;
        let mut convs = Vec::new();
        for stage in &spec.stages {
            if let EncoderStage::Conv { out_channels, kernel, stride, pad } = *stage {
                let idx = convs.len();
                let fan_in = channels * kernel * kernel;
                let weight = store.add_init(
                    format!("{name}.conv{idx}.weight"),
                    &[out_channels, channels, kernel, kernel],
                    Init::KaimingUniform { fan_in },
                    rng,
                );
                let bias = store.add_init(
                    format!("{name}.conv{idx}.bias"),
                    &[out_channels],
                    Init::Constant(0.0),
                    rng,
                );
                convs.push(ConvParams { weight, bias, spec: Conv2dSpec { stride, pad } });
                channels = out_channels;
            }
        }
        Self { spec, convs }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// `[N, C, H, W] -> [N, output_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let maps = self.feature_map(g, store, x);
        g.global_avg_pool(maps)
    }

    /// Final feature map `[N, output_dim, h, w]`, before pooling.
    pub fn feature_map<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let mut h = x;
        let mut convs = self.convs.iter();
        for stage in &self.spec.stages {
            h = match *stage {
                EncoderStage::Conv { .. } => {
                    let p = convs.next().expect("conv params");
                    let w = g.param(store, p.weight);
                    let b = g.param(store, p.bias);
                    let y = g.conv2d(h, w, Some(b), p.spec);
                    g.relu(y)
                }
                EncoderStage::MaxPool { kernel, stride } => g.max_pool2d(h, kernel, stride),
            };
        }
        h
    }

    /// Parameter ids in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| [c.weight, c.bias]).collect()
    }
}
