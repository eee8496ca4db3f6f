//! Minimal differentiable compute for the relcomm agents: dense tensors, a
//! reverse-mode tape with the layer set the agents need (convolution, max
//! pooling, linear, LSTM, softmax, cosine similarity), Adam, finite-difference
//! gradient checks and a checkpoint container.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod loss;
mod param;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, Coverage, GradCheckReport};
pub use graph::{conv_out, pool_out, Conv2dSpec, Grads, Graph, NodeId};
pub use layers::{Encoder, EncoderSpec, EncoderStage, Linear, LstmCell};
pub use loss::{argmax, cross_entropy, entropy, softmax};
pub use param::{AdamState, Init, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch for parameter {param}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { param: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no model named {0}")]
    MissingModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl<T: Scalar> Graph<T> {
    /// Backward pass from `loss`, adding parameter gradients into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<T>) {
        let grads = self.backward(loss);
        self.accumulate_into(&grads, store);
    }
}
