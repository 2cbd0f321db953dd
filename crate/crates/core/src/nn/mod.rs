//! Feedforward classifiers with exact reverse-mode gradients.

pub mod model_file;
pub mod network;
pub mod objective;

pub use model_file::{load_model, save_model};
pub(crate) use network::GRAD_CHUNK;
pub use network::{
    BatchTrace,
    mlp_layers, ForwardTrace, InputGradient, LayerParams, LayerSpec, Network, ParamGrads,
};
pub use objective::{cross_entropy, ScalarObjective};

use crate::tensor::Tensor;

pub fn softmax(logits: &Tensor) -> Tensor {
    logits.with_data(crate::metric::prediction::softmax(logits.data()))
}
