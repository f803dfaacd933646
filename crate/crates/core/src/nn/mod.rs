//! Plaintext real-valued network engine used by the server, the label holder
//! and the defenders.

mod layer;
mod loss;
mod mlp;
mod optim;
mod tensor;

pub use layer::{
    dense_backward, dense_forward, glorot_uniform, sigmoid, Activation, DenseCache, DenseGrads,
    DenseParams, LayerSpec,
};
pub use loss::{logistic_loss, mse_distance, LossOutput, PROB_EPS};
pub use mlp::{flatten_grads, Mlp, MlpCache};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;
