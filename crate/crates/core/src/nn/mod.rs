//! Minimal dense-tensor engine with reverse-mode differentiation: enough for
//! the convolutional backbone, projection heads and dropout.

pub mod checkpoint;
pub mod conv;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use model::{
    dropout_apply, forward_backbone, forward_head, init_params, ConvNetConfig, Dense, HeadKind,
    Mode, ModelConfig, ModelParams, ProjectionHead,
};
pub use optim::Adam;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
