//! Minimal reverse-mode automatic differentiation over dense `f32` NCHW tensors.
//!
//! Only the operations needed by image-to-image networks are provided:
//! convolutions, pooling, instance normalization, pointwise activations,
//! spatial remapping and the scalar losses used for training.

pub mod archive;
pub mod nn;
mod ops;
pub mod optim;
pub mod safetensors;
mod tensor;

pub use archive::{Archive, TensorMap};
pub use nn::{Builder, Conv2d, ConvTranspose2x2, Param, ParamStore};
pub use ops::conv::conv_output_size;
pub use ops::spatial::reflect_index;
pub use optim::{Adam, AdamConfig};
pub use tensor::{Gradients, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
