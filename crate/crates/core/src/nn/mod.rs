//! Tiny convolutional encoder with hand-derived gradients.

pub mod checkpoint;
pub mod encoder;
pub mod optim;
pub mod tensor;

pub use checkpoint::{
    load_encoder, read_tensors, save_encoder, tensors_from_bytes, tensors_to_bytes, write_tensors,
};
pub use encoder::{
    backward, backward_sample, batch_from_images, encoder_forward, forward_sample, Embedding, EncoderParams, ForwardCache, CHANNELS, EMBED_DIM,
    HIDDEN_DIM, INPUT_SIDE,
};
pub use optim::{sgd_update, SgdConfig};
pub use tensor::Tensor;
