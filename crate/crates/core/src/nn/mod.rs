//! Differentiable building blocks: tensors, layer graphs, losses, the
//! sampling layer, the optimizer, checkpoints, and gradient verification.

pub mod checkpoint;
pub mod gaussian;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gaussian::{
    kl_batch, kl_standard_normal, kl_standard_normal_grad, reparameterize, reparameterize_backward,
    reparameterize_batch, LatentCode, LatentGaussian,
};
pub use layers::{sigmoid, softmax_channels, Layer, LayerSpec, Mode, Param};
pub use loss::{bce_with_logits, categorical_nll, gan_losses, l1_loss, GanLosses};
pub use network::{Network, NetworkBuilder, Src};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
