//! Hand-rolled neural network stack: tensors, differentiable ops, the
//! denoising U-net, Adam, and the training loop.
//!
//! Everything is f64 and CPU-only. Exactness properties (adjoint pairs,
//! gradient checks against finite differences) are enforced by the op
//! tests so the reconstruction layers can rely on them.

pub mod adam;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;

pub use adam::AdamState;
pub use network::{
    denoise_volume, volume_forward, volume_forward_cached, volume_to_windows, volume_vjp_input,
    windows_to_volume_adjoint, NetworkConfig, NetworkGrads, NetworkWeights, VolumeForward,
};
pub use tensor::Tensor;
pub use train::{pairs_from_volumes, train, SlicePair, TrainConfig, TrainReport};
