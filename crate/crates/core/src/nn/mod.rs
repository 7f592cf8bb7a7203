//! Minimal dense tensor and layer toolkit with hand-written backward passes.

mod layers;
mod optim;
mod scalar;
mod store;
mod tensor;

pub use layers::{
    avg_pool_spatial, global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BnCache, Conv3d,
    Conv3dSpec, Linear,
};
pub use optim::Adam;
pub use scalar::Scalar;
pub use store::{Grads, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
