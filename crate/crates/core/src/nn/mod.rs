//! A small differentiable CNN: conv2d, relu, 2x2 max-pool, flatten, dense, softmax.

pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod tensor;

pub use arch::{LayerSpec, NetworkArchitecture};
pub use gradcheck::gradient_check;
pub use network::{argmax, forward, forward_chunked, loss_and_grad};
pub use params::{init_params, sgd_step, GradientSet, ParamEntry, ParameterSet};
pub use tensor::Tensor;
