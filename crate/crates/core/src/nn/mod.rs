//! Dense CNN numerics: conv, batch-norm, pooling, linear head, and the
//! Conv-BN-ReLU-Pool network with its analytic backward pass.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod model;
pub mod pool;

pub use batchnorm::{bn_forward, BatchNormLayer, ChannelStats};
pub use conv::{conv_forward, ConvLayer};
pub use linear::LinearHead;
pub use model::{network_forward, ArchSpec, Block, ForwardOutput, Gradients, Mode, NetworkModel};
pub use pool::{global_avg_pool, max_pool};
