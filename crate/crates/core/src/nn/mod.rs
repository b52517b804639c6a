//! Layers, hand-written backward passes, loss and optimiser.

pub mod activation;
pub mod concat;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod network;
pub mod pool;
pub mod sgd;

pub use activation::{relu, relu_backward, relu_in_place, softmax_backward, softmax_channels};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use linear::{fc_backward, fc_forward, fc_weight_shape};
pub use loss::{masked_cross_entropy, CrossEntropy};
pub use network::{
    Activations, Gradients, InitScheme, LayerSpec, ModelManifest, Network, NetworkBuilder, Node,
    NodeId, Param, TrainingState,
};
pub use pool::{
    adaptive_max_pool, adaptive_max_pool_backward, global_avg_pool, global_avg_pool_backward,
    pool_backward, pool_forward, PoolKind, PoolSpec,
};
pub use sgd::{sgd_step, SGDConfig};
