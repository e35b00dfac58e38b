//! Tensor-decomposition topologies and the reconstruction operator that maps
//! latent cores to a full convolution kernel.

mod reconstruct;
mod split;
mod topology;

pub use reconstruct::{reconstruct, reconstruct_gradient, CoreSet};
pub use split::rank1_tr_split_forward;
pub use topology::{
    compression_ratio, Axis, FreeMode, KernelDims, TdTopology, TopologyKind, MODE_HEIGHT,
    MODE_INPUT, MODE_OUTPUT, MODE_WIDTH,
};

/// Number of trainable core elements of `topology`.
pub fn param_count(topology: &TdTopology) -> usize {
    topology.param_count()
}
