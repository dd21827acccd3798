//! The dual-stream backbone: spatial/temporal token rearrangement, MHSA
//! streams, graph convolutions over the body topology and the temporal KNN
//! graph, adaptive fusion, and the widened regression head.

mod config;
pub mod model;
pub mod ops;

pub use config::{BackboneConfig, StreamMode};
pub use model::{
    backbone_forward, dual_block, init_params, param_count, resolve_handles, Backbone, BackboneDenoiser,
    BackboneHandles, ForwardInput,
};
pub use ops::{
    adaptive_fusion, gcn_layer, knn_adjacency, mhsa, rearrange_spatial, rearrange_temporal, temporal_similarity,
    DualStreamState, FusionWeights, MhsaWeights,
};
