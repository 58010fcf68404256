//! Architecture descriptions, parameter counting, and trainable networks.

mod network;
mod spec;

pub use network::{BoundNetwork, LayerParams, Network, ParamKind};
pub use spec::{
    build_shortest_path_model, build_shortest_path_model_with, build_wrn_cifar_spec,
    count_params, ArchitectureSpec, GroupSpec, LayerKind, LayerSpec, ParamCountReport, Templates,
};
