pub mod layers;
pub mod model;
pub mod optim;

pub use layers::Mode;
pub use model::{build_network, Arch, ForwardCtx, MaskSettings, ModelSpec, Network, Node};
pub use optim::{OptimizerState, SgdConfig};
