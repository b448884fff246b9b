//! The selective state-space block and language model.

pub mod config;
pub mod forward;
pub mod hooks;
pub mod ssm;
pub mod weights;

pub use config::ModelConfig;
pub use forward::{block_forward, embed, forward, model_forward, ForwardPass};
pub use hooks::{HookOp, HookSet, NoObserver, TapId, TapObserver, TapPoint};
pub use ssm::{discretize, selective_scan, SsmInputs};
pub use weights::{BlockParam, MambaBlockWeights, MambaModel};
