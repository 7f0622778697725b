pub mod checkpoint;
pub mod network;
pub mod params;

pub use network::{build_forward, model_forward, predict_proba, ActivationCache, Builder, ForwardPass, Mode};
pub use params::{init_params, ModelConfig, ModelParams, NamedTensors, TensorKind};
