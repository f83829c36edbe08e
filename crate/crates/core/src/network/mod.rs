//! The asymmetric diffusion transformer and its plain control stack.

mod attention;
mod config;
mod model;
mod params;

pub use attention::{relative_bias_index, relative_bias_submatrix};
pub use config::{Architecture, ModelConfig, SizePreset, Variant};
pub use model::{timestep_features, Batch, ForwardMode, ForwardOutput, Mdt, WiringTrace};
pub use params::{encoder_skip_sources, init_params, param_shapes, InitScheme};
