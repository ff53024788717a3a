//! Toy frozen hierarchical transformer: four stages of overlapping patch
//! embedding and transformer blocks, an all-MLP decoder, and per-block
//! additive prompt injection in tuned stages.

mod config;
mod model;
mod params;

pub use config::{BackboneConfig, STAGES};
pub use model::{ForwardOutput, Geometry, ParamVars, PreparedImage, Prompting, Segmenter, StageGeometry};
pub use params::{
    backbone_specs, build_model, count_params, decoder_specs, partition, prompt_specs,
    stage_prompt_dims, ModelParams, Param, Role,
};
