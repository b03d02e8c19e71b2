//! Network architecture: configuration, parameters, blocks and accounting.

mod blocks;
mod complexity;
mod config;
mod model;
mod params;
mod trace;

#[cfg(test)]
mod tests;

pub use blocks::{detokenize, tokenize, Forward, Subnet1Out, Subnet2Out};
pub use complexity::{block_breakdown, count_parameters, estimate_flops, BlockCount};
pub use config::{Ablation, ModelConfig, SbResidual};
pub use model::{ctnet_forward, ctnet_forward_graph, trace_names};
pub use params::{is_valid_param_name, param_specs, BoundParams, Init, ModelParams, NameMismatch, ParamSpec};
pub use trace::ActivationTrace;
