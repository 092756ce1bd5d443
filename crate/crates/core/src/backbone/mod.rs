//! Four-stage hierarchical backbone with per-layer linear/softmax scheduling.

pub mod config;
pub mod counts;
pub mod embed;
pub mod hsb;
pub mod model;

pub use config::{BackboneConfig, HsbRoute, LayerKind, LayerRef};
pub use counts::{count_flops, count_params, scaling_curve, CurvePoint, FlopBreakdown};
pub use embed::{patch_embed, patch_merge, MergeParams, PatchEmbedParams};
pub use hsb::{hidden_state_bridge, hidden_state_bridge_grid, sample_equidistant, HsbParams};
pub use model::{Backbone, ForwardTrace, LayerParams, TraceReport};
