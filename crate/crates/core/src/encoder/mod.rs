//! Vision Transformer backbone, projection and prediction heads, and the
//! momentum copy.

mod checkpoint;
mod ema;
mod forward;
mod params;

pub use checkpoint::{BlobDtype, Checkpoint, MAGIC, VERSION};
pub use ema::ema_update;
pub use forward::{
    bind, forward_backbone, forward_heads, forward_prediction, forward_projection, represent,
    trace_backbone, update_running_stats, BackboneTrace, BnMode, Bound, HeadStats,
    BN_RUNNING_MOMENTUM,
};
pub use params::{
    is_decay_exempt, is_tracked, EncoderParams, MomentumParams, ParamSet, ViTConfig,
    PREDICTION_PREFIX,
};

#[cfg(test)]
mod tests;
