//! Multi-task convolutional detector with hand-written gradients.
//!
//! Shared layers: conv 3x3 (1 -> C) / batchnorm / ReLU / max-pool, then
//! conv 3x3 (C -> 2 N_f) / batchnorm / ReLU. Per band: a 3x3 conv over that
//! band's two channels producing three maps, batchnorm, ReLU, average pool,
//! and a fully connected sigmoid head.
//!
//! Tensors are stored channel-major (C, N, H, W); an input sample is the
//! `N_w x N_f` matrix seen as a one-channel image with height `N_w`.

mod net;
mod ops;
mod params;
mod train;

pub use net::{
    backward, backward_into, forward, forward_into, update_running_stats, BackwardScratch, BatchPrediction, ForwardCache,
    Mode, Prediction,
};
pub use params::{
    ArchConfig, Dims, Gradients, Layout, ModelParams, ParamBlocks, Segment, SegmentKind, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, GROUP_IN, GROUP_OUT,
};
pub use train::{
    batch_bce_loss, bce_loss, classify, classify_probs, cosine_lr, sgd_step, sigmoid, Loss, LrSchedule, PROB_EPS,
};

#[cfg(test)]
mod tests;
