//! Learned regularizers applied after each soft-thresholding step.

pub mod attention;
pub mod detail;
pub mod swin;

pub use attention::{window_msa, AttentionStageWeights};
pub use detail::{dconv, dconv_branches, net2_apply, DetailEnhanceWeights};
pub use swin::{net1_apply, Net1Weights};
