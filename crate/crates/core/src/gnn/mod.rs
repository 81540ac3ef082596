//! Graph neural network mapping received pilots to a [`Solution`](crate::Solution).
//!
//! The graph has one IRS node and one node per user. User nodes share their
//! update blocks, so a parameter set works for any number of users; the
//! IRS node pools users by mean, user nodes pool the other users by
//! element-wise max.

mod estimator;
mod features;
mod mlp;
mod network;
mod params;
#[cfg(test)]
mod tests;

pub use estimator::{EstimationLoss, EstimationNet};
pub use features::{build_features, observation_from_features, FeatureScaling, InputMode};
pub use mlp::{Mlp, MlpCache};
pub use network::{
    loss, loss_and_gradient, normalize_beamformers, normalize_reflection, Dimensions, ForwardCache, Gnn, GnnConfig,
    LossGradient,
};
pub use params::{GnnParameters, Layout, ParamBlock};
