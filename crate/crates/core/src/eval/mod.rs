//! Fidelity proxies, statistics and the registered experiments.

mod classifier;
pub mod experiments;
mod metrics;
pub mod stats;

pub use classifier::{
    target_fidelity, train_attr_classifier, AttrClassifier, ClassifierConfig, HeadAccuracy, HeadProbs, ACCURACY_GATE,
};
pub use metrics::{mode_collapse_index, mse, source_fidelity};

/// Column label of the classifier-based target fidelity.
pub const CLIP_PROXY: &str = "clip-proxy";
/// Column label of the off-target MSE.
pub const LPIPS_PROXY: &str = "lpips-proxy";
