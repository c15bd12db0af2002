//! Network assemblies for classification, keypoint saliency and part
//! segmentation.
//!
//! All clouds in a batch share one feature matrix of `B N` rows. Later ISL
//! stages search neighbors in their input feature space by default; set
//! [`GraphSpace::Static`] to keep coordinate neighborhoods throughout.

mod network;
mod spec;

pub use network::{ForwardOutput, ForwardTrace, Network, StageStructure};
pub use spec::{
    build_classifier, build_keypoint_net, build_partseg_net, Ablation, GraphSpace, Head, ModelOptions, NetworkSpec,
    Stage,
};
