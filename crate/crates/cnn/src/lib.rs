//! Convolutional backbone for tile classification: layer kernels, the
//! 37-layer table, two-phase fine-tuning with a boundary-aware loss,
//! feature extraction and gradient saliency maps.

pub mod bundle;
pub mod features;
pub mod layers;
pub mod loss;
pub mod network;
pub mod saliency;
pub mod spec;
pub mod tensor;
pub mod train;

pub use features::{aggregate_features, extract_features, FeatureSource, FeatureVector};
pub use layers::{LayerKind, Mode};
pub use loss::{boundary_aware_loss, cross_entropy, loss_and_gradient, DEFAULT_LOSS_ALPHA};
pub use network::{build_backbone, Network};
pub use saliency::{activation_map, input_gradient, pixel_gradient, ActivationMap, SaliencyMode};
pub use spec::{BackboneSpec, FEATURE_LAYER, HEAD_LAYER, NUM_CLASSES};
pub use tensor::Tensor;
pub use train::{center_crop, random_crop, standardize, train, TrainSample, TrainingConfig, TrainingLog};

#[derive(Debug, thiserror::Error)]
pub enum CnnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("weight bundle: {0}")]
    Bundle(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
