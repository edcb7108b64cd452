//! Self-supervised channel charting: encoders trained with reconstruction,
//! Siamese, or triplet objectives, plus classical Isomap as the
//! non-parametric baseline.

mod encoder;
mod isomap;
mod train;

pub use encoder::{
    backbone_forward, backbone_forward_values, backbone_shapes, featurize, featurize_profiles,
    init_backbone, BackboneValues, ChartModel, ChartVariant, Embedding, EncoderConfig,
};
pub use isomap::{isomap_chart, procrustes_residual, IsomapChart};
pub use train::{
    autoencoder_batch_loss, mine_triplets, siamese_batch_loss, train_autoencoder, train_siamese,
    train_triplet, triplet_batch_loss, RHO_EPSILON,
};
