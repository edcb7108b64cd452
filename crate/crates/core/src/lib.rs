//! Retrieval-assisted CSI fingerprinting localization at desk scale.
//!
//! The pipeline: synthesize multipath OFDM CSI ([`sim`]), compute angle-delay
//! profiles and the ADP dissimilarity ([`features`]), learn 2D channel charts
//! with self-supervised encoders ([`charting`]) on a small reverse-mode
//! autodiff engine ([`nn`]), retrieve correlated reference points in latent
//! space ([`retrieval`]), and estimate positions with a graph-attention
//! localizer ([`gat`]). [`bench`] times the retrieval paths.

pub mod error;
pub mod rng;

mod dft;
mod io_util;

pub mod bench;
pub mod charting;
pub mod features;
pub mod gat;
pub mod nn;
pub mod retrieval;
pub mod sim;

pub use charting::{ChartModel, ChartVariant, Embedding, EncoderConfig};
pub use error::{Error, Result};
pub use features::{adp_dissimilarity, adp_transform, AdpProfile, DissimilarityMatrix};
pub use gat::{LocConfig, LocModel, QueryGraph, RetrievalVariant};
pub use retrieval::{FingerprintDb, RetrievalResult};
pub use sim::{CsiTensor, LabeledSample, Point2, Rect, SamplingMode, ScenarioConfig};
