//! Query-graph construction and the graph-attention localizer, trained in
//! stage two against a frozen channel chart.

mod eval;
mod graph;
mod model;
mod train;

pub use eval::{evaluate, evaluate_with_variant, localize_graph, percentile, Evaluation, PerSampleError};
pub use graph::{build_graph, QueryGraph, EDGE_EPSILON, EDGE_WEIGHT_CAP};
pub use model::{
    forward_graph, gat_layer, gat_layer_on_tape, node_init, GatLayerSpec, LocConfig, LocModel,
    LocValues, ATTENTION_LEAKY_SLOPE,
};
pub use train::{train_localizer, training_graphs, RetrievalVariant};
