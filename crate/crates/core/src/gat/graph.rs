//! Query-graph construction: the query node plus its K retrieved reference
//! points, fully connected, with ADP-similarity edge weights.

use crate::charting::featurize_profiles;
use crate::error::{Error, Result};
use crate::features::{adp_transform, profiles_dissimilarity, AdpProfile};
use crate::nn::Tensor;
use crate::sim::{CsiTensor, Point2};

/// Guard added to the ADP dissimilarity before inverting it into an edge
/// weight.
pub const EDGE_EPSILON: f64 = 1e-6;

/// Cap on edge weights so duplicate fingerprints stay finite even under the
/// optional log-weight attention bias.
pub const EDGE_WEIGHT_CAP: f64 = 1e6;

/// Fully connected graph over one query (node 0) and its K reference points.
/// Node inputs are featurized ADP stacks; the query's position slot is a zero
/// placeholder in training and inference alike.
#[derive(Clone, Debug)]
pub struct QueryGraph {
    /// Featurized encoder input per node; node 0 is the query.
    pub node_inputs: Vec<Tensor>,
    /// Position per node; node 0 holds the zero placeholder.
    pub positions: Vec<Point2>,
    /// (K+1)^2 symmetric nonnegative weights, zero diagonal, row-major.
    pub edge_weights: Vec<f64>,
    /// Ground-truth query position, present during training only.
    pub query_truth: Option<Point2>,
}

impl QueryGraph {
    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn edge(&self, p: usize, q: usize) -> f64 {
        self.edge_weights[p * self.n_nodes() + q]
    }
}

pub(crate) fn edge_weight_from_dissimilarity(d: f64) -> f64 {
    (1.0 / (d + EDGE_EPSILON)).min(EDGE_WEIGHT_CAP)
}

/// Assemble a graph from per-node ADP profiles and positions. Used by both
/// the public [`build_graph`] and the cached paths in training/evaluation;
/// edge values are identical either way.
pub(crate) fn graph_from_profiles(
    profiles: &[Vec<AdpProfile>],
    shape: (usize, usize, usize),
    positions_with_query_placeholder: Vec<Point2>,
    query_truth: Option<Point2>,
) -> Result<QueryGraph> {
    let n = profiles.len();
    let mut edge_weights = vec![0.0; n * n];
    for p in 0..n {
        for q in (p + 1)..n {
            let d = profiles_dissimilarity(&profiles[p], &profiles[q])?;
            let w = edge_weight_from_dissimilarity(d);
            edge_weights[p * n + q] = w;
            edge_weights[q * n + p] = w;
        }
    }
    let node_inputs = profiles
        .iter()
        .map(|p| featurize_profiles(p, shape))
        .collect();
    Ok(QueryGraph {
        node_inputs,
        positions: positions_with_query_placeholder,
        edge_weights,
        query_truth,
    })
}

/// Build the query graph: node 0 carries the query CSI with a zero-position
/// placeholder, nodes 1..=K carry the retrieved references. Fully connected;
/// edge weight 1/(d_ADP + eps), capped, zero diagonal.
pub fn build_graph(h_query: &CsiTensor, refs: &[(&CsiTensor, Point2)]) -> Result<QueryGraph> {
    if refs.is_empty() {
        return Err(Error::Config("build_graph needs at least one reference".into()));
    }
    for (i, (csi, _)) in refs.iter().enumerate() {
        if !h_query.same_shape(csi) {
            return Err(Error::ShapeMismatch {
                op: "build_graph",
                detail: format!(
                    "query {:?} vs reference {i} {:?}",
                    h_query.shape(),
                    csi.shape()
                ),
            });
        }
    }
    let mut profiles = Vec::with_capacity(refs.len() + 1);
    profiles.push(adp_transform(h_query));
    for (csi, _) in refs {
        profiles.push(adp_transform(csi));
    }
    let mut positions = Vec::with_capacity(refs.len() + 1);
    positions.push(Point2::new(0.0, 0.0));
    positions.extend(refs.iter().map(|(_, p)| *p));
    graph_from_profiles(&profiles, h_query.shape(), positions, None)
}
