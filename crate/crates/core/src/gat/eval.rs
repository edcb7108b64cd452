//! Localization evaluation: per-query retrieval, graph assembly, forward
//! pass, and error aggregation.

use rayon::prelude::*;

use crate::charting::{featurize_profiles, ChartModel, IsomapChart};
use crate::error::{Error, Result};
use crate::features::{adp_transform, profiles_dissimilarity};
use crate::gat::graph::edge_weight_from_dissimilarity;
use crate::gat::model::{LocModel, LocValues, forward_graph};
use crate::gat::train::{build_caches, top_k_excluding, RetrievalVariant, TrainingCaches};
use crate::gat::QueryGraph;
use crate::retrieval::FingerprintDb;
use crate::sim::{LabeledSample, Point2};

/// One evaluated test sample.
#[derive(Clone, Debug)]
pub struct PerSampleError {
    pub index: usize,
    pub truth: Point2,
    pub estimate: Point2,
    pub error: f64,
}

/// Aggregated localization metrics.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mae: f64,
    pub p50: f64,
    pub p90: f64,
    pub n_test: usize,
    pub retrieval_variant: String,
    pub k: usize,
    pub per_sample: Vec<PerSampleError>,
}

/// Nearest-rank percentile of an ascending-sorted slice, q in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Evaluate with latent retrieval (the deployment path): encode the query,
/// retrieve the top-k references in the chart, build the graph, localize.
pub fn evaluate(
    model: &LocModel,
    chart: &ChartModel,
    db: &FingerprintDb,
    test: &[LabeledSample],
    k: usize,
) -> Result<Evaluation> {
    evaluate_with_variant(model, chart, db, test, k, RetrievalVariant::Chart)
}

/// Evaluate under any retrieval variant (including the evaluation-only
/// real-location upper bound).
pub fn evaluate_with_variant(
    model: &LocModel,
    chart: &ChartModel,
    db: &FingerprintDb,
    test: &[LabeledSample],
    k: usize,
    variant: RetrievalVariant,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty test set".into()));
    }
    if k == 0 || k > db.len() {
        return Err(Error::KOutOfRange { k, db_size: db.len() });
    }
    let caches = build_caches(db)?;
    let isomap = match variant {
        RetrievalVariant::Isomap { neighbors } => {
            Some(IsomapChart::fit(&caches.matrix, neighbors, 2)?)
        }
        _ => None,
    };

    let per_sample: Result<Vec<PerSampleError>> = test
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let estimate = localize_query(model, chart, db, &caches, sample, k, variant, isomap.as_ref())?;
            let error = estimate.dist(&sample.position);
            Ok(PerSampleError { index, truth: sample.position, estimate, error })
        })
        .collect();
    let per_sample = per_sample?;

    let mut errors: Vec<f64> = per_sample.iter().map(|p| p.error).collect();
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    errors.sort_by(f64::total_cmp);
    Ok(Evaluation {
        mae,
        p50: percentile(&errors, 0.5),
        p90: percentile(&errors, 0.9),
        n_test: per_sample.len(),
        retrieval_variant: variant.label().to_string(),
        k,
        per_sample,
    })
}

#[allow(clippy::too_many_arguments)]
fn localize_query(
    model: &LocModel,
    chart: &ChartModel,
    db: &FingerprintDb,
    caches: &TrainingCaches,
    sample: &LabeledSample,
    k: usize,
    variant: RetrievalVariant,
    isomap: Option<&IsomapChart>,
) -> Result<Point2> {
    let q_profiles = adp_transform(&sample.csi);
    // ADP distances from the query to every database entry; needed for the
    // graph edges regardless of how retrieval picks the references.
    let adp_row: Result<Vec<f64>> = (0..db.len())
        .map(|i| profiles_dissimilarity(&q_profiles, caches.profiles.profiles(i)))
        .collect();
    let adp_row = adp_row?;

    let refs = match variant {
        RetrievalVariant::Chart => {
            let feat = featurize_profiles(&q_profiles, sample.csi.shape());
            let z = chart.encode_featurized(&feat)?;
            let dists: Vec<f64> = db.embeddings().map(|e| z.dist(e)).collect();
            top_k_excluding(&dists, None, k)
        }
        RetrievalVariant::Adp => top_k_excluding(&adp_row, None, k),
        RetrievalVariant::Isomap { .. } => {
            let chart = isomap.expect("isomap chart fitted");
            let z = chart.extend(&adp_row)?;
            let dists: Vec<f64> = chart.embeddings.iter().map(|e| z.dist(e)).collect();
            top_k_excluding(&dists, None, k)
        }
        RetrievalVariant::RealLocation => {
            let dists: Vec<f64> = db
                .entries()
                .iter()
                .map(|e| e.position.dist(&sample.position))
                .collect();
            top_k_excluding(&dists, None, k)
        }
    };

    let graph = eval_graph(&sample.csi, &q_profiles, db, caches, &refs)?;
    model.localize(&graph)
}

/// Assemble the query graph reusing the cached database profiles; values are
/// identical to `build_graph` on the raw CSI tensors.
fn eval_graph(
    query_csi: &crate::sim::CsiTensor,
    q_profiles: &[crate::features::AdpProfile],
    db: &FingerprintDb,
    caches: &TrainingCaches,
    refs: &[usize],
) -> Result<QueryGraph> {
    let n = refs.len() + 1;
    let mut edge_weights = vec![0.0; n * n];
    for (p, &rp) in refs.iter().enumerate() {
        let d = profiles_dissimilarity(q_profiles, caches.profiles.profiles(rp))?;
        let w = edge_weight_from_dissimilarity(d);
        edge_weights[p + 1] = w;
        edge_weights[(p + 1) * n] = w;
    }
    for p in 0..refs.len() {
        for q in (p + 1)..refs.len() {
            let w = edge_weight_from_dissimilarity(caches.matrix.at(refs[p], refs[q]));
            edge_weights[(p + 1) * n + (q + 1)] = w;
            edge_weights[(q + 1) * n + (p + 1)] = w;
        }
    }
    let mut node_inputs = Vec::with_capacity(n);
    node_inputs.push(featurize_profiles(q_profiles, query_csi.shape()));
    node_inputs.extend(refs.iter().map(|&i| caches.feats[i].clone()));
    let mut positions = Vec::with_capacity(n);
    positions.push(Point2::new(0.0, 0.0));
    positions.extend(refs.iter().map(|&i| db.entry(i).position));
    Ok(QueryGraph { node_inputs, positions, edge_weights, query_truth: None })
}

/// Forward pass returning the prediction for an already-built graph (used by
/// tests and the benchmark harness).
pub fn localize_graph(model: &LocModel, graph: &QueryGraph) -> Result<Point2> {
    let mut tape = crate::nn::Tape::new();
    let vals = LocValues::load(&mut tape, &model.params, &model.cfg)?;
    let pred = forward_graph(&mut tape, &vals, &model.cfg, graph)?;
    let out = tape.value(pred);
    Ok(Point2::new(out.data[0], out.data[1]))
}
