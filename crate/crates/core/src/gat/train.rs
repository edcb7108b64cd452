//! Stage-two training of the localizer: the chart encoder stays frozen, the
//! reference sets per training query are retrieved leave-one-out from the
//! database once (they only depend on the frozen chart), and the graphs are
//! reused across epochs.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::charting::{featurize_profiles, ChartModel, IsomapChart};
use crate::error::{Error, Result};
use crate::features::{pairwise_from_profiles, DissimilarityMatrix, SampleProfiles};
use crate::gat::graph::{edge_weight_from_dissimilarity, QueryGraph};
use crate::gat::model::{forward_graph, LocConfig, LocModel, LocValues};
use crate::nn::{AdamConfig, AdamState, Tape, Tensor};
use crate::retrieval::FingerprintDb;
use crate::rng;
use crate::sim::Point2;

/// How reference points are retrieved for a query.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum RetrievalVariant {
    /// Euclidean kNN in the chart encoder's latent space.
    Chart,
    /// Non-parametric Isomap chart over the database; queries are embedded
    /// with the landmark extension.
    Isomap { neighbors: usize },
    /// Brute-force ADP dissimilarity retrieval.
    Adp,
    /// Retrieval by true physical distance: evaluation-only upper bound.
    RealLocation,
}

impl RetrievalVariant {
    pub fn label(&self) -> &'static str {
        match self {
            RetrievalVariant::Chart => "chart",
            RetrievalVariant::Isomap { .. } => "isomap",
            RetrievalVariant::Adp => "adp",
            RetrievalVariant::RealLocation => "real-location",
        }
    }
}

/// Top-k smallest entries of `dists` excluding `exclude`, ties by index.
pub(crate) fn top_k_excluding(dists: &[f64], exclude: Option<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len())
        .filter(|&i| Some(i) != exclude)
        .collect();
    idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Graph assembly from the cached dissimilarity matrix: bit-identical edge
/// weights to `build_graph`, without re-deriving profiles.
pub(crate) fn graph_from_matrix(
    feats: &[Tensor],
    matrix: &DissimilarityMatrix,
    nodes: &[usize],
    positions: Vec<Point2>,
    query_truth: Option<Point2>,
) -> QueryGraph {
    let n = nodes.len();
    let mut edge_weights = vec![0.0; n * n];
    for p in 0..n {
        for q in (p + 1)..n {
            let w = edge_weight_from_dissimilarity(matrix.at(nodes[p], nodes[q]));
            edge_weights[p * n + q] = w;
            edge_weights[q * n + p] = w;
        }
    }
    QueryGraph {
        node_inputs: nodes.iter().map(|&i| feats[i].clone()).collect(),
        positions,
        edge_weights,
        query_truth,
    }
}

/// Latent-space distances from one embedding to every database entry.
fn latent_distances(db: &FingerprintDb, z: &crate::charting::Embedding) -> Vec<f64> {
    db.embeddings().map(|e| z.dist(e)).collect()
}

pub(crate) struct TrainingCaches {
    pub profiles: SampleProfiles,
    pub feats: Vec<Tensor>,
    pub matrix: DissimilarityMatrix,
}

pub(crate) fn build_caches(db: &FingerprintDb) -> Result<TrainingCaches> {
    let profiles = SampleProfiles::compute(db.entries().iter().map(|e| &e.csi));
    let shape = db.entry(0).csi.shape();
    let feats: Vec<Tensor> = (0..db.len())
        .into_par_iter()
        .map(|i| featurize_profiles(profiles.profiles(i), shape))
        .collect();
    let matrix = pairwise_from_profiles(&profiles)?;
    Ok(TrainingCaches { profiles, feats, matrix })
}

/// Leave-one-out retrieval lists for every database entry under a variant.
fn neighbor_lists(
    db: &FingerprintDb,
    caches: &TrainingCaches,
    variant: RetrievalVariant,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    match variant {
        RetrievalVariant::Chart => Ok((0..db.len())
            .map(|j| {
                let dists = latent_distances(db, &db.entry(j).embedding);
                top_k_excluding(&dists, Some(j), k)
            })
            .collect()),
        RetrievalVariant::Adp => Ok((0..db.len())
            .map(|j| top_k_excluding(caches.matrix.row(j), Some(j), k))
            .collect()),
        RetrievalVariant::Isomap { neighbors } => {
            let chart = IsomapChart::fit(&caches.matrix, neighbors, 2)?;
            Ok((0..db.len())
                .map(|j| {
                    let dists: Vec<f64> = chart
                        .embeddings
                        .iter()
                        .map(|e| chart.embeddings[j].dist(e))
                        .collect();
                    top_k_excluding(&dists, Some(j), k)
                })
                .collect())
        }
        RetrievalVariant::RealLocation => Err(Error::Config(
            "real-location retrieval is an evaluation-only upper bound; \
             it cannot be used for training"
                .into(),
        )),
    }
}

/// The exact per-query graphs stage-two training runs on: leave-one-out
/// retrieval, query truth attached. Shared with tests so the training
/// configuration can be probed directly.
pub fn training_graphs(
    db: &FingerprintDb,
    k_ref: usize,
    variant: RetrievalVariant,
) -> Result<Vec<QueryGraph>> {
    let caches = build_caches(db)?;
    let lists = neighbor_lists(db, &caches, variant, k_ref)?;
    Ok((0..db.len())
        .map(|j| {
            let mut nodes = Vec::with_capacity(k_ref + 1);
            nodes.push(j);
            nodes.extend_from_slice(&lists[j]);
            let mut positions = Vec::with_capacity(nodes.len());
            positions.push(Point2::new(0.0, 0.0));
            positions.extend(lists[j].iter().map(|&i| db.entry(i).position));
            graph_from_matrix(
                &caches.feats,
                &caches.matrix,
                &nodes,
                positions,
                Some(db.entry(j).position),
            )
        })
        .collect())
}

/// Train the GAT localizer against a frozen chart encoder. Returns the model
/// and the per-epoch mean squared error. The chart parameters are asserted
/// bitwise-unchanged.
pub fn train_localizer(
    db: &FingerprintDb,
    chart: &ChartModel,
    cfg: &LocConfig,
    variant: RetrievalVariant,
) -> Result<(LocModel, Vec<f64>)> {
    cfg.validate()?;
    if cfg.k_ref >= db.len() {
        return Err(Error::Config(format!(
            "k_ref={} needs a database larger than k_ref+1, got {}",
            cfg.k_ref,
            db.len()
        )));
    }
    if db.entry(0).csi.shape() != cfg.input_shape {
        return Err(Error::Config(format!(
            "database CSI shape {:?} does not match localizer input {:?}",
            db.entry(0).csi.shape(),
            cfg.input_shape
        )));
    }
    let chart_digest_before = chart.params.digest();
    let graphs = training_graphs(db, cfg.k_ref, variant)?;

    let mut model = LocModel::init(cfg.clone())?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "loc-epochs");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vals = LocValues::load(&mut tape, &model.params, cfg)?;
            let mut batch_loss = None;
            for &j in batch {
                let graph = &graphs[j];
                let pred = forward_graph(&mut tape, &vals, cfg, graph)?;
                let truth = graph.query_truth.expect("training graphs carry truth");
                let t = tape.constant(Tensor::from_vec(&[1, 2], vec![truth.x, truth.y]));
                let diff = tape.sub(pred, t)?;
                let sq = tape.square(diff);
                let err = tape.sum(sq);
                batch_loss = Some(match batch_loss {
                    None => err,
                    Some(acc) => tape.add(acc, err)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "localizer loss is {loss_v} at epoch {epoch}, batch {bi}"
                )));
            }
            epoch_loss += loss_v * batch.len() as f64;
            let grads = tape.backward(loss, model.params.len())?;
            adam.step(&mut model.params, &grads)?;
        }
        epoch_loss /= graphs.len() as f64;
        log::info!("localizer epoch {epoch}: mse {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }

    assert_eq!(
        chart.params.digest(),
        chart_digest_before,
        "stage-two training must not touch the chart encoder"
    );
    Ok((model, epoch_losses))
}
