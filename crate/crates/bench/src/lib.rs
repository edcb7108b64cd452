//! Shared fixtures for the criterion benches: small deterministic scenes and
//! prebuilt fingerprint databases.

use chartloc_core::charting::{ChartModel, ChartVariant, EncoderConfig};
use chartloc_core::retrieval::{build_db, FingerprintDb};
use chartloc_core::sim::{generate_dataset, SamplingMode, ScenarioConfig};

/// Deterministic scene with the requested CSI dimensions.
pub fn scenario(n_bs: usize, n_rx: usize, n_sc: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk_default();
    cfg.n_bs = n_bs;
    cfg.n_rx = n_rx;
    cfg.n_sc = n_sc;
    let mut positions = Vec::with_capacity(n_bs);
    let mut orientations = Vec::with_capacity(n_bs);
    for b in 0..n_bs {
        let angle = b as f64 / n_bs as f64 * std::f64::consts::TAU;
        positions.push(chartloc_core::Point2::new(
            10.0 + 14.0 * angle.cos(),
            10.0 + 14.0 * angle.sin(),
        ));
        orientations.push(angle + std::f64::consts::PI);
    }
    cfg.bs_positions = positions;
    cfg.bs_orientations = orientations;
    cfg.rng_seed = 99;
    cfg
}

/// Freshly initialized (untrained) chart for the scene; retrieval timing does
/// not depend on training quality.
pub fn chart_for(cfg: &ScenarioConfig) -> ChartModel {
    let enc = EncoderConfig::new((cfg.n_bs, cfg.n_rx, cfg.n_sc));
    ChartModel::init(ChartVariant::Siamese, enc).expect("valid encoder config")
}

/// Database of `n` samples plus held-out query CSI tensors.
pub fn db_and_queries(
    cfg: &ScenarioConfig,
    n: usize,
    n_queries: usize,
) -> (FingerprintDb, ChartModel, Vec<chartloc_core::CsiTensor>) {
    let samples = generate_dataset(cfg, n + n_queries, SamplingMode::Uniform).expect("generate");
    let mut samples = samples;
    let queries = samples.split_off(n).into_iter().map(|s| s.csi).collect();
    let chart = chart_for(cfg);
    let db = build_db(samples, &chart).expect("build db");
    (db, chart, queries)
}
