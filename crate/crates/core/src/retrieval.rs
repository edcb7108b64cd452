//! Enhanced fingerprint database and the three retrieval paths: exact kNN in
//! the learned latent space, brute-force ADP retrieval (the high-complexity
//! upper bound), and the WKNN position baseline built on it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::charting::{ChartModel, Embedding};
use crate::error::{Error, Result};
use crate::features::{adp_transform, profiles_dissimilarity};
use crate::sim::{CsiTensor, LabeledSample, Point2};

/// Weight guard for exact-duplicate fingerprints in WKNN (1/d is undefined
/// at d = 0).
pub const WKNN_EPSILON: f64 = 1e-9;

/// One database entry: raw CSI fingerprint, its position, and its chart
/// embedding.
#[derive(Clone, Debug)]
pub struct DbEntry {
    pub csi: CsiTensor,
    pub position: Point2,
    pub embedding: Embedding,
}

/// Immutable fingerprint database extended with chart embeddings, plus a
/// reference to the encoder that produced them.
#[derive(Clone, Debug)]
pub struct FingerprintDb {
    entries: Vec<DbEntry>,
    /// Hex digest of the encoder parameters (provenance of the embeddings).
    pub encoder_digest: String,
    pub encoder_variant: String,
}

/// Which metric produced a retrieval result.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMetric {
    Latent,
    Adp,
}

/// Top-k retrieval outcome: distances sorted ascending, distinct indices,
/// ties broken by lower index.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub metric: RetrievalMetric,
}

/// Bounded selection of the k smallest (distance, index) pairs. Worst entry
/// at the heap top; ties resolved toward lower indices.
struct TopK {
    k: usize,
    heap: BinaryHeap<HeapItem>,
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    index: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    fn push(&mut self, dist: f64, index: usize) {
        self.heap.push(HeapItem { dist, index });
        if self.heap.len() > self.k {
            self.heap.pop();
        }
    }

    fn finish(self, metric: RetrievalMetric) -> RetrievalResult {
        let mut items = self.heap.into_vec();
        items.sort_by(|a, b| a.cmp(b));
        RetrievalResult {
            indices: items.iter().map(|i| i.index).collect(),
            distances: items.iter().map(|i| i.dist).collect(),
            metric,
        }
    }
}

impl FingerprintDb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &DbEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter().map(|e| &e.embedding)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::KOutOfRange { k, db_size: self.len() });
        }
        Ok(())
    }
}

/// Embed every labeled sample with the (frozen) chart encoder and store it
/// alongside CSI and position. Order is preserved.
pub fn build_db(samples: Vec<LabeledSample>, model: &ChartModel) -> Result<FingerprintDb> {
    if samples.is_empty() {
        return Err(Error::Config("cannot build an empty fingerprint database".into()));
    }
    let embeddings: Result<Vec<Embedding>> = samples
        .par_iter()
        .map(|s| model.encode(&s.csi))
        .collect();
    let embeddings = embeddings?;
    let entries = samples
        .into_iter()
        .zip(embeddings)
        .map(|(s, embedding)| DbEntry { csi: s.csi, position: s.position, embedding })
        .collect();
    Ok(FingerprintDb {
        entries,
        encoder_digest: hex(&model.params.digest()),
        encoder_variant: model.variant.as_str().to_string(),
    })
}

/// Exact k nearest entries by Euclidean distance in the latent space.
pub fn retrieve_latent(db: &FingerprintDb, z_query: &Embedding, k: usize) -> Result<RetrievalResult> {
    db.check_k(k)?;
    let mut top = TopK::new(k);
    for (i, e) in db.entries.iter().enumerate() {
        top.push(z_query.dist(&e.embedding), i);
    }
    Ok(top.finish(RetrievalMetric::Latent))
}

/// Exact k nearest entries by ADP dissimilarity, evaluated from raw CSI per
/// entry (the query-side transform is hoisted out of the scan). This is the
/// full-dimensional brute-force path the latent retrieval replaces.
pub fn retrieve_adp(db: &FingerprintDb, h_query: &CsiTensor, k: usize) -> Result<RetrievalResult> {
    db.check_k(k)?;
    let q_profiles = adp_transform(h_query);
    let mut top = TopK::new(k);
    for (i, e) in db.entries.iter().enumerate() {
        if !h_query.same_shape(&e.csi) {
            return Err(Error::ShapeMismatch {
                op: "retrieve_adp",
                detail: format!("query {:?} vs entry {i} {:?}", h_query.shape(), e.csi.shape()),
            });
        }
        let d = profiles_dissimilarity(&q_profiles, &adp_transform(&e.csi))?;
        top.push(d, i);
    }
    Ok(top.finish(RetrievalMetric::Adp))
}

/// As [`retrieve_adp`], but with the entry-side profiles precomputed. The
/// metric core is shared, so results are bit-identical; only the per-entry
/// transform cost is gone. `profiles` must align with the database entries.
pub fn retrieve_adp_cached(
    db: &FingerprintDb,
    profiles: &crate::features::SampleProfiles,
    q_profiles: &[crate::features::AdpProfile],
    k: usize,
) -> Result<RetrievalResult> {
    db.check_k(k)?;
    if profiles.len() != db.len() {
        return Err(Error::Config(format!(
            "profile cache has {} entries, database has {}",
            profiles.len(),
            db.len()
        )));
    }
    let mut top = TopK::new(k);
    for i in 0..db.len() {
        let d = profiles_dissimilarity(q_profiles, profiles.profiles(i))?;
        top.push(d, i);
    }
    Ok(top.finish(RetrievalMetric::Adp))
}

/// WKNN on cached entry profiles; values identical to [`wknn_estimate`].
pub fn wknn_estimate_cached(
    db: &FingerprintDb,
    profiles: &crate::features::SampleProfiles,
    q_profiles: &[crate::features::AdpProfile],
    k: usize,
) -> Result<Point2> {
    let result = retrieve_adp_cached(db, profiles, q_profiles, k)?;
    let neighbors: Vec<(f64, Point2)> = result
        .indices
        .iter()
        .zip(&result.distances)
        .map(|(&i, &d)| (d, db.entry(i).position))
        .collect();
    Ok(weighted_position(&neighbors))
}

/// Similarity-weighted average of positions, weights 1/(d + epsilon).
pub fn weighted_position(neighbors: &[(f64, Point2)]) -> Point2 {
    let mut wx = 0.0;
    let mut wy = 0.0;
    let mut wsum = 0.0;
    for (d, p) in neighbors {
        let w = 1.0 / (d + WKNN_EPSILON);
        wx += w * p.x;
        wy += w * p.y;
        wsum += w;
    }
    Point2::new(wx / wsum, wy / wsum)
}

/// WKNN baseline: k nearest by ADP dissimilarity, position estimated as the
/// similarity-weighted average of their coordinates.
pub fn wknn_estimate(db: &FingerprintDb, h_query: &CsiTensor, k: usize) -> Result<Point2> {
    let result = retrieve_adp(db, h_query, k)?;
    let neighbors: Vec<(f64, Point2)> = result
        .indices
        .iter()
        .zip(&result.distances)
        .map(|(&i, &d)| (d, db.entry(i).position))
        .collect();
    Ok(weighted_position(&neighbors))
}

// --- persistence -------------------------------------------------------------

/// Manifest tying the persisted database artifacts together.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DbManifest {
    pub dataset: String,
    pub dataset_sha256: String,
    pub embeddings: String,
    pub embeddings_sha256: String,
    pub chart_checkpoint: String,
    pub chart_sha256: String,
    pub encoder_variant: String,
    pub n_entries: usize,
    pub embed_dim: usize,
}

pub fn sha256_file<P: AsRef<Path>>(path: P) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// CSV dump `index,z0,z1,...` with round-trippable f64 formatting.
pub fn write_embeddings_csv<P: AsRef<Path>>(path: P, embeddings: &[Embedding]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = embeddings.first().map_or(2, |e| e.dim());
    let header: Vec<String> = (0..dim).map(|i| format!("z{i}")).collect();
    writeln!(w, "index,{}", header.join(","))?;
    for (i, e) in embeddings.iter().enumerate() {
        let coords: Vec<String> = e.0.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{i},{}", coords.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<P: AsRef<Path>>(path: P) -> Result<Vec<Embedding>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let idx: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("embeddings CSV line {}", lineno + 1)))?;
        if idx != lineno - 1 {
            return Err(Error::Format(format!(
                "embeddings CSV line {}: index {idx} out of order",
                lineno + 1
            )));
        }
        let coords: std::result::Result<Vec<f64>, _> = fields.map(|s| s.parse()).collect();
        let coords = coords.map_err(|e| Error::Format(format!("embeddings CSV line {}: {e}", lineno + 1)))?;
        out.push(Embedding(coords));
    }
    Ok(out)
}

pub fn write_manifest<P: AsRef<Path>>(path: P, manifest: &DbManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<DbManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charting::{ChartVariant, EncoderConfig};
    use crate::features::adp_dissimilarity;
    use crate::rng::stream;
    use num_complex::Complex64;
    use rand::Rng;

    fn random_sample(shape: (usize, usize, usize), seed: u64) -> LabeledSample {
        let mut rng = stream(seed, "retrieval-test");
        let mut csi = CsiTensor::zeros(shape.0, shape.1, shape.2);
        for v in csi.data.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        LabeledSample {
            csi,
            position: Point2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
        }
    }

    fn tiny_model() -> ChartModel {
        let mut cfg = EncoderConfig::new((1, 2, 8));
        cfg.conv_channels = (4, 8);
        cfg.hidden = 16;
        ChartModel::init(ChartVariant::Siamese, cfg).unwrap()
    }

    fn tiny_db(n: usize, seed: u64) -> (FingerprintDb, Vec<LabeledSample>, ChartModel) {
        let model = tiny_model();
        let samples: Vec<LabeledSample> = (0..n).map(|i| random_sample((1, 2, 8), seed + i as u64)).collect();
        let db = build_db(samples.clone(), &model).unwrap();
        (db, samples, model)
    }

    #[test]
    fn build_db_preserves_order_and_matches_direct_encode() {
        let (db, samples, model) = tiny_db(100, 1000);
        assert_eq!(db.len(), 100);
        let mut rng = stream(7, "spot");
        for _ in 0..5 {
            let i = rng.gen_range(0..100);
            let direct = model.encode(&samples[i].csi).unwrap();
            assert_eq!(db.entry(i).embedding, direct);
            assert_eq!(db.entry(i).position, samples[i].position);
        }
    }

    #[test]
    fn build_db_is_deterministic() {
        let (a, samples, model) = tiny_db(10, 2000);
        let b = build_db(samples, &model).unwrap();
        for i in 0..10 {
            assert_eq!(a.entry(i).embedding, b.entry(i).embedding);
        }
        assert_eq!(a.encoder_digest, b.encoder_digest);
    }

    #[test]
    fn single_sample_db() {
        let (db, samples, model) = tiny_db(1, 3000);
        assert_eq!(db.len(), 1);
        assert_eq!(db.entry(0).embedding, model.encode(&samples[0].csi).unwrap());
    }

    #[test]
    fn latent_query_equal_to_entry_returns_it_at_distance_zero() {
        let (db, _, _) = tiny_db(20, 4000);
        let z = db.entry(7).embedding.clone();
        let r = retrieve_latent(&db, &z, 1).unwrap();
        assert_eq!(r.indices, vec![7]);
        assert_eq!(r.distances, vec![0.0]);
    }

    #[test]
    fn latent_k_equal_db_size_is_total_ordering() {
        let (db, _, _) = tiny_db(15, 5000);
        let z = db.entry(0).embedding.clone();
        let r = retrieve_latent(&db, &z, 15).unwrap();
        assert_eq!(r.indices.len(), 15);
        let mut seen = r.indices.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..15).collect::<Vec<_>>());
        for w in r.distances.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    /// Independent oracle: full exhaustive sort by (distance, index).
    fn oracle_sort(dists: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..dists.len()).collect();
        idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        idx.truncate(k);
        let d = idx.iter().map(|&i| dists[i]).collect();
        (idx, d)
    }

    #[test]
    fn latent_matches_exhaustive_sort_oracle() {
        let (db, _, _) = tiny_db(500, 6000);
        let mut rng = stream(8, "latent-oracle");
        for _ in 0..50 {
            let z = Embedding(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let k = rng.gen_range(1..=20);
            let r = retrieve_latent(&db, &z, k).unwrap();
            let dists: Vec<f64> = db.embeddings().map(|e| z.dist(e)).collect();
            let (oi, od) = oracle_sort(&dists, k);
            assert_eq!(r.indices, oi);
            assert_eq!(r.distances, od);
        }
    }

    #[test]
    fn latent_tie_break_prefers_lower_index() {
        // Duplicate embeddings via duplicate samples.
        let model = tiny_model();
        let s = random_sample((1, 2, 8), 9000);
        let samples = vec![s.clone(), s.clone(), s];
        let db = build_db(samples, &model).unwrap();
        let z = db.entry(0).embedding.clone();
        let r = retrieve_latent(&db, &z, 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn adp_query_equal_to_entry_returns_it_at_distance_zero() {
        let (db, samples, _) = tiny_db(10, 7000);
        let r = retrieve_adp(&db, &samples[3].csi, 1).unwrap();
        assert_eq!(r.indices, vec![3]);
        assert_eq!(r.distances, vec![0.0]);
    }

    #[test]
    fn adp_scaled_query_returns_same_results() {
        let (db, samples, _) = tiny_db(30, 8000);
        let q = &samples[4].csi;
        let scaled = q.scaled(Complex64::new(3.5, 0.0));
        let a = retrieve_adp(&db, q, 5).unwrap();
        let b = retrieve_adp(&db, &scaled, 5).unwrap();
        assert_eq!(a.indices, b.indices);
        for (x, y) in a.distances.iter().zip(&b.distances) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn adp_matches_exhaustive_sort_oracle() {
        let (db, _, _) = tiny_db(80, 10_000);
        let mut rng = stream(9, "adp-oracle");
        for t in 0..10 {
            let q = random_sample((1, 2, 8), 20_000 + t).csi;
            let k = rng.gen_range(1..=10);
            let r = retrieve_adp(&db, &q, k).unwrap();
            let dists: Vec<f64> = db
                .entries()
                .iter()
                .map(|e| adp_dissimilarity(&q, &e.csi).unwrap())
                .collect();
            let (oi, od) = oracle_sort(&dists, k);
            assert_eq!(r.indices, oi);
            assert_eq!(r.distances, od);
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let (db, _, _) = tiny_db(5, 11_000);
        let z = db.entry(0).embedding.clone();
        assert!(matches!(
            retrieve_latent(&db, &z, 0),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            retrieve_latent(&db, &z, 6),
            Err(Error::KOutOfRange { .. })
        ));
    }

    #[test]
    fn wknn_on_in_db_query_returns_stored_position() {
        let (db, samples, _) = tiny_db(12, 12_000);
        let est = wknn_estimate(&db, &samples[5].csi, 1).unwrap();
        assert_eq!(est, samples[5].position);
    }

    #[test]
    fn wknn_equidistant_pair_gives_midpoint() {
        // Entry 1 is a scaled copy of entry 0, so both sit at the same ADP
        // distance from any query; the estimate is their midpoint.
        let model = tiny_model();
        let base = random_sample((1, 2, 8), 13_000);
        let mut twin = base.clone();
        twin.csi = base.csi.scaled(Complex64::new(2.0, 0.0));
        twin.position = Point2::new(base.position.x + 4.0, base.position.y - 2.0);
        let db = build_db(vec![base.clone(), twin.clone()], &model).unwrap();
        let query = random_sample((1, 2, 8), 13_500).csi;
        let est = wknn_estimate(&db, &query, 2).unwrap();
        let mid = Point2::new(
            (base.position.x + twin.position.x) / 2.0,
            (base.position.y + twin.position.y) / 2.0,
        );
        assert!((est.x - mid.x).abs() < 1e-9, "{est:?} vs {mid:?}");
        assert!((est.y - mid.y).abs() < 1e-9);
    }

    #[test]
    fn weighted_position_matches_hand_arithmetic() {
        let neighbors = vec![
            (0.1, Point2::new(1.0, 2.0)),
            (0.2, Point2::new(3.0, -1.0)),
            (0.4, Point2::new(-2.0, 5.0)),
        ];
        let est = weighted_position(&neighbors);
        // Independent recomputation.
        let w: Vec<f64> = neighbors.iter().map(|(d, _)| 1.0 / (d + WKNN_EPSILON)).collect();
        let wsum: f64 = w.iter().sum();
        let want_x = (w[0] * 1.0 + w[1] * 3.0 + w[2] * -2.0) / wsum;
        let want_y = (w[0] * 2.0 + w[1] * -1.0 + w[2] * 5.0) / wsum;
        assert!((est.x - want_x).abs() < 1e-12);
        assert!((est.y - want_y).abs() < 1e-12);
    }

    #[test]
    fn wknn_stays_inside_neighbor_bounding_box() {
        let (db, _, _) = tiny_db(25, 14_000);
        let mut rng = stream(10, "bbox");
        for t in 0..5 {
            let q = random_sample((1, 2, 8), 15_000 + t).csi;
            let r = retrieve_adp(&db, &q, 6).unwrap();
            let est = wknn_estimate(&db, &q, 6).unwrap();
            let xs: Vec<f64> = r.indices.iter().map(|&i| db.entry(i).position.x).collect();
            let ys: Vec<f64> = r.indices.iter().map(|&i| db.entry(i).position.y).collect();
            let eps = 1e-12;
            assert!(est.x >= xs.iter().cloned().fold(f64::INFINITY, f64::min) - eps);
            assert!(est.x <= xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + eps);
            assert!(est.y >= ys.iter().cloned().fold(f64::INFINITY, f64::min) - eps);
            assert!(est.y <= ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + eps);
            let _ = rng.gen::<u32>();
        }
    }

    #[test]
    fn embeddings_csv_roundtrip() {
        let embeddings = vec![
            Embedding(vec![0.123456789012345, -4.2]),
            Embedding(vec![1e-17, 2.5]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        write_embeddings_csv(&path, &embeddings).unwrap();
        let back = read_embeddings_csv(&path).unwrap();
        assert_eq!(back, embeddings);
    }

    #[test]
    fn manifest_roundtrip() {
        let m = DbManifest {
            dataset: "d.csids".into(),
            dataset_sha256: "a".repeat(64),
            embeddings: "e.csv".into(),
            embeddings_sha256: "b".repeat(64),
            chart_checkpoint: "c.nnck".into(),
            chart_sha256: "c".repeat(64),
            encoder_variant: "siamese".into(),
            n_entries: 10,
            embed_dim: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        write_manifest(&path, &m).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.n_entries, 10);
        assert_eq!(back.dataset_sha256, m.dataset_sha256);
    }

    #[test]
    fn sha256_detects_content_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        std::fs::write(&path, b"hello").unwrap();
        let a = sha256_file(&path).unwrap();
        std::fs::write(&path, b"hellp").unwrap();
        let b = sha256_file(&path).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn cached_adp_paths_match_brute_force_exactly() {
        let (db, _, _) = tiny_db(40, 16_000);
        let profiles = crate::features::SampleProfiles::compute(db.entries().iter().map(|e| &e.csi));
        for t in 0..5 {
            let q = random_sample((1, 2, 8), 17_000 + t).csi;
            let qp = crate::features::adp_transform(&q);
            let brute = retrieve_adp(&db, &q, 7).unwrap();
            let cached = retrieve_adp_cached(&db, &profiles, &qp, 7).unwrap();
            assert_eq!(brute, cached);
            let w1 = wknn_estimate(&db, &q, 7).unwrap();
            let w2 = wknn_estimate_cached(&db, &profiles, &qp, 7).unwrap();
            assert_eq!(w1, w2);
        }
    }
}
