//! Retrieval timing harness: database construction time plus per-query times
//! for latent retrieval (encode included), brute-force ADP retrieval, and
//! WKNN. Query loops run sequentially; callers pin the thread pool when
//! stable numbers matter.

use std::time::Instant;

use serde::Serialize;

use crate::charting::ChartModel;
use crate::error::{Error, Result};
use crate::retrieval::{build_db, retrieve_adp, retrieve_latent, wknn_estimate, FingerprintDb};
use crate::sim::LabeledSample;

#[derive(Clone, Debug, Serialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

impl TimingStats {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        Self { mean_ms: mean, std_ms: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodTiming {
    pub method: String,
    /// One-off database construction cost, where the method has one.
    pub construct_ms: Option<f64>,
    pub per_query: TimingStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub db_size: usize,
    pub csi_shape: (usize, usize, usize),
    pub k: usize,
    pub n_queries: usize,
    pub warmup: usize,
    pub methods: Vec<MethodTiming>,
    pub machine: MachineInfo,
}

impl BenchReport {
    pub fn method(&self, name: &str) -> Option<&MethodTiming> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn time_loop<F: FnMut(usize)>(n_queries: usize, warmup: usize, mut f: F) -> TimingStats {
    for i in 0..warmup {
        f(i);
    }
    let mut samples = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let start = Instant::now();
        f(warmup + i);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    TimingStats::from_samples(&samples)
}

/// Time the three retrieval paths over queries drawn from the dataset
/// (cycled if it is shorter than `n_queries + warmup`).
pub fn run_bench(
    samples: Vec<LabeledSample>,
    chart: &ChartModel,
    n_queries: usize,
    k: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if n_queries < 100 {
        return Err(Error::Config(format!(
            "benchmark needs >= 100 queries, got {n_queries}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::Config("benchmark needs a nonempty dataset".into()));
    }
    let csi_shape = samples[0].csi.shape();
    let queries: Vec<crate::sim::CsiTensor> = (0..(n_queries + warmup))
        .map(|i| samples[i % samples.len()].csi.clone())
        .collect();

    let construct_start = Instant::now();
    let db: FingerprintDb = build_db(samples, chart)?;
    let construct_ms = construct_start.elapsed().as_secs_f64() * 1e3;

    let latent = time_loop(n_queries, warmup, |i| {
        let z = chart.encode(&queries[i]).expect("encode");
        retrieve_latent(&db, &z, k).expect("latent retrieval");
    });
    let adp = time_loop(n_queries, warmup, |i| {
        retrieve_adp(&db, &queries[i], k).expect("adp retrieval");
    });
    let wknn = time_loop(n_queries, warmup, |i| {
        wknn_estimate(&db, &queries[i], k).expect("wknn");
    });

    Ok(BenchReport {
        db_size: db.len(),
        csi_shape,
        k,
        n_queries,
        warmup,
        methods: vec![
            MethodTiming {
                method: "latent".into(),
                construct_ms: Some(construct_ms),
                per_query: latent,
            },
            MethodTiming { method: "adp".into(), construct_ms: None, per_query: adp },
            MethodTiming { method: "wknn".into(), construct_ms: None, per_query: wknn },
        ],
        machine: MachineInfo::current(),
    })
}
