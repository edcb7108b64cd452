//! Subcommand implementations. Artifacts use fixed names inside the output
//! directory so the stages chain without extra flags: dataset.csids,
//! chart_<variant>.nnck, embeddings.csv + index.json, loc.nnck,
//! metrics.json (+ per_sample.csv), bench.json.

use std::path::{Path, PathBuf};

use chartloc_core::bench::run_bench;
use chartloc_core::charting::{train_autoencoder, train_siamese, train_triplet, ChartModel};
use chartloc_core::error::{Error, Result};
use chartloc_core::features::{adp_transform, pairwise_dissimilarity, SampleProfiles};
use chartloc_core::gat::{evaluate_with_variant, train_localizer, Evaluation};
use chartloc_core::retrieval::{
    build_db, sha256_file, wknn_estimate_cached, write_embeddings_csv, write_manifest, DbManifest,
};
use chartloc_core::sim::{generate_dataset, read_csids, write_csids};
use chartloc_core::{CsiTensor, LabeledSample, LocModel};
use rayon::prelude::*;

use crate::config::ExperimentConfig;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(config_path: &Path, seed_override: Option<u64>, out: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_file(config_path)?;
        if let Some(seed) = seed_override {
            cfg.scenario.rng_seed = seed;
        }
        std::fs::create_dir_all(out)?;
        Ok(Self { cfg, out: out.to_path_buf() })
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join("dataset.csids")
    }

    pub fn chart_path(&self) -> PathBuf {
        self.out
            .join(format!("chart_{}.nnck", self.cfg.chart_variant.as_str()))
    }

    pub fn loc_path(&self) -> PathBuf {
        self.out.join("loc.nnck")
    }

    fn load_dataset(&self) -> Result<Vec<LabeledSample>> {
        let path = self.dataset_path();
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing dataset {}; run `chartloc generate` first",
                path.display()
            )));
        }
        read_csids(path)
    }

    fn load_chart(&self) -> Result<ChartModel> {
        let path = self.chart_path();
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing chart checkpoint {}; run `chartloc train-chart` first",
                path.display()
            )));
        }
        ChartModel::load(path)
    }

    fn load_loc(&self) -> Result<LocModel> {
        let path = self.loc_path();
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing localizer checkpoint {}; run `chartloc train-loc` first",
                path.display()
            )));
        }
        LocModel::load(path)
    }

    /// Labeled (database) and test splits: the first n_labeled samples are
    /// the fingerprint database, the remainder is the test set.
    fn split(&self, samples: Vec<LabeledSample>) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
        let mut samples = samples;
        let n_lab = self.cfg.n_labeled.min(samples.len());
        let test = samples.split_off(n_lab);
        (samples, test)
    }
}

pub fn cmd_generate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = generate_dataset(&cfg.scenario, cfg.n_total, cfg.sampling())?;
    let path = ctx.dataset_path();
    write_csids(&path, &samples)?;
    let (n_bs, n_rx, n_sc) = samples[0].csi.shape();
    let snr_db = estimate_snr_db(&samples, cfg.scenario.noise_std);
    println!(
        "wrote {}: {} samples, shape ({n_bs}, {n_rx}, {n_sc}), est. SNR {}",
        path.display(),
        samples.len(),
        snr_db.map_or("inf (noiseless)".to_string(), |v| format!("{v:.1} dB")),
    );
    Ok(())
}

fn estimate_snr_db(samples: &[LabeledSample], noise_std: f64) -> Option<f64> {
    if noise_std <= 0.0 {
        return None;
    }
    let probe = samples.len().min(50);
    let mut power = 0.0;
    let mut count = 0usize;
    for s in &samples[..probe] {
        power += s.csi.data.iter().map(|c| c.norm_sqr()).sum::<f64>();
        count += s.csi.data.len();
    }
    let mean_power = power / count as f64;
    let noise_power = noise_std * noise_std;
    Some(10.0 * ((mean_power - noise_power).max(1e-300) / noise_power).log10())
}

pub fn cmd_train_chart(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = ctx.load_dataset()?;
    let csis: Vec<CsiTensor> = samples.into_iter().map(|s| s.csi).collect();
    let shape = csis[0].shape();
    let enc_cfg = cfg.encoder_config(shape, cfg.scenario.rng_seed);
    let (model, losses) = match cfg.chart_variant {
        chartloc_core::ChartVariant::Autoencoder => train_autoencoder(&csis, &enc_cfg)?,
        chartloc_core::ChartVariant::Siamese => {
            let d = pairwise_dissimilarity(&csis)?;
            train_siamese(&csis, &d, &enc_cfg)?
        }
        chartloc_core::ChartVariant::Triplet => {
            let d = pairwise_dissimilarity(&csis)?;
            train_triplet(&csis, &d, &enc_cfg, cfg.triplet_margin)?
        }
    };
    let path = ctx.chart_path();
    model.save(&path)?;
    println!(
        "wrote {}: {} chart, {} epochs, final loss {:.6}",
        path.display(),
        cfg.chart_variant.as_str(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

pub fn cmd_build_index(ctx: &Ctx) -> Result<()> {
    let samples = ctx.load_dataset()?;
    let chart = ctx.load_chart()?;
    let (labeled, _) = ctx.split(samples);
    let db = build_db(labeled, &chart)?;
    let embeddings: Vec<_> = db.embeddings().cloned().collect();
    let emb_path = ctx.out.join("embeddings.csv");
    write_embeddings_csv(&emb_path, &embeddings)?;
    let manifest = DbManifest {
        dataset: file_name(&ctx.dataset_path()),
        dataset_sha256: sha256_file(ctx.dataset_path())?,
        embeddings: file_name(&emb_path),
        embeddings_sha256: sha256_file(&emb_path)?,
        chart_checkpoint: file_name(&ctx.chart_path()),
        chart_sha256: sha256_file(ctx.chart_path())?,
        encoder_variant: db.encoder_variant.clone(),
        n_entries: db.len(),
        embed_dim: embeddings.first().map_or(0, |e| e.dim()),
    };
    let manifest_path = ctx.out.join("index.json");
    write_manifest(&manifest_path, &manifest)?;
    println!(
        "wrote {} and {}: {} entries",
        emb_path.display(),
        manifest_path.display(),
        db.len()
    );
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn cmd_train_loc(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = ctx.load_dataset()?;
    let chart = ctx.load_chart()?;
    let (labeled, _) = ctx.split(samples);
    let shape = labeled[0].csi.shape();
    let db = build_db(labeled, &chart)?;
    let variant = cfg.retrieval(chart.variant)?;
    let loc_cfg = cfg.loc_config(shape, cfg.scenario.rng_seed);
    let (model, losses) = train_localizer(&db, &chart, &loc_cfg, variant)?;
    let path = ctx.loc_path();
    model.save(&path)?;
    println!(
        "wrote {}: {} epochs, final mse {:.6}",
        path.display(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

pub fn cmd_evaluate(ctx: &Ctx, per_sample: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = ctx.load_dataset()?;
    let chart = ctx.load_chart()?;
    let model = ctx.load_loc()?;
    let (labeled, test) = ctx.split(samples);
    if test.is_empty() {
        return Err(Error::Config(
            "no test samples: n_labeled covers the whole dataset".into(),
        ));
    }
    let db = build_db(labeled, &chart)?;
    let variant = cfg.retrieval(chart.variant)?;
    let eval = evaluate_with_variant(&model, &chart, &db, &test, cfg.k_ref, variant)?;
    let wknn = wknn_metrics(&db, &test, cfg.k_ref)?;

    let json = serde_json::json!({
        "mae": eval.mae,
        "p50": eval.p50,
        "p90": eval.p90,
        "n_test": eval.n_test,
        "retrieval_variant": cfg.retrieval_variant,
        "k": eval.k,
        "wknn": {
            "mae": wknn.0,
            "p50": wknn.1,
            "p90": wknn.2,
        },
    });
    let metrics_path = ctx.out.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&json).unwrap())?;
    if per_sample {
        write_per_sample_csv(&ctx.out.join("per_sample.csv"), &eval)?;
    }
    println!(
        "wrote {}: MAE {:.4} m (p50 {:.4}, p90 {:.4}) vs WKNN MAE {:.4} m",
        metrics_path.display(),
        eval.mae,
        eval.p50,
        eval.p90,
        wknn.0
    );
    Ok(())
}

/// WKNN baseline on the same split; cached entry profiles, identical values
/// to per-query `wknn_estimate` calls.
fn wknn_metrics(
    db: &chartloc_core::FingerprintDb,
    test: &[LabeledSample],
    k: usize,
) -> Result<(f64, f64, f64)> {
    let profiles = SampleProfiles::compute(db.entries().iter().map(|e| &e.csi));
    let errors: Result<Vec<f64>> = test
        .par_iter()
        .map(|s| {
            let qp = adp_transform(&s.csi);
            let est = wknn_estimate_cached(db, &profiles, &qp, k)?;
            Ok(est.dist(&s.position))
        })
        .collect();
    let mut errors = errors?;
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    errors.sort_by(f64::total_cmp);
    let p50 = chartloc_core::gat::percentile(&errors, 0.5);
    let p90 = chartloc_core::gat::percentile(&errors, 0.9);
    Ok((mae, p50, p90))
}

fn write_per_sample_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,x_true,y_true,x_hat,y_hat,error")?;
    for p in &eval.per_sample {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.index, p.truth.x, p.truth.y, p.estimate.x, p.estimate.y, p.error
        )?;
    }
    Ok(())
}

pub fn cmd_bench(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = ctx.load_dataset()?;
    let chart = ctx.load_chart()?;
    let (labeled, _) = ctx.split(samples);
    let report = run_bench(labeled, &chart, cfg.bench_queries, cfg.k_ref, cfg.bench_warmup)?;
    let path = ctx.out.join("bench.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    for m in &report.methods {
        println!(
            "{:>8}: {:.3} +- {:.3} ms/query{}",
            m.method,
            m.per_query.mean_ms,
            m.per_query.std_ms,
            m.construct_ms
                .map_or(String::new(), |c| format!(" (construct {c:.1} ms)")),
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
