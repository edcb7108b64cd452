//! Experiment configuration: one flat key=value file covering the scenario
//! and the training/evaluation knobs. Unknown keys are rejected by name.

use std::path::Path;

use chartloc_core::charting::ChartVariant;
use chartloc_core::error::{Error, Result};
use chartloc_core::sim::{parse_kv, SamplingMode, ScenarioConfig};
use chartloc_core::{EncoderConfig, LocConfig, RetrievalVariant};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    /// Total generated samples (charts train on all of them).
    pub n_total: usize,
    /// Leading slice of the dataset used as the labeled database; the rest
    /// is the test split.
    pub n_labeled: usize,
    pub chart_variant: ChartVariant,
    /// One of autoencoder|siamese|triplet|isomap|adp|real-location.
    pub retrieval_variant: String,
    pub k_ref: usize,
    pub chart_epochs: usize,
    pub chart_batch_size: usize,
    pub chart_lr: f64,
    pub loc_epochs: usize,
    pub loc_batch_size: usize,
    pub loc_lr: f64,
    pub enc_conv_channels: (usize, usize),
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub node_dim: usize,
    pub width_factor: f64,
    pub edge_bias: bool,
    pub triplet_margin: f64,
    pub sampling_mode: String,
    pub walk_step: f64,
    pub isomap_neighbors: usize,
    pub bench_queries: usize,
    pub bench_warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::desk_default(),
            n_total: 3000,
            n_labeled: 1000,
            chart_variant: ChartVariant::Siamese,
            retrieval_variant: "siamese".into(),
            k_ref: 20,
            chart_epochs: 30,
            chart_batch_size: 32,
            chart_lr: 1e-3,
            loc_epochs: 20,
            loc_batch_size: 32,
            loc_lr: 1e-3,
            enc_conv_channels: (8, 16),
            enc_hidden: 128,
            embed_dim: 2,
            node_dim: 256,
            width_factor: 0.25,
            edge_bias: false,
            triplet_margin: 1.0,
            sampling_mode: "uniform".into(),
            walk_step: 0.25,
            isomap_neighbors: 10,
            bench_queries: 100,
            bench_warmup: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key {key}: expected true/false, got {v:?}"))),
    }
}

impl ExperimentConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = Self::default();
        for (key, value) in parse_kv(&text)? {
            if cfg.scenario.set_key(&key, &value)? {
                continue;
            }
            cfg.set_key(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_total" => self.n_total = parse_num(key, value)?,
            "n_labeled" => self.n_labeled = parse_num(key, value)?,
            "chart_variant" => self.chart_variant = ChartVariant::parse(value)?,
            "retrieval_variant" => self.retrieval_variant = value.to_string(),
            "k_ref" => self.k_ref = parse_num(key, value)?,
            "chart_epochs" => self.chart_epochs = parse_num(key, value)?,
            "chart_batch_size" => self.chart_batch_size = parse_num(key, value)?,
            "chart_lr" => self.chart_lr = parse_num(key, value)?,
            "loc_epochs" => self.loc_epochs = parse_num(key, value)?,
            "loc_batch_size" => self.loc_batch_size = parse_num(key, value)?,
            "loc_lr" => self.loc_lr = parse_num(key, value)?,
            "enc_conv_channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!("key {key}: expected c1,c2")));
                }
                self.enc_conv_channels = (parse_num(key, parts[0])?, parse_num(key, parts[1])?);
            }
            "enc_hidden" => self.enc_hidden = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "node_dim" => self.node_dim = parse_num(key, value)?,
            "width_factor" => self.width_factor = parse_num(key, value)?,
            "edge_bias" => self.edge_bias = parse_bool(key, value)?,
            "triplet_margin" => self.triplet_margin = parse_num(key, value)?,
            "sampling_mode" => match value {
                "uniform" | "walk" => self.sampling_mode = value.to_string(),
                _ => {
                    return Err(Error::Config(format!(
                        "key {key}: expected uniform or walk, got {value:?}"
                    )))
                }
            },
            "walk_step" => self.walk_step = parse_num(key, value)?,
            "isomap_neighbors" => self.isomap_neighbors = parse_num(key, value)?,
            "bench_queries" => self.bench_queries = parse_num(key, value)?,
            "bench_warmup" => self.bench_warmup = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.n_labeled > self.n_total {
            return Err(Error::Config(format!(
                "n_labeled ({}) must not exceed n_total ({})",
                self.n_labeled, self.n_total
            )));
        }
        if self.k_ref >= self.n_labeled {
            return Err(Error::Config(format!(
                "k_ref ({}) must be below n_labeled ({})",
                self.k_ref, self.n_labeled
            )));
        }
        match self.retrieval_variant.as_str() {
            "autoencoder" | "siamese" | "triplet" | "isomap" | "adp" | "real-location" => {}
            other => {
                return Err(Error::Config(format!(
                    "retrieval_variant {other:?} is not one of \
                     autoencoder|siamese|triplet|isomap|adp|real-location"
                )))
            }
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingMode {
        match self.sampling_mode.as_str() {
            "walk" => SamplingMode::RandomWalk { step: self.walk_step },
            _ => SamplingMode::Uniform,
        }
    }

    pub fn encoder_config(&self, shape: (usize, usize, usize), seed: u64) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(shape);
        cfg.conv_channels = self.enc_conv_channels;
        cfg.hidden = self.enc_hidden;
        cfg.embed_dim = self.embed_dim;
        cfg.epochs = self.chart_epochs;
        cfg.batch_size = self.chart_batch_size;
        cfg.lr = self.chart_lr;
        cfg.seed = seed;
        cfg
    }

    pub fn loc_config(&self, shape: (usize, usize, usize), seed: u64) -> LocConfig {
        let mut cfg = LocConfig::new(shape);
        cfg.conv_channels = self.enc_conv_channels;
        cfg.hidden = self.enc_hidden;
        cfg.node_dim = self.node_dim;
        cfg.width_factor = self.width_factor;
        cfg.k_ref = self.k_ref;
        cfg.edge_bias = self.edge_bias;
        cfg.epochs = self.loc_epochs;
        cfg.batch_size = self.loc_batch_size;
        cfg.lr = self.loc_lr;
        cfg.seed = seed;
        cfg
    }

    /// Map the configured retrieval variant onto the core enum, checking
    /// chart-variant consistency for the learned charts.
    pub fn retrieval(&self, chart_variant: ChartVariant) -> Result<RetrievalVariant> {
        match self.retrieval_variant.as_str() {
            "autoencoder" | "siamese" | "triplet" => {
                let wanted = ChartVariant::parse(&self.retrieval_variant)?;
                if wanted != chart_variant {
                    return Err(Error::Config(format!(
                        "retrieval_variant {:?} needs a chart trained with that objective, \
                         but the checkpoint is {:?}",
                        self.retrieval_variant,
                        chart_variant.as_str()
                    )));
                }
                Ok(RetrievalVariant::Chart)
            }
            "isomap" => Ok(RetrievalVariant::Isomap { neighbors: self.isomap_neighbors }),
            "adp" => Ok(RetrievalVariant::Adp),
            "real-location" => Ok(RetrievalVariant::RealLocation),
            other => Err(Error::Config(format!("unknown retrieval variant {other:?}"))),
        }
    }
}
