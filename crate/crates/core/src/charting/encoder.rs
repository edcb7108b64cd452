//! Channel-chart encoder: featurization, parameter layout, forward pass.
//!
//! The encoder consumes stacked per-BS ADP magnitude profiles (per-sample
//! max-normalized), runs two 3x3 stride-2 convolutions, then an MLP head to
//! the embedding dimension. The same backbone (with a different head width)
//! doubles as the localizer's CSI featurizer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{adp_transform, AdpProfile};
use crate::nn::{glorot_uniform, load_params, save_params, validate_params, Params, Tape, Tensor, Value};
use crate::rng;
use crate::sim::CsiTensor;

/// Point in the learned chart, in chart coordinates (dimensionless).
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dist(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Architecture and training hyperparameters of a chart encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// (n_bs, n_rx, n_sc) of the CSI this encoder accepts.
    pub input_shape: (usize, usize, usize),
    /// Channel widths of the two stride-2 convolutions.
    pub conv_channels: (usize, usize),
    /// Width of the first MLP layer.
    pub hidden: usize,
    /// Embedding dimension d.
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_shape: (usize, usize, usize)) -> Self {
        Self {
            input_shape,
            conv_channels: (8, 16),
            hidden: 128,
            embed_dim: 2,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be >= 2".into()));
        }
        if self.conv_channels.0 < 1 || self.conv_channels.1 < 1 || self.hidden < 1 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn conv_out(dim: usize) -> usize {
        // kernel 3, stride 2, padding 1
        (dim + 2 - 3) / 2 + 1
    }

    /// Flattened size after the two convolutions.
    pub fn flat_len(&self) -> usize {
        let (_, h, w) = self.input_shape;
        let h2 = Self::conv_out(Self::conv_out(h));
        let w2 = Self::conv_out(Self::conv_out(w));
        self.conv_channels.1 * h2 * w2
    }
}

/// Which self-supervised objective trained a chart.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartVariant {
    Autoencoder,
    Siamese,
    Triplet,
}

impl ChartVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChartVariant::Autoencoder => "autoencoder",
            ChartVariant::Siamese => "siamese",
            ChartVariant::Triplet => "triplet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "autoencoder" => Ok(ChartVariant::Autoencoder),
            "siamese" => Ok(ChartVariant::Siamese),
            "triplet" => Ok(ChartVariant::Triplet),
            other => Err(Error::Config(format!("unknown chart variant {other:?}"))),
        }
    }
}

/// Encoder input: stacked per-BS ADP magnitude profiles, max-normalized so
/// the features are invariant to positive per-sample scaling (and to global
/// phase, which the magnitudes already removed).
pub fn featurize(csi: &CsiTensor) -> Tensor {
    featurize_profiles(&adp_transform(csi), csi.shape())
}

/// Same featurization starting from precomputed profiles.
pub fn featurize_profiles(profiles: &[AdpProfile], shape: (usize, usize, usize)) -> Tensor {
    let (n_bs, n_rx, n_sc) = shape;
    let mut data = Vec::with_capacity(n_bs * n_rx * n_sc);
    for p in profiles {
        data.extend_from_slice(&p.data);
    }
    let max = data.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in data.iter_mut() {
            *v /= max;
        }
    }
    Tensor::from_vec(&[n_bs, n_rx, n_sc], data)
}

/// Parameter names and shapes of the conv+MLP backbone under `prefix`, with
/// the final layer mapping to `out_dim`.
pub fn backbone_shapes(cfg: &EncoderConfig, prefix: &str, out_dim: usize) -> Vec<(String, Vec<usize>)> {
    let (n_bs, _, _) = cfg.input_shape;
    let (c1, c2) = cfg.conv_channels;
    vec![
        (format!("{prefix}.conv1.w"), vec![c1, n_bs, 3, 3]),
        (format!("{prefix}.conv1.b"), vec![c1]),
        (format!("{prefix}.conv2.w"), vec![c2, c1, 3, 3]),
        (format!("{prefix}.conv2.b"), vec![c2]),
        (format!("{prefix}.fc1.w"), vec![cfg.flat_len(), cfg.hidden]),
        (format!("{prefix}.fc1.b"), vec![cfg.hidden]),
        (format!("{prefix}.fc2.w"), vec![cfg.hidden, out_dim]),
        (format!("{prefix}.fc2.b"), vec![out_dim]),
    ]
}

/// Initialize backbone parameters: Glorot-uniform weights, zero biases.
pub fn init_backbone(
    params: &mut Params,
    cfg: &EncoderConfig,
    prefix: &str,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (n_bs, _, _) = cfg.input_shape;
    let (c1, c2) = cfg.conv_channels;
    park(params, format!("{prefix}.conv1.w"), glorot_uniform(&[c1, n_bs, 3, 3], n_bs * 9, c1 * 9, rng))?;
    park(params, format!("{prefix}.conv1.b"), Tensor::zeros(&[c1]))?;
    park(params, format!("{prefix}.conv2.w"), glorot_uniform(&[c2, c1, 3, 3], c1 * 9, c2 * 9, rng))?;
    park(params, format!("{prefix}.conv2.b"), Tensor::zeros(&[c2]))?;
    let flat = cfg.flat_len();
    park(params, format!("{prefix}.fc1.w"), glorot_uniform(&[flat, cfg.hidden], flat, cfg.hidden, rng))?;
    park(params, format!("{prefix}.fc1.b"), Tensor::zeros(&[cfg.hidden]))?;
    park(params, format!("{prefix}.fc2.w"), glorot_uniform(&[cfg.hidden, out_dim], cfg.hidden, out_dim, rng))?;
    park(params, format!("{prefix}.fc2.b"), Tensor::zeros(&[out_dim]))?;
    Ok(())
}

fn park(params: &mut Params, name: String, t: Tensor) -> Result<()> {
    params.add(name, t).map(|_| ())
}

/// Backbone parameters loaded onto a tape once, so many forward passes on
/// the same tape share one leaf per parameter (gradients accumulate there).
#[derive(Copy, Clone)]
pub struct BackboneValues {
    conv1w: Value,
    conv1b: Value,
    conv2w: Value,
    conv2b: Value,
    fc1w: Value,
    fc1b: Value,
    fc2w: Value,
    fc2b: Value,
}

impl BackboneValues {
    pub fn load(tape: &mut Tape, params: &Params, prefix: &str) -> Result<Self> {
        Ok(Self {
            conv1w: tape.param(params, &format!("{prefix}.conv1.w"))?,
            conv1b: tape.param(params, &format!("{prefix}.conv1.b"))?,
            conv2w: tape.param(params, &format!("{prefix}.conv2.w"))?,
            conv2b: tape.param(params, &format!("{prefix}.conv2.b"))?,
            fc1w: tape.param(params, &format!("{prefix}.fc1.w"))?,
            fc1b: tape.param(params, &format!("{prefix}.fc1.b"))?,
            fc2w: tape.param(params, &format!("{prefix}.fc2.w"))?,
            fc2b: tape.param(params, &format!("{prefix}.fc2.b"))?,
        })
    }
}

/// Backbone forward: conv(s2) ELU, conv(s2) ELU, flatten, MLP ELU, linear.
/// Returns a (1 x out_dim) row.
pub fn backbone_forward_values(tape: &mut Tape, vals: &BackboneValues, input: Value) -> Result<Value> {
    let c1 = tape.conv2d(input, vals.conv1w, vals.conv1b, 2, 1)?;
    let a1 = tape.elu(c1);
    let c2 = tape.conv2d(a1, vals.conv2w, vals.conv2b, 2, 1)?;
    let a2 = tape.elu(c2);
    let flat_len = tape.value(a2).len();
    let flat = tape.reshape(a2, &[1, flat_len])?;
    let h = tape.matmul(flat, vals.fc1w)?;
    let h = tape.add_row_bias(h, vals.fc1b)?;
    let h = tape.elu(h);
    let out = tape.matmul(h, vals.fc2w)?;
    tape.add_row_bias(out, vals.fc2b)
}

/// Convenience wrapper: load parameters and run one forward pass.
pub fn backbone_forward(
    tape: &mut Tape,
    params: &Params,
    prefix: &str,
    input: Value,
) -> Result<Value> {
    let vals = BackboneValues::load(tape, params, prefix)?;
    backbone_forward_values(tape, &vals, input)
}

/// A trained (or freshly initialized) chart encoder.
#[derive(Clone, Debug)]
pub struct ChartModel {
    pub variant: ChartVariant,
    pub cfg: EncoderConfig,
    pub params: Params,
}

pub(crate) const ENC_PREFIX: &str = "enc";

impl ChartModel {
    /// Fresh encoder with seeded initialization (no decoder parameters).
    pub fn init(variant: ChartVariant, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "chart-init");
        let mut params = Params::new();
        init_backbone(&mut params, &cfg, ENC_PREFIX, cfg.embed_dim, &mut rng)?;
        Ok(Self { variant, cfg, params })
    }

    pub fn expected_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        backbone_shapes(cfg, ENC_PREFIX, cfg.embed_dim)
    }

    fn check_shape(&self, csi: &CsiTensor) -> Result<()> {
        if csi.shape() != self.cfg.input_shape {
            return Err(Error::Config(format!(
                "CSI shape {:?} does not match encoder input {:?}",
                csi.shape(),
                self.cfg.input_shape
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass CSI -> chart embedding.
    pub fn encode(&self, csi: &CsiTensor) -> Result<Embedding> {
        self.check_shape(csi)?;
        self.encode_featurized(&featurize(csi))
    }

    /// Forward pass starting from an already-featurized input.
    pub fn encode_featurized(&self, feat: &Tensor) -> Result<Embedding> {
        let mut tape = Tape::new();
        let x = tape.constant(feat.clone());
        let z = backbone_forward(&mut tape, &self.params, ENC_PREFIX, x)?;
        Ok(Embedding(tape.value(z).data.clone()))
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "chart",
            "variant": self.variant.as_str(),
            "config": self.cfg,
        });
        save_params(path, &self.params, &meta)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let (params, meta) = load_params(path)?;
        if meta["kind"] != "chart" {
            return Err(Error::Format(format!(
                "checkpoint kind {:?} is not a chart model",
                meta["kind"]
            )));
        }
        let variant = ChartVariant::parse(meta["variant"].as_str().unwrap_or_default())?;
        let cfg: EncoderConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("chart config block: {e}")))?;
        validate_params(&params, &Self::expected_shapes(&cfg))?;
        Ok(Self { variant, cfg, params })
    }
}
