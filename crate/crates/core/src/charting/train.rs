//! Self-supervised chart training: autoencoder, Siamese, triplet.
//!
//! All three train the same backbone on featurized ADP inputs; they differ
//! only in the loss built per batch. Losses are exposed as free functions so
//! gradient checks can exercise exactly the training objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::charting::encoder::{
    backbone_forward_values, featurize, init_backbone, BackboneValues, ChartModel, ChartVariant,
    EncoderConfig, ENC_PREFIX,
};
use crate::error::{Error, Result};
use crate::features::DissimilarityMatrix;
use crate::nn::{glorot_uniform, AdamConfig, AdamState, Params, Tape, Tensor, Value};
use crate::rng;
use crate::sim::CsiTensor;

/// Weight guard for zero-distance pairs in the Siamese loss.
pub const RHO_EPSILON: f64 = 1e-6;

const DEC_PREFIX: &str = "dec";

fn featurize_all(samples: &[CsiTensor], cfg: &EncoderConfig) -> Result<Vec<Tensor>> {
    for s in samples {
        if s.shape() != cfg.input_shape {
            return Err(Error::Config(format!(
                "sample shape {:?} does not match encoder input {:?}",
                s.shape(),
                cfg.input_shape
            )));
        }
    }
    use rayon::prelude::*;
    Ok(samples.par_iter().map(featurize).collect())
}

/// Encode a batch of featurized samples on one tape, deduplicating indices so
/// a sample appearing in several pairs/triplets is encoded once. Parameters
/// are loaded onto the tape once and shared by all forwards.
fn encode_batch(
    tape: &mut Tape,
    params: &Params,
    feats: &[Tensor],
    indices: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, Value>> {
    let vals = BackboneValues::load(tape, params, ENC_PREFIX)?;
    let mut out = BTreeMap::new();
    for idx in indices {
        if !out.contains_key(&idx) {
            let x = tape.constant(feats[idx].clone());
            let z = backbone_forward_values(tape, &vals, x)?;
            out.insert(idx, z);
        }
    }
    Ok(out)
}

/// Mean over the batch of the per-sample squared reconstruction error
/// `|x - dec(enc(x))|^2` (sum over entries).
pub fn autoencoder_batch_loss(
    tape: &mut Tape,
    params: &Params,
    feats: &[Tensor],
    batch: &[usize],
) -> Result<Value> {
    let vals = BackboneValues::load(tape, params, ENC_PREFIX)?;
    let w1 = tape.param(params, &format!("{DEC_PREFIX}.fc1.w"))?;
    let b1 = tape.param(params, &format!("{DEC_PREFIX}.fc1.b"))?;
    let w2 = tape.param(params, &format!("{DEC_PREFIX}.fc2.w"))?;
    let b2 = tape.param(params, &format!("{DEC_PREFIX}.fc2.b"))?;
    let mut total: Option<Value> = None;
    for &idx in batch {
        let x = tape.constant(feats[idx].clone());
        let z = backbone_forward_values(tape, &vals, x)?;
        let h = tape.matmul(z, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.elu(h);
        let recon = tape.matmul(h, w2)?;
        let recon = tape.add_row_bias(recon, b2)?;
        let flat_len = feats[idx].len();
        let target = tape.constant(Tensor::from_vec(&[1, flat_len], feats[idx].data.clone()));
        let diff = tape.sub(recon, target)?;
        let sq = tape.square(diff);
        let err = tape.sum(sq);
        total = Some(match total {
            None => err,
            Some(t) => tape.add(t, err)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Mean over pairs of `rho_ij (|z_i - z_j| - d_ij)^2`, rho = 1/(d + eps).
pub fn siamese_batch_loss(
    tape: &mut Tape,
    params: &Params,
    feats: &[Tensor],
    pairs: &[(usize, usize)],
    d: &DissimilarityMatrix,
) -> Result<Value> {
    let embeddings = encode_batch(
        tape,
        params,
        feats,
        pairs.iter().flat_map(|&(i, j)| [i, j]),
    )?;
    let mut total: Option<Value> = None;
    for &(i, j) in pairs {
        let d_ij = d.at(i, j);
        let rho = 1.0 / (d_ij + RHO_EPSILON);
        let diff = tape.sub(embeddings[&i], embeddings[&j])?;
        let dist = tape.l2_norm(diff);
        let gap = tape.add_const(dist, -d_ij);
        let sq = tape.square(gap);
        let weighted = tape.scale(sq, rho);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty pair batch".into()))?;
    Ok(tape.scale(total, 1.0 / pairs.len() as f64))
}

/// Mean over triplets of the hinge `[|z_a - z_p|^2 - |z_a - z_n|^2 + Q]_+`.
pub fn triplet_batch_loss(
    tape: &mut Tape,
    params: &Params,
    feats: &[Tensor],
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Value> {
    let embeddings = encode_batch(
        tape,
        params,
        feats,
        triplets.iter().flat_map(|&(a, p, n)| [a, p, n]),
    )?;
    let mut total: Option<Value> = None;
    for &(a, p, n) in triplets {
        let dp = tape.sub(embeddings[&a], embeddings[&p])?;
        let dp2 = tape.square(dp);
        let dp2 = tape.sum(dp2);
        let dn = tape.sub(embeddings[&a], embeddings[&n])?;
        let dn2 = tape.square(dn);
        let dn2 = tape.sum(dn2);
        let gap = tape.sub(dp2, dn2)?;
        let shifted = tape.add_const(gap, margin);
        let hinge = tape.relu(shifted);
        total = Some(match total {
            None => hinge,
            Some(t) => tape.add(t, hinge)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty triplet batch".into()))?;
    Ok(tape.scale(total, 1.0 / triplets.len() as f64))
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {loss} at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

/// Train the autoencoder chart. Returns the encoder-only model (decoder
/// parameters are dropped) and the per-epoch mean loss.
pub fn train_autoencoder(
    samples: &[CsiTensor],
    cfg: &EncoderConfig,
) -> Result<(ChartModel, Vec<f64>)> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config("autoencoder training needs >= 2 samples".into()));
    }
    let feats = featurize_all(samples, cfg)?;
    let mut init_rng = rng::stream(cfg.seed, "chart-init");
    let mut params = Params::new();
    init_backbone(&mut params, cfg, ENC_PREFIX, cfg.embed_dim, &mut init_rng)?;
    // The decoder reconstructs the flattened featurized input.
    let (n_bs, n_rx, n_sc) = cfg.input_shape;
    let input_len = n_bs * n_rx * n_sc;
    params.add(
        format!("{DEC_PREFIX}.fc1.w"),
        glorot_uniform(&[cfg.embed_dim, cfg.hidden], cfg.embed_dim, cfg.hidden, &mut init_rng),
    )?;
    params.add(format!("{DEC_PREFIX}.fc1.b"), Tensor::zeros(&[cfg.hidden]))?;
    params.add(
        format!("{DEC_PREFIX}.fc2.w"),
        glorot_uniform(&[cfg.hidden, input_len], cfg.hidden, input_len, &mut init_rng),
    )?;
    params.add(format!("{DEC_PREFIX}.fc2.b"), Tensor::zeros(&[input_len]))?;

    let mut adam = AdamState::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "chart-epochs");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let loss = autoencoder_batch_loss(&mut tape, &params, &feats, batch)?;
            let loss_v = tape.value(loss).item();
            check_finite(loss_v, epoch, bi)?;
            epoch_loss += loss_v * batch.len() as f64;
            let grads = tape.backward(loss, params.len())?;
            adam.step(&mut params, &grads)?;
        }
        epoch_loss /= samples.len() as f64;
        log::info!("autoencoder epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }

    // Strip the decoder: the chart model is encoder-only.
    let mut enc_params = Params::new();
    for p in params.iter() {
        if p.name.starts_with(ENC_PREFIX) {
            enc_params.add(p.name.clone(), p.value.clone())?;
        }
    }
    let model = ChartModel {
        variant: ChartVariant::Autoencoder,
        cfg: cfg.clone(),
        params: enc_params,
    };
    Ok((model, epoch_losses))
}

fn sample_pairs(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect()
}

/// Number of fixed pairs/triplets used to track the objective per epoch.
const EVAL_SET_CAP: usize = 256;

fn eval_siamese(
    params: &Params,
    feats: &[Tensor],
    pairs: &[(usize, usize)],
    d: &DissimilarityMatrix,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(64) {
        let mut tape = Tape::new();
        let loss = siamese_batch_loss(&mut tape, params, feats, chunk, d)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn eval_triplet(
    params: &Params,
    feats: &[Tensor],
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in triplets.chunks(64) {
        let mut tape = Tape::new();
        let loss = triplet_batch_loss(&mut tape, params, feats, chunk, margin)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / triplets.len() as f64)
}

/// Train the Siamese chart against a precomputed dissimilarity matrix.
/// Per epoch, `n_samples` pairs are drawn uniformly.
pub fn train_siamese(
    samples: &[CsiTensor],
    pairwise_d: &DissimilarityMatrix,
    cfg: &EncoderConfig,
) -> Result<(ChartModel, Vec<f64>)> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config("siamese training needs >= 2 samples".into()));
    }
    if pairwise_d.n != samples.len() {
        return Err(Error::Config(format!(
            "pairwise matrix is {}x{} but there are {} samples",
            pairwise_d.n,
            pairwise_d.n,
            samples.len()
        )));
    }
    let feats = featurize_all(samples, cfg)?;
    let mut model = ChartModel::init(ChartVariant::Siamese, cfg.clone())?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut pair_rng = rng::stream(cfg.seed, "siamese-pairs");
    // Fixed pair set for the per-epoch loss: training batches are resampled
    // every epoch, so the logged curve tracks the objective on one sample.
    let mut eval_rng = rng::stream(cfg.seed, "siamese-eval");
    let eval_pairs = sample_pairs(
        samples.len(),
        samples.len().min(EVAL_SET_CAP),
        &mut eval_rng,
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pairs = sample_pairs(samples.len(), samples.len(), &mut pair_rng);
        for (bi, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let loss = siamese_batch_loss(&mut tape, &model.params, &feats, batch, pairwise_d)?;
            check_finite(tape.value(loss).item(), epoch, bi)?;
            let grads = tape.backward(loss, model.params.len())?;
            adam.step(&mut model.params, &grads)?;
        }
        let epoch_loss = eval_siamese(&model.params, &feats, &eval_pairs, pairwise_d)?;
        log::info!("siamese epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }
    Ok((model, epoch_losses))
}

/// Sample (anchor, positive, negative) index triples: the anchor uniformly,
/// two distinct others, ordered by their dissimilarity to the anchor. Ties
/// are discarded (with a warning if any were).
pub fn mine_triplets(
    pairwise_d: &DissimilarityMatrix,
    n_triplets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let n = pairwise_d.n;
    if n < 3 {
        return Err(Error::Config(format!(
            "triplet mining needs >= 3 samples, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n_triplets);
    let mut discarded = 0usize;
    for _ in 0..n_triplets {
        let a = rng.gen_range(0..n);
        let mut x = rng.gen_range(0..n - 1);
        if x >= a {
            x += 1;
        }
        let mut y = x;
        while y == x {
            y = rng.gen_range(0..n - 1);
            if y >= a {
                y += 1;
            }
        }
        let (dx, dy) = (pairwise_d.at(a, x), pairwise_d.at(a, y));
        if dx < dy {
            out.push((a, x, y));
        } else if dy < dx {
            out.push((a, y, x));
        } else {
            discarded += 1;
        }
    }
    if discarded > 0 {
        log::warn!("mine_triplets: discarded {discarded} tied triplets");
    }
    Ok(out)
}

/// Train the triplet chart with hinge margin `margin` (chart units squared).
pub fn train_triplet(
    samples: &[CsiTensor],
    pairwise_d: &DissimilarityMatrix,
    cfg: &EncoderConfig,
    margin: f64,
) -> Result<(ChartModel, Vec<f64>)> {
    cfg.validate()?;
    if samples.len() < 3 {
        return Err(Error::Config("triplet training needs >= 3 samples".into()));
    }
    if pairwise_d.n != samples.len() {
        return Err(Error::Config(format!(
            "pairwise matrix is {}x{} but there are {} samples",
            pairwise_d.n,
            pairwise_d.n,
            samples.len()
        )));
    }
    let feats = featurize_all(samples, cfg)?;
    let mut model = ChartModel::init(ChartVariant::Triplet, cfg.clone())?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut mine_rng = rng::stream(cfg.seed, "triplet-mining");
    let mut eval_rng = rng::stream(cfg.seed, "triplet-eval");
    let eval_triplets = mine_triplets(
        pairwise_d,
        samples.len().min(EVAL_SET_CAP),
        &mut eval_rng,
    )?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let triplets = mine_triplets(pairwise_d, samples.len(), &mut mine_rng)?;
        if triplets.is_empty() {
            return Err(Error::Config(
                "triplet mining produced no usable triplets (all distances tied)".into(),
            ));
        }
        for (bi, batch) in triplets.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let loss = triplet_batch_loss(&mut tape, &model.params, &feats, batch, margin)?;
            check_finite(tape.value(loss).item(), epoch, bi)?;
            let grads = tape.backward(loss, model.params.len())?;
            adam.step(&mut model.params, &grads)?;
        }
        let epoch_loss = if eval_triplets.is_empty() {
            0.0
        } else {
            eval_triplet(&model.params, &feats, &eval_triplets, margin)?
        };
        log::info!("triplet epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }
    Ok((model, epoch_losses))
}
