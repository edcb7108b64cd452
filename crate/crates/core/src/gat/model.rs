//! Graph-attention localization network.
//!
//! Node features start as Phi1(CSI features) + Phi2(position), pass through
//! three multi-head GAT layers (attention scores LeakyReLU(0.2), softmax over
//! the other nodes, ELU updates, heads concatenated), and the query node's
//! final representation is projected to 2D coordinates by a linear head.

use serde::{Deserialize, Serialize};

use crate::charting::{
    backbone_forward_values, backbone_shapes, init_backbone, BackboneValues, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::gat::graph::QueryGraph;
use crate::nn::{
    glorot_uniform, load_params, save_params, validate_params, Params, Tape, Tensor, Value,
};
use crate::rng;
use crate::sim::Point2;

/// Negative slope of the attention-score nonlinearity.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// Shape of one GAT layer: input width, head count, per-head output width.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GatLayerSpec {
    pub f_in: usize,
    pub heads: usize,
    pub f_head: usize,
}

impl GatLayerSpec {
    pub fn out_dim(&self) -> usize {
        self.heads * self.f_head
    }
}

/// Localizer architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocConfig {
    /// (n_bs, n_rx, n_sc) of the CSI fingerprints.
    pub input_shape: (usize, usize, usize),
    /// Conv widths of the Phi1 featurizer backbone.
    pub conv_channels: (usize, usize),
    /// Hidden width of the Phi1 MLP.
    pub hidden: usize,
    /// Node representation width (Phi1 and Phi2 output).
    pub node_dim: usize,
    /// Scale applied to the intermediate GAT layer widths; 1.0 is the full
    /// architecture (256 -> 512/4h -> 2048/8h -> 64/1h -> 2).
    pub width_factor: f64,
    /// Number of retrieved reference points per query.
    pub k_ref: usize,
    /// Add log(edge weight) to the attention scores before the softmax.
    pub edge_bias: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl LocConfig {
    pub fn new(input_shape: (usize, usize, usize)) -> Self {
        Self {
            input_shape,
            conv_channels: (8, 16),
            hidden: 128,
            node_dim: 256,
            width_factor: 0.25,
            k_ref: 20,
            edge_bias: false,
            epochs: 25,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_dim < 1 || self.hidden < 1 {
            return Err(Error::Config("node_dim and hidden must be >= 1".into()));
        }
        if self.width_factor <= 0.0 {
            return Err(Error::Config("width_factor must be positive".into()));
        }
        if self.k_ref < 1 {
            return Err(Error::Config("k_ref must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// The three GAT layers: base widths 512 and 2048 scale with
    /// `width_factor`; the last layer always narrows to 64.
    pub fn layer_specs(&self) -> Vec<GatLayerSpec> {
        let scaled = |base: usize, heads: usize| -> usize {
            (((base as f64 * self.width_factor).round() as usize) / heads).max(1)
        };
        let l1 = GatLayerSpec { f_in: self.node_dim, heads: 4, f_head: scaled(512, 4) };
        let l2 = GatLayerSpec { f_in: l1.out_dim(), heads: 8, f_head: scaled(2048, 8) };
        let l3 = GatLayerSpec { f_in: l2.out_dim(), heads: 1, f_head: 64 };
        vec![l1, l2, l3]
    }

    fn phi1_backbone_cfg(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(self.input_shape);
        cfg.conv_channels = self.conv_channels;
        cfg.hidden = self.hidden;
        cfg
    }
}

/// GAT localizer parameters: Phi1 featurizer, Phi2 position embedder, the
/// attention layers, and the regression head.
#[derive(Clone, Debug)]
pub struct LocModel {
    pub cfg: LocConfig,
    pub params: Params,
}

impl LocModel {
    pub fn init(cfg: LocConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "loc-init");
        let mut params = Params::new();
        init_backbone(&mut params, &cfg.phi1_backbone_cfg(), "phi1", cfg.node_dim, &mut rng)?;
        params.add("phi2.w", glorot_uniform(&[2, cfg.node_dim], 2, cfg.node_dim, &mut rng))?;
        params.add("phi2.b", Tensor::zeros(&[cfg.node_dim]))?;
        for (l, spec) in cfg.layer_specs().iter().enumerate() {
            let out = spec.out_dim();
            params.add(
                format!("gat{}.w", l + 1),
                glorot_uniform(&[spec.f_in, out], spec.f_in, out, &mut rng),
            )?;
            params.add(
                format!("gat{}.a", l + 1),
                glorot_uniform(&[spec.heads, 2 * spec.f_head], 2 * spec.f_head, 1, &mut rng),
            )?;
        }
        let head_in = cfg.layer_specs().last().unwrap().out_dim();
        params.add("head.w", glorot_uniform(&[head_in, 2], head_in, 2, &mut rng))?;
        params.add("head.b", Tensor::zeros(&[2]))?;
        Ok(Self { cfg, params })
    }

    pub fn expected_shapes(cfg: &LocConfig) -> Vec<(String, Vec<usize>)> {
        let mut shapes = backbone_shapes(&cfg.phi1_backbone_cfg(), "phi1", cfg.node_dim);
        shapes.push(("phi2.w".into(), vec![2, cfg.node_dim]));
        shapes.push(("phi2.b".into(), vec![cfg.node_dim]));
        for (l, spec) in cfg.layer_specs().iter().enumerate() {
            shapes.push((format!("gat{}.w", l + 1), vec![spec.f_in, spec.out_dim()]));
            shapes.push((format!("gat{}.a", l + 1), vec![spec.heads, 2 * spec.f_head]));
        }
        let head_in = cfg.layer_specs().last().unwrap().out_dim();
        shapes.push(("head.w".into(), vec![head_in, 2]));
        shapes.push(("head.b".into(), vec![2]));
        shapes
    }

    /// Deterministic forward pass graph -> 2D position estimate.
    pub fn localize(&self, graph: &QueryGraph) -> Result<Point2> {
        let mut tape = Tape::new();
        let vals = LocValues::load(&mut tape, &self.params, &self.cfg)?;
        let pred = forward_graph(&mut tape, &vals, &self.cfg, graph)?;
        let out = tape.value(pred);
        Ok(Point2::new(out.data[0], out.data[1]))
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "loc",
            "config": self.cfg,
        });
        save_params(path, &self.params, &meta)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let (params, meta) = load_params(path)?;
        if meta["kind"] != "loc" {
            return Err(Error::Format(format!(
                "checkpoint kind {:?} is not a localizer model",
                meta["kind"]
            )));
        }
        let cfg: LocConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("loc config block: {e}")))?;
        validate_params(&params, &Self::expected_shapes(&cfg))?;
        Ok(Self { cfg, params })
    }
}

/// Localizer parameters loaded onto one tape.
pub struct LocValues {
    phi1: BackboneValues,
    phi2w: Value,
    phi2b: Value,
    layers: Vec<(Value, Value, GatLayerSpec)>,
    headw: Value,
    headb: Value,
}

impl LocValues {
    pub fn load(tape: &mut Tape, params: &Params, cfg: &LocConfig) -> Result<Self> {
        let phi1 = BackboneValues::load(tape, params, "phi1")?;
        let phi2w = tape.param(params, "phi2.w")?;
        let phi2b = tape.param(params, "phi2.b")?;
        let mut layers = Vec::new();
        for (l, spec) in cfg.layer_specs().into_iter().enumerate() {
            let w = tape.param(params, &format!("gat{}.w", l + 1))?;
            let a = tape.param(params, &format!("gat{}.a", l + 1))?;
            layers.push((w, a, spec));
        }
        let headw = tape.param(params, "head.w")?;
        let headb = tape.param(params, "head.b")?;
        Ok(Self { phi1, phi2w, phi2b, layers, headw, headb })
    }
}

/// Initial node representations: Phi1(featurized CSI) + Phi2(position), with
/// the query's position slot already holding the zero placeholder.
pub fn node_init_on_tape(
    tape: &mut Tape,
    vals: &LocValues,
    graph: &QueryGraph,
) -> Result<Value> {
    let mut rows = Vec::with_capacity(graph.n_nodes());
    for (feat, pos) in graph.node_inputs.iter().zip(&graph.positions) {
        let x = tape.constant(feat.clone());
        let csi_feat = backbone_forward_values(tape, &vals.phi1, x)?;
        let p = tape.constant(Tensor::from_vec(&[1, 2], vec![pos.x, pos.y]));
        let pos_feat = tape.matmul(p, vals.phi2w)?;
        let pos_feat = tape.add_row_bias(pos_feat, vals.phi2b)?;
        rows.push(tape.add(csi_feat, pos_feat)?);
    }
    tape.concat(0, &rows)
}

/// Convenience wrapper evaluating the initial node features of a graph.
pub fn node_init(model: &LocModel, graph: &QueryGraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vals = LocValues::load(&mut tape, &model.params, &model.cfg)?;
    let x = node_init_on_tape(&mut tape, &vals, graph)?;
    Ok(tape.value(x).clone())
}

/// One multi-head GAT layer. Per head h with slice W_h of the shared weight:
/// scores e_kq = LeakyReLU(a_l . W_h x_k + a_r . W_h x_q) for q != k,
/// attention = row softmax, update x_k' = ELU(sum_q alpha_kq W_h x_q); head
/// outputs are concatenated. Returns the output and the per-head attention
/// matrices (diagonal exactly zero).
pub fn gat_layer_on_tape(
    tape: &mut Tape,
    w: Value,
    a: Value,
    spec: &GatLayerSpec,
    features: Value,
    edge_bias: Option<&Tensor>,
) -> Result<(Value, Vec<Value>)> {
    let (n, f_in) = tape.value(features).dims2();
    if n < 2 {
        return Err(Error::ShapeMismatch {
            op: "gat_layer",
            detail: format!("graph has {n} node(s); attention needs at least 2"),
        });
    }
    if f_in != spec.f_in {
        return Err(Error::ShapeMismatch {
            op: "gat_layer",
            detail: format!("features are {n}x{f_in}, layer expects f_in {}", spec.f_in),
        });
    }
    let xw = tape.matmul(features, w)?;
    let mut heads = Vec::with_capacity(spec.heads);
    let mut alphas = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let xw_h = tape.slice(xw, 1, h * spec.f_head, spec.f_head)?;
        let a_row = tape.slice(a, 0, h, 1)?;
        let a_l = tape.slice(a_row, 1, 0, spec.f_head)?;
        let a_r = tape.slice(a_row, 1, spec.f_head, spec.f_head)?;
        let a_l = tape.transpose(a_l)?;
        let a_r = tape.transpose(a_r)?;
        let s_l = tape.matmul(xw_h, a_l)?;
        let s_r = tape.matmul(xw_h, a_r)?;
        let mut scores = tape.outer_sum(s_l, s_r)?;
        scores = tape.leaky_relu(scores, ATTENTION_LEAKY_SLOPE);
        if let Some(bias) = edge_bias {
            let b = tape.constant(bias.clone());
            scores = tape.add(scores, b)?;
        }
        let masked = tape.fill_diag(scores, f64::NEG_INFINITY)?;
        let alpha = tape.softmax_rows(masked)?;
        let agg = tape.matmul(alpha, xw_h)?;
        heads.push(tape.elu(agg));
        alphas.push(alpha);
    }
    let out = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(1, &heads)?
    };
    Ok((out, alphas))
}

/// Public single-layer entry point reading parameters by name.
pub fn gat_layer(
    tape: &mut Tape,
    params: &Params,
    layer_index: usize,
    spec: &GatLayerSpec,
    features: Value,
    edge_bias: Option<&Tensor>,
) -> Result<(Value, Vec<Value>)> {
    let w = tape.param(params, &format!("gat{layer_index}.w"))?;
    let a = tape.param(params, &format!("gat{layer_index}.a"))?;
    gat_layer_on_tape(tape, w, a, spec, features, edge_bias)
}

fn edge_bias_tensor(graph: &QueryGraph) -> Tensor {
    let n = graph.n_nodes();
    Tensor::from_vec(
        &[n, n],
        graph.edge_weights.iter().map(|w| w.ln()).collect(),
    )
}

/// Full forward pass for one graph: node init, the GAT stack, then the head
/// projecting the query node to coordinates. Returns a (1 x 2) value.
pub fn forward_graph(
    tape: &mut Tape,
    vals: &LocValues,
    cfg: &LocConfig,
    graph: &QueryGraph,
) -> Result<Value> {
    if graph.n_nodes() < 2 {
        return Err(Error::ShapeMismatch {
            op: "forward_graph",
            detail: "graph needs the query plus at least one reference".into(),
        });
    }
    let bias = cfg.edge_bias.then(|| edge_bias_tensor(graph));
    let mut x = node_init_on_tape(tape, vals, graph)?;
    for (w, a, spec) in &vals.layers {
        let (next, _) = gat_layer_on_tape(tape, *w, *a, spec, x, bias.as_ref())?;
        x = next;
    }
    let query_row = tape.slice(x, 0, 0, 1)?;
    let out = tape.matmul(query_row, vals.headw)?;
    tape.add_row_bias(out, vals.headb)
}
