//! Model definition: hypergraph convolution layers with learnable hyperedge
//! weights, gated attention pooling, readout and a sigmoid classifier head.
//!
//! One forward pass builds one [`Graph`] (define-by-run): the subject's FC
//! rows enter as node features, each convolution layer applies
//! `relu(D^-1 H diag(w) B^-1 H^T X Theta)` with `w = softplus(raw)` so the
//! normalization stays well-posed for any raw value and the degrees `D` are
//! recomputed differentiably from the current weights, then gated attention
//! scores each node, a readout collapses the node matrix and a linear +
//! sigmoid head yields the class probability.
//!
//! # Checkpoint format (`HGAL`)
//!
//! Little-endian binary, bit-exact round trip:
//!
//! ```text
//! magic "HGAL" | version: u32 (= 1)
//! n_nodes: u32 | k: u32 | n_layers: u32
//! n_hidden: u32 | hidden_dims: u32 * n_hidden
//! att_hidden: u32 | readout_dim: u32
//! readout_kind: u8 (0 mlp, 1 mean, 2 max) | alpha_normalization: u8 (0 softmax, 1 none)
//! use_gated_attention: u8 | learn_edge_weights: u8
//! n_params: u32
//! then per parameter, in canonical order:
//!   rows: u32 | cols: u32 | rows*cols f64 values, row-major
//! ```
//!
//! Canonical parameter order: conv layer weights by layer, raw hyperedge
//! weights, gate sigmoid-branch weight/bias, gate tanh-branch weight/bias,
//! gate score weight/bias, readout weight/bias, classifier weight/bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Adjoints, GradCheckReport, Graph, NodeId};
use crate::binio::{format_err, io_err, LeReader};
use crate::error::{Error, Result};
use crate::hypergraph::{build_knn_hyperedges, FCMatrix, Hypergraph};
use crate::matrix::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HGAL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Raw hyperedge weights are initialized to `ln(e - 1)` so that
/// `softplus(raw) = 1` exactly: uniform weights, matching an unlearned
/// identity weight matrix.
pub fn softplus_inverse_of_one() -> f64 {
    // The rounded value of ln(e - 1) lands one ulp short of an exact
    // softplus of 1.0 under the stable evaluation x + ln_1p(exp(-x));
    // nudging one ulp up makes the round trip exact.
    f64::from_bits((std::f64::consts::E - 1.0).ln().to_bits() + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    /// Flatten node features in ROI order and apply one relu layer.
    /// Permutation non-invariant by construction.
    Mlp,
    /// Column means followed by a linear map.
    Mean,
    /// Column maxima followed by a linear map.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaNormalization {
    /// Softmax over nodes: attention lives on the probability simplex.
    Softmax,
    /// Raw scores, kept for ablation.
    None,
}

/// Architecture hyperparameters. These travel with the checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// ROIs per hyperedge.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    /// Output feature dimension of each convolution layer.
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_att_hidden")]
    pub att_hidden: usize,
    #[serde(default = "default_readout_dim")]
    pub readout_dim: usize,
    #[serde(default = "default_readout_kind")]
    pub readout_kind: ReadoutKind,
    #[serde(default = "default_alpha_normalization")]
    pub alpha_normalization: AlphaNormalization,
    /// When false, attention is forced uniform (1/N per node) and the gate
    /// parameters are left untouched.
    #[serde(default = "default_true")]
    pub use_gated_attention: bool,
    /// When false, raw hyperedge weights stay frozen at init, so the
    /// effective weights remain exactly 1.
    #[serde(default = "default_true")]
    pub learn_edge_weights: bool,
}

fn default_k() -> usize {
    8
}
fn default_n_layers() -> usize {
    1
}
fn default_hidden_dims() -> Vec<usize> {
    vec![64]
}
fn default_att_hidden() -> usize {
    32
}
fn default_readout_dim() -> usize {
    64
}
fn default_readout_kind() -> ReadoutKind {
    ReadoutKind::Mlp
}
fn default_alpha_normalization() -> AlphaNormalization {
    AlphaNormalization::Softmax
}
fn default_true() -> bool {
    true
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k: default_k(),
            n_layers: default_n_layers(),
            hidden_dims: default_hidden_dims(),
            att_hidden: default_att_hidden(),
            readout_dim: default_readout_dim(),
            readout_kind: default_readout_kind(),
            alpha_normalization: default_alpha_normalization(),
            use_gated_attention: true,
            learn_edge_weights: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Parameter("n_layers must be >= 1".into()));
        }
        if self.hidden_dims.len() != self.n_layers {
            return Err(Error::Parameter(format!(
                "hidden_dims has {} entries for {} layers",
                self.hidden_dims.len(),
                self.n_layers
            )));
        }
        if self.hidden_dims.iter().any(|&d| d == 0)
            || self.att_hidden == 0
            || self.readout_dim == 0
        {
            return Err(Error::Parameter("all layer dimensions must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Parameter(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }

    /// Feature dimension entering the attention/readout stage.
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated: n_layers >= 1")
    }
}

/// Identifier of one parameter matrix. Ordering is the canonical
/// checkpoint/optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Theta(usize),
    EdgeWeights,
    GateAWeight,
    GateABias,
    GateGWeight,
    GateGBias,
    GateScoreWeight,
    GateScoreBias,
    ReadoutWeight,
    ReadoutBias,
    ClassifierWeight,
    ClassifierBias,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamKey::Theta(d) => write!(f, "theta[{d}]"),
            ParamKey::EdgeWeights => write!(f, "edge_weights"),
            ParamKey::GateAWeight => write!(f, "gate_a.weight"),
            ParamKey::GateABias => write!(f, "gate_a.bias"),
            ParamKey::GateGWeight => write!(f, "gate_g.weight"),
            ParamKey::GateGBias => write!(f, "gate_g.bias"),
            ParamKey::GateScoreWeight => write!(f, "gate_score.weight"),
            ParamKey::GateScoreBias => write!(f, "gate_score.bias"),
            ParamKey::ReadoutWeight => write!(f, "readout.weight"),
            ParamKey::ReadoutBias => write!(f, "readout.bias"),
            ParamKey::ClassifierWeight => write!(f, "classifier.weight"),
            ParamKey::ClassifierBias => write!(f, "classifier.bias"),
        }
    }
}

/// Shapes of every parameter for a given architecture, in canonical order.
/// This is the single source of truth for initialization, flattening,
/// optimizer state and the checkpoint layout.
pub fn param_shapes(hyper: &HyperParams, n_nodes: usize) -> Vec<(ParamKey, usize, usize)> {
    let mut shapes = Vec::new();
    let mut f_in = n_nodes;
    for (d, &f_out) in hyper.hidden_dims.iter().enumerate() {
        shapes.push((ParamKey::Theta(d), f_in, f_out));
        f_in = f_out;
    }
    let f = hyper.feature_dim();
    shapes.push((ParamKey::EdgeWeights, n_nodes, 1));
    shapes.push((ParamKey::GateAWeight, f, hyper.att_hidden));
    shapes.push((ParamKey::GateABias, 1, hyper.att_hidden));
    shapes.push((ParamKey::GateGWeight, f, hyper.att_hidden));
    shapes.push((ParamKey::GateGBias, 1, hyper.att_hidden));
    shapes.push((ParamKey::GateScoreWeight, hyper.att_hidden, 1));
    shapes.push((ParamKey::GateScoreBias, 1, 1));
    let readout_in = match hyper.readout_kind {
        ReadoutKind::Mlp => n_nodes * f,
        ReadoutKind::Mean | ReadoutKind::Max => f,
    };
    shapes.push((ParamKey::ReadoutWeight, readout_in, hyper.readout_dim));
    shapes.push((ParamKey::ReadoutBias, 1, hyper.readout_dim));
    shapes.push((ParamKey::ClassifierWeight, hyper.readout_dim, 1));
    shapes.push((ParamKey::ClassifierBias, 1, 1));
    shapes
}

/// All trainable parameter matrices, stored in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(ParamKey, DenseMatrix)>,
}

impl ModelParams {
    pub fn entries(&self) -> &[(ParamKey, DenseMatrix)] {
        &self.entries
    }

    pub fn get(&self, key: ParamKey) -> &DenseMatrix {
        &self
            .entries
            .iter()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("parameter {key} not present"))
            .1
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut DenseMatrix {
        &mut self
            .entries
            .iter_mut()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("parameter {key} not present"))
            .1
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Concatenate all parameters into one flat vector, canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for (_, m) in &self.entries {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Rebuild parameters from a flat vector laid out like [`Self::flatten`].
    pub fn from_flat(hyper: &HyperParams, n_nodes: usize, flat: &[f64]) -> Result<Self> {
        let shapes = param_shapes(hyper, n_nodes);
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        if flat.len() != total {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, expected {total}",
                flat.len()
            )));
        }
        let mut entries = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (key, r, c) in shapes {
            let data = flat[offset..offset + r * c].to_vec();
            offset += r * c;
            entries.push((key, DenseMatrix::from_vec(r, c, data)?));
        }
        Ok(Self { entries })
    }

    /// Current effective hyperedge weights, `softplus(raw)`.
    pub fn effective_edge_weights(&self) -> Vec<f64> {
        self.get(ParamKey::EdgeWeights)
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect()
    }
}

/// Glorot-uniform initialization for weights, zeros for biases, and
/// `softplus^-1(1)` for raw hyperedge weights. Deterministic per seed.
pub fn init_params(hyper: &HyperParams, n_nodes: usize, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    if hyper.k > n_nodes {
        return Err(Error::Parameter(format!(
            "k = {} exceeds the number of nodes {n_nodes}",
            hyper.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (key, rows, cols) in param_shapes(hyper, n_nodes) {
        let m = match key {
            ParamKey::EdgeWeights => DenseMatrix::filled(rows, cols, softplus_inverse_of_one()),
            ParamKey::GateABias
            | ParamKey::GateGBias
            | ParamKey::GateScoreBias
            | ParamKey::ReadoutBias
            | ParamKey::ClassifierBias => DenseMatrix::zeros(rows, cols),
            _ => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                DenseMatrix::from_vec(rows, cols, data)?
            }
        };
        entries.push((key, m));
    }
    Ok(ModelParams { entries })
}

/// Handles into a built forward graph.
pub struct ForwardGraph {
    /// 1x1 classifier probability.
    pub prob: NodeId,
    /// Attention over nodes (length N), uniform when gating is disabled.
    pub alpha: NodeId,
    /// softplus of the raw hyperedge weights, length K.
    pub effective_w: NodeId,
    /// Parameter bindings for gradient extraction, canonical order.
    pub bound: Vec<(ParamKey, NodeId)>,
}

impl ForwardGraph {
    /// Gradient of a scalar loss for every bound parameter, canonical order.
    pub fn parameter_grads(&self, adj: &Adjoints) -> Vec<(ParamKey, DenseMatrix)> {
        self.bound.iter().map(|&(key, id)| (key, adj.grad(id))).collect()
    }
}

/// One hypergraph convolution on the tape: `relu(P X Theta)` with
/// `P = D^-1 H diag(w) B^-1 H^T` rebuilt from the current weight node, so
/// gradients flow into both `theta` and the hyperedge weights (including
/// through the normalization).
pub fn hypergraph_conv(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    h_t: NodeId,
    w_eff: NodeId,
    theta: NodeId,
    k_per_edge: usize,
) -> Result<NodeId> {
    let hx = g.matmul(h_t, x)?; // K x F, hyperedge sums
    let whx = g.row_scale(hx, w_eff)?; // diag(w)
    let bwhx = g.scalar_scale(whx, 1.0 / k_per_edge as f64); // B^-1
    let gathered = g.matmul(h, bwhx)?; // N x F
    let degrees = g.matmul(h, w_eff)?; // N x 1, D = H w
    let inv_deg = g.reciprocal(degrees);
    let propagated = g.row_scale(gathered, inv_deg)?;
    let projected = g.matmul(propagated, theta)?;
    Ok(g.relu(projected))
}

/// Gated attention over node features: sigmoid and tanh branches gate each
/// other, a linear map scores every node, and the scores (optionally
/// softmax-normalized over nodes) scale the node features.
#[allow(clippy::too_many_arguments)]
pub fn gated_attention(
    g: &mut Graph,
    x: NodeId,
    a_w: NodeId,
    a_b: NodeId,
    g_w: NodeId,
    g_b: NodeId,
    s_w: NodeId,
    s_b: NodeId,
    normalization: AlphaNormalization,
) -> Result<(NodeId, NodeId)> {
    let a_pre = g.matmul(x, a_w)?;
    let a_pre = g.add_row_vec(a_pre, a_b)?;
    let a = g.sigmoid(a_pre);
    let g_pre = g.matmul(x, g_w)?;
    let g_pre = g.add_row_vec(g_pre, g_b)?;
    let gate = g.tanh(g_pre);
    let mixed = g.hadamard(a, gate)?;
    let scores = g.matmul(mixed, s_w)?;
    let scores = g.add_row_vec(scores, s_b)?; // N x 1
    let alpha = match normalization {
        AlphaNormalization::Softmax => {
            let row = g.flatten(scores); // 1 x N
            g.softmax_rows(row)
        }
        AlphaNormalization::None => scores,
    };
    let z = g.row_scale(x, alpha)?;
    Ok((z, alpha))
}

/// Collapse node features to one graph-level vector.
pub fn readout(
    g: &mut Graph,
    z: NodeId,
    w: NodeId,
    b: NodeId,
    kind: ReadoutKind,
) -> Result<NodeId> {
    match kind {
        ReadoutKind::Mlp => {
            let flat = g.flatten(z);
            let hidden = g.matmul(flat, w)?;
            let hidden = g.add_row_vec(hidden, b)?;
            Ok(g.relu(hidden))
        }
        ReadoutKind::Mean => {
            let n = g.value(z).rows();
            let ones = g.input(DenseMatrix::filled(1, n, 1.0));
            let sums = g.matmul(ones, z)?;
            let means = g.scalar_scale(sums, 1.0 / n as f64);
            let out = g.matmul(means, w)?;
            g.add_row_vec(out, b)
        }
        ReadoutKind::Max => {
            let maxima = g.column_max(z)?;
            let out = g.matmul(maxima, w)?;
            g.add_row_vec(out, b)
        }
    }
}

/// Build the full forward graph for one subject.
pub fn build_forward(
    g: &mut Graph,
    params: &ModelParams,
    hyper: &HyperParams,
    hg: &Hypergraph,
    x0: &FCMatrix,
) -> Result<ForwardGraph> {
    hyper.validate()?;
    let n = hg.n_nodes();
    if x0.n_rois() != n {
        return Err(Error::Dimension {
            op: "build_forward",
            detail: format!("FC matrix is {}x{} but hypergraph has {n} nodes", x0.n_rois(), x0.n_rois()),
        });
    }

    let bound: Vec<(ParamKey, NodeId)> = params
        .entries()
        .iter()
        .map(|(key, m)| (*key, g.input(m.clone())))
        .collect();
    let node = |key: ParamKey| {
        bound
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::Contract(format!("parameter {key} missing from model")))
    };

    let h = g.input(hg.incidence().clone());
    let h_t = g.input(hg.incidence().transpose());
    let mut x = g.input(x0.values().clone());

    let raw_w = node(ParamKey::EdgeWeights)?;
    let w_eff = g.softplus(raw_w);

    for d in 0..hyper.n_layers {
        let theta = node(ParamKey::Theta(d))?;
        x = hypergraph_conv(g, x, h, h_t, w_eff, theta, hg.k_per_edge())?;
    }

    let (z, alpha) = if hyper.use_gated_attention {
        gated_attention(
            g,
            x,
            node(ParamKey::GateAWeight)?,
            node(ParamKey::GateABias)?,
            node(ParamKey::GateGWeight)?,
            node(ParamKey::GateGBias)?,
            node(ParamKey::GateScoreWeight)?,
            node(ParamKey::GateScoreBias)?,
            hyper.alpha_normalization,
        )?
    } else {
        let alpha = g.input(DenseMatrix::filled(1, n, 1.0 / n as f64));
        let z = g.scalar_scale(x, 1.0 / n as f64);
        (z, alpha)
    };

    let pooled = readout(
        g,
        z,
        node(ParamKey::ReadoutWeight)?,
        node(ParamKey::ReadoutBias)?,
        hyper.readout_kind,
    )?;
    let logit = g.matmul(pooled, node(ParamKey::ClassifierWeight)?)?;
    let logit = g.add_row_vec(logit, node(ParamKey::ClassifierBias)?)?;
    let prob = g.sigmoid(logit);

    Ok(ForwardGraph { prob, alpha, effective_w: w_eff, bound })
}

/// Forward-pass outputs for one subject.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probability: f64,
    pub alpha: Vec<f64>,
    pub effective_weights: Vec<f64>,
}

/// Run one subject through the model: build its hypergraph, evaluate the
/// graph, and return probability, attention and effective weights.
pub fn forward(params: &ModelParams, hyper: &HyperParams, fc: &FCMatrix) -> Result<ForwardOutput> {
    let hg = build_knn_hyperedges(fc, hyper.k)?;
    forward_with_hypergraph(params, hyper, &hg, fc)
}

pub fn forward_with_hypergraph(
    params: &ModelParams,
    hyper: &HyperParams,
    hg: &Hypergraph,
    fc: &FCMatrix,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let fg = build_forward(&mut g, params, hyper, hg, fc)?;
    Ok(ForwardOutput {
        probability: g.value(fg.prob).get(0, 0),
        alpha: g.value(fg.alpha).data().to_vec(),
        effective_weights: g.value(fg.effective_w).data().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

/// Write a model checkpoint in the `HGAL` format described in the module docs.
pub fn save_checkpoint(
    path: &Path,
    hyper: &HyperParams,
    n_nodes: usize,
    params: &ModelParams,
) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));

    put(CHECKPOINT_MAGIC)?;
    put(&CHECKPOINT_VERSION.to_le_bytes())?;
    put(&(n_nodes as u32).to_le_bytes())?;
    put(&(hyper.k as u32).to_le_bytes())?;
    put(&(hyper.n_layers as u32).to_le_bytes())?;
    put(&(hyper.hidden_dims.len() as u32).to_le_bytes())?;
    for &d in &hyper.hidden_dims {
        put(&(d as u32).to_le_bytes())?;
    }
    put(&(hyper.att_hidden as u32).to_le_bytes())?;
    put(&(hyper.readout_dim as u32).to_le_bytes())?;
    put(&[match hyper.readout_kind {
        ReadoutKind::Mlp => 0u8,
        ReadoutKind::Mean => 1,
        ReadoutKind::Max => 2,
    }])?;
    put(&[match hyper.alpha_normalization {
        AlphaNormalization::Softmax => 0u8,
        AlphaNormalization::None => 1,
    }])?;
    put(&[hyper.use_gated_attention as u8])?;
    put(&[hyper.learn_edge_weights as u8])?;
    put(&(params.entries().len() as u32).to_le_bytes())?;
    for (_, m) in params.entries() {
        put(&(m.rows() as u32).to_le_bytes())?;
        put(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Load a checkpoint, validating magic, version and parameter shapes.
pub fn load_checkpoint(path: &Path) -> Result<(HyperParams, usize, ModelParams)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), path);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected \"HGAL\"")));
    }
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let n_nodes = r.read_u32()? as usize;
    let k = r.read_u32()? as usize;
    let n_layers = r.read_u32()? as usize;
    let n_hidden = r.read_u32()? as usize;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(r.read_u32()? as usize);
    }
    let att_hidden = r.read_u32()? as usize;
    let readout_dim = r.read_u32()? as usize;
    let readout_kind = match r.read_u8()? {
        0 => ReadoutKind::Mlp,
        1 => ReadoutKind::Mean,
        2 => ReadoutKind::Max,
        other => return Err(format_err(path, format!("unknown readout kind tag {other}"))),
    };
    let alpha_normalization = match r.read_u8()? {
        0 => AlphaNormalization::Softmax,
        1 => AlphaNormalization::None,
        other => return Err(format_err(path, format!("unknown alpha normalization tag {other}"))),
    };
    let use_gated_attention = r.read_u8()? != 0;
    let learn_edge_weights = r.read_u8()? != 0;
    let hyper = HyperParams {
        k,
        n_layers,
        hidden_dims,
        att_hidden,
        readout_dim,
        readout_kind,
        alpha_normalization,
        use_gated_attention,
        learn_edge_weights,
    };
    hyper.validate().map_err(|e| format_err(path, e.to_string()))?;

    let n_params = r.read_u32()? as usize;
    let shapes = param_shapes(&hyper, n_nodes);
    if n_params != shapes.len() {
        return Err(format_err(
            path,
            format!("{n_params} parameters stored, architecture requires {}", shapes.len()),
        ));
    }
    let mut entries = Vec::with_capacity(n_params);
    for (key, rows, cols) in shapes {
        let got_rows = r.read_u32()? as usize;
        let got_cols = r.read_u32()? as usize;
        if (got_rows, got_cols) != (rows, cols) {
            return Err(format_err(
                path,
                format!("parameter {key} has shape {got_rows}x{got_cols}, expected {rows}x{cols}"),
            ));
        }
        let data = r.read_f64s(rows * cols)?;
        let m = DenseMatrix::from_vec(rows, cols, data)
            .map_err(|e| format_err(path, e.to_string()))?;
        entries.push((key, m));
    }
    Ok((hyper, n_nodes, ModelParams { entries }))
}

// ---------------------------------------------------------------------------
// Full-model gradient check
// ---------------------------------------------------------------------------

/// Dimensions and tolerances for the end-to-end gradient check.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    pub n_nodes: usize,
    pub k: usize,
    pub hidden_dim: usize,
    pub att_hidden: usize,
    pub readout_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            k: 3,
            hidden_dim: 4,
            att_hidden: 4,
            readout_dim: 4,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 17,
        }
    }
}

/// Check the backward sweep of the complete forward + BCE loss against
/// central finite differences on a random instance.
pub fn model_gradient_check(spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let hyper = HyperParams {
        k: spec.k,
        n_layers: 1,
        hidden_dims: vec![spec.hidden_dim],
        att_hidden: spec.att_hidden,
        readout_dim: spec.readout_dim,
        ..HyperParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_nodes;
    let mut fc_values = DenseMatrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(-0.9..0.9);
            fc_values.set(i, j, v);
            fc_values.set(j, i, v);
        }
    }
    let fc = FCMatrix::new(fc_values)?;
    let hg = build_knn_hyperedges(&fc, spec.k)?;
    let label = DenseMatrix::from_vec(1, 1, vec![1.0])?;
    let params = init_params(&hyper, n, spec.seed.wrapping_add(1))?;

    // Analytic gradient via one backward sweep.
    let mut graph = Graph::new();
    let fg = build_forward(&mut graph, &params, &hyper, &hg, &fc)?;
    let loss = graph.bce(fg.prob, label.clone())?;
    let adj = graph.backward(loss)?;
    let analytic: Vec<f64> = fg
        .parameter_grads(&adj)
        .iter()
        .flat_map(|(_, g)| g.data().to_vec())
        .collect();

    finite_diff_check(
        |flat| {
            let p = ModelParams::from_flat(&hyper, n, flat)?;
            let mut g = Graph::new();
            let fg = build_forward(&mut g, &p, &hyper, &hg, &fc)?;
            let l = g.bce(fg.prob, label.clone())?;
            Ok(g.value(l).get(0, 0))
        },
        &analytic,
        &params.flatten(),
        spec.step,
        spec.tolerance,
    )
}
