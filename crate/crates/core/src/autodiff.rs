//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape of [`Node`]s appended during the forward pass, so
//! node indices are already a topological order. [`Graph::backward`] sweeps
//! the tape once in reverse, accumulating adjoints; a node feeding several
//! consumers sums every contribution. Graphs are rebuilt per forward pass
//! and confined to one thread; the returned [`Adjoints`] are immutable.
//!
//! [`finite_diff_check`] is the independent oracle used to verify backward
//! rules: central differences on a scalar loss over a flat parameter vector.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log
/// inside binary cross-entropy, so saturated sigmoids cannot produce -inf.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScalarScale(NodeId, f64),
    RowScale { mat: NodeId, vec: NodeId },
    ColScale { mat: NodeId, vec: NodeId },
    AddRowVec { mat: NodeId, vec: NodeId },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Reciprocal(NodeId),
    SoftmaxRows(NodeId),
    /// Column-wise maximum; `argmax[c]` is the first row attaining it.
    ColumnMax { mat: NodeId, argmax: Vec<usize> },
    Flatten(NodeId),
    SumAll(NodeId),
    /// Mean binary cross-entropy against constant labels.
    Bce { pred: NodeId, labels: DenseMatrix },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward sweep. Nodes not on any path to the
/// loss read back as all-zeros.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    pub fn grad(&self, id: NodeId) -> DenseMatrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Used both for trainable parameters and constants;
    /// the caller decides which adjoints it reads back.
    pub fn input(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scalar_scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(s);
        self.push(v, Op::ScalarScale(a, s))
    }

    /// Scale row `r` of `mat` by entry `r` of `vec` (`vec` may be Nx1 or 1xN).
    pub fn row_scale(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let m = &self.nodes[mat.0].value;
        let v = &self.nodes[vec.0].value;
        if v.len() != m.rows() {
            return Err(Error::Dimension {
                op: "row_scale",
                detail: format!("matrix {:?} vs vector of {} entries", m.shape(), v.len()),
            });
        }
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let s = v.data()[r];
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c) * s);
            }
        }
        Ok(self.push(out, Op::RowScale { mat, vec }))
    }

    /// Scale column `c` of `mat` by entry `c` of `vec` (`vec` may be Kx1 or 1xK).
    pub fn col_scale(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let m = &self.nodes[mat.0].value;
        let v = &self.nodes[vec.0].value;
        if v.len() != m.cols() {
            return Err(Error::Dimension {
                op: "col_scale",
                detail: format!("matrix {:?} vs vector of {} entries", m.shape(), v.len()),
            });
        }
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c) * v.data()[c]);
            }
        }
        Ok(self.push(out, Op::ColScale { mat, vec }))
    }

    /// Add a length-F vector to every row of an NxF matrix (bias add).
    pub fn add_row_vec(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let m = &self.nodes[mat.0].value;
        let v = &self.nodes[vec.0].value;
        if v.len() != m.cols() {
            return Err(Error::Dimension {
                op: "add_row_vec",
                detail: format!("matrix {:?} vs vector of {} entries", m.shape(), v.len()),
            });
        }
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c) + v.data()[c]);
            }
        }
        Ok(self.push(out, Op::AddRowVec { mat, vec }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| 1.0 / x);
        self.push(v, Op::Reciprocal(a))
    }

    /// Softmax independently over each row, with the row max subtracted
    /// before exponentiation.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a.0].value;
        let mut out = DenseMatrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for c in 0..m.cols() {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for c in 0..m.cols() {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Column-wise maximum, 1xF output. Ties route gradient to the first
    /// attaining row.
    pub fn column_max(&mut self, a: NodeId) -> Result<NodeId> {
        let m = &self.nodes[a.0].value;
        if m.rows() == 0 {
            return Err(Error::Dimension { op: "column_max", detail: "empty matrix".into() });
        }
        let mut out = DenseMatrix::zeros(1, m.cols());
        let mut argmax = vec![0usize; m.cols()];
        for c in 0..m.cols() {
            let mut best = m.get(0, c);
            for r in 1..m.rows() {
                if m.get(r, c) > best {
                    best = m.get(r, c);
                    argmax[c] = r;
                }
            }
            out.set(0, c, best);
        }
        Ok(self.push(out, Op::ColumnMax { mat: a, argmax }))
    }

    /// Reshape NxF to 1x(N*F), row-major.
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a.0].value;
        let v = DenseMatrix::from_vec(1, m.len(), m.data().to_vec())
            .expect("flatten preserves finite data");
        self.push(v, Op::Flatten(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let v = DenseMatrix::from_vec(1, 1, vec![s]).expect("sum of finite values");
        self.push(v, Op::SumAll(a))
    }

    /// Mean of `-[y ln p + (1-y) ln(1-p)]` over all entries, with `p`
    /// clamped to `[BCE_CLAMP, 1-BCE_CLAMP]`. Labels are constants.
    pub fn bce(&mut self, pred: NodeId, labels: DenseMatrix) -> Result<NodeId> {
        let p = &self.nodes[pred.0].value;
        if p.shape() != labels.shape() {
            return Err(Error::Dimension {
                op: "bce",
                detail: format!("predictions {:?} vs labels {:?}", p.shape(), labels.shape()),
            });
        }
        let n = p.len() as f64;
        let mut total = 0.0;
        for (&pi, &yi) in p.data().iter().zip(labels.data()) {
            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let v = DenseMatrix::from_vec(1, 1, vec![total / n])?;
        Ok(self.push(v, Op::Bce { pred, labels }))
    }

    /// Reverse sweep from a scalar loss node. Visits the tape once in
    /// reverse index order (a valid reverse topological order by
    /// construction).
    pub fn backward(&mut self, loss: NodeId) -> Result<Adjoints> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss node, got {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Adjoints { grads, shapes })
    }

    fn accumulate(grads: &mut [Option<DenseMatrix>], id: NodeId, contrib: DenseMatrix) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => {
                *slot = Some(contrib);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose())?;
                let db = val(*a).transpose().matmul(g)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                Self::accumulate(grads, *a, g.hadamard(val(*b))?)?;
                Self::accumulate(grads, *b, g.hadamard(val(*a))?)?;
            }
            Op::ScalarScale(a, s) => {
                Self::accumulate(grads, *a, g.scale(*s))?;
            }
            Op::RowScale { mat, vec } => {
                let m = val(*mat);
                let v = val(*vec);
                let mut dm = DenseMatrix::zeros(m.rows(), m.cols());
                let (vr, vc) = v.shape();
                let mut dv = DenseMatrix::zeros(vr, vc);
                for r in 0..m.rows() {
                    let s = v.data()[r];
                    let mut acc = 0.0;
                    for c in 0..m.cols() {
                        dm.set(r, c, g.get(r, c) * s);
                        acc += g.get(r, c) * m.get(r, c);
                    }
                    dv.data_mut()[r] = acc;
                }
                Self::accumulate(grads, *mat, dm)?;
                Self::accumulate(grads, *vec, dv)?;
            }
            Op::ColScale { mat, vec } => {
                let m = val(*mat);
                let v = val(*vec);
                let mut dm = DenseMatrix::zeros(m.rows(), m.cols());
                let (vr, vc) = v.shape();
                let mut dv = DenseMatrix::zeros(vr, vc);
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        dm.set(r, c, g.get(r, c) * v.data()[c]);
                        dv.data_mut()[c] += g.get(r, c) * m.get(r, c);
                    }
                }
                Self::accumulate(grads, *mat, dm)?;
                Self::accumulate(grads, *vec, dv)?;
            }
            Op::AddRowVec { mat, vec } => {
                let v = val(*vec);
                let (vr, vc) = v.shape();
                let mut dv = DenseMatrix::zeros(vr, vc);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dv.data_mut()[c] += g.get(r, c);
                    }
                }
                Self::accumulate(grads, *mat, g.clone())?;
                Self::accumulate(grads, *vec, dv)?;
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                let d = g.hadamard(&out.map(|s| s * (1.0 - s)))?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let out = &self.nodes[idx].value;
                let d = g.hadamard(&out.map(|t| 1.0 - t * t))?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                // Subgradient 0 at exactly zero.
                let d = g.hadamard(&val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }))?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::Softplus(a) => {
                let d = g.hadamard(&val(*a).map(sigmoid))?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::Reciprocal(a) => {
                let d = g.hadamard(&val(*a).map(|x| -1.0 / (x * x)))?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                // dx = s * (dy - <dy, s>_row)
                let s = &self.nodes[idx].value;
                let mut d = DenseMatrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: f64 = (0..s.cols()).map(|c| g.get(r, c) * s.get(r, c)).sum();
                    for c in 0..s.cols() {
                        d.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                Self::accumulate(grads, *a, d)?;
            }
            Op::ColumnMax { mat, argmax } => {
                let m = val(*mat);
                let mut d = DenseMatrix::zeros(m.rows(), m.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    d.set(r, c, g.get(0, c));
                }
                Self::accumulate(grads, *mat, d)?;
            }
            Op::Flatten(a) => {
                let (r, c) = val(*a).shape();
                let d = DenseMatrix::from_vec(r, c, g.data().to_vec())?;
                Self::accumulate(grads, *a, d)?;
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                Self::accumulate(grads, *a, DenseMatrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Bce { pred, labels } => {
                let p = val(*pred);
                let n = p.len() as f64;
                let up = g.get(0, 0);
                let mut d = DenseMatrix::zeros(p.rows(), p.cols());
                for i in 0..p.len() {
                    let pi = p.data()[i];
                    let yi = labels.data()[i];
                    // Zero gradient where the clamp is active.
                    let dd = if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                        (pi - yi) / (pi * (1.0 - pi) * n)
                    } else {
                        0.0
                    };
                    d.data_mut()[i] = up * dd;
                }
                Self::accumulate(grads, *pred, d)?;
            }
        }
        Ok(())
    }
}

/// Result of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub n_params: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compare an analytic gradient against central finite differences,
/// parameter by parameter.
///
/// `loss_fn` must be deterministic; it is evaluated twice at the base point
/// and any bitwise mismatch is reported as an oracle error. The relative
/// error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    analytic_grad: &[f64],
    params: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic_grad.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient length {} != parameter length {}",
            analytic_grad.len(),
            params.len()
        )));
    }
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic: {base_a} vs {base_b} at the same point"
        )));
    }

    let mut work = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let fp = loss_fn(&work)?;
        work[i] = orig - step;
        let fm = loss_fn(&work)?;
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = analytic_grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (numeric - analytic).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, n_params: params.len(), tolerance })
}
