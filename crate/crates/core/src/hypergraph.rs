//! Per-subject hypergraph construction from functional-connectivity matrices.
//!
//! Each subject's FC matrix induces one hypergraph: hyperedge `j` is centered
//! on ROI `j` and contains `j` plus its `k-1` strongest neighbors by signed
//! correlation, so there are exactly `K = N` hyperedges and every hyperedge
//! has exactly `k` members. With positive per-hyperedge weights `w` the
//! propagation operator
//!
//! ```text
//! P = D^-1 H diag(w) B^-1 H^T
//! ```
//!
//! is row-stochastic: `D_ii = sum_j w_j H_ij` is exactly the row sum of
//! `H diag(w) B^-1 H^T`, so dividing by it makes every row sum to one. Each
//! propagated feature is then a convex combination of input features, which
//! is also why repeated application can only shrink per-feature range.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric correlation matrix with unit diagonal; row `t` doubles as the
/// initial feature vector of ROI `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FCMatrix {
    values: DenseMatrix,
}

impl FCMatrix {
    /// Validates shape, finiteness, symmetry (1e-9), unit diagonal (1e-9)
    /// and the correlation range; values are clamped to [-1, 1] afterwards.
    pub fn new(values: DenseMatrix) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c {
            return Err(Error::Validation(format!("FC matrix must be square, got {r}x{c}")));
        }
        if !values.all_finite() {
            return Err(Error::Validation("FC matrix contains non-finite entries".into()));
        }
        for i in 0..r {
            let d = values.get(i, i);
            if (d - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::Validation(format!(
                    "FC diagonal entry [{i},{i}] = {d} differs from 1"
                )));
            }
            for j in (i + 1)..c {
                let a = values.get(i, j);
                let b = values.get(j, i);
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::Validation(format!(
                        "FC matrix asymmetric at [{i},{j}]: {a} vs {b}"
                    )));
                }
                if a.abs() > 1.0 + SYMMETRY_TOL {
                    return Err(Error::Validation(format!(
                        "FC entry [{i},{j}] = {a} outside [-1, 1]"
                    )));
                }
            }
        }
        let clamped = values.map(|v| v.clamp(-1.0, 1.0));
        Ok(Self { values: clamped })
    }

    pub fn n_rois(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

/// k-NN hypergraph: `N` nodes, `K = N` hyperedges of exactly `k` members,
/// hyperedge `j` centered on node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n_nodes: usize,
    k_per_edge: usize,
    /// Sorted member lists, one per hyperedge.
    members: Vec<Vec<usize>>,
    /// N x K binary incidence matrix.
    incidence: DenseMatrix,
}

impl Hypergraph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_hyperedges(&self) -> usize {
        self.members.len()
    }

    pub fn k_per_edge(&self) -> usize {
        self.k_per_edge
    }

    pub fn members(&self, edge: usize) -> &[usize] {
        &self.members[edge]
    }

    pub fn incidence(&self) -> &DenseMatrix {
        &self.incidence
    }

    /// Diagonal of B: the member count of each hyperedge (always `k` here).
    pub fn hyperedge_degrees(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Hand-built hypergraphs for unit tests that need structures the k-NN
    /// constructor would not produce.
    #[cfg(test)]
    pub(crate) fn from_parts_for_tests(
        n_nodes: usize,
        k_per_edge: usize,
        members: Vec<Vec<usize>>,
        incidence: DenseMatrix,
    ) -> Self {
        Self { n_nodes, k_per_edge, members, incidence }
    }
}

/// Build the k-NN hypergraph of an FC matrix.
///
/// Hyperedge `j` contains node `j` plus the `k-1` nodes with the largest
/// signed correlation to it, ties broken by lower node index.
pub fn build_knn_hyperedges(fc: &FCMatrix, k: usize) -> Result<Hypergraph> {
    let n = fc.n_rois();
    if k < 2 || k > n {
        return Err(Error::Parameter(format!(
            "k must satisfy 2 <= k <= N (N = {n}), got {k}"
        )));
    }
    let mut members = Vec::with_capacity(n);
    let mut incidence = DenseMatrix::zeros(n, n);
    for center in 0..n {
        let mut candidates: Vec<usize> = (0..n).filter(|&i| i != center).collect();
        // Descending correlation, lower index first on ties.
        candidates.sort_by(|&a, &b| {
            fc.get(center, b)
                .partial_cmp(&fc.get(center, a))
                .expect("FC entries are finite")
                .then(a.cmp(&b))
        });
        let mut edge: Vec<usize> = candidates.into_iter().take(k - 1).collect();
        edge.push(center);
        edge.sort_unstable();
        for &node in &edge {
            incidence.set(node, center, 1.0);
        }
        members.push(edge);
    }
    Ok(Hypergraph { n_nodes: n, k_per_edge: k, members, incidence })
}

/// Weighted vertex degrees: `D_ii = sum_j w_j H_ij`. Strictly positive
/// because node `i` belongs at least to hyperedge `i`.
pub fn vertex_degrees(hg: &Hypergraph, w: &[f64]) -> Result<Vec<f64>> {
    check_weights(hg, w)?;
    let mut degrees = vec![0.0; hg.n_nodes()];
    for (j, &wj) in w.iter().enumerate() {
        for &i in hg.members(j) {
            degrees[i] += wj;
        }
    }
    Ok(degrees)
}

/// Row-normalized propagation operator `P = D^-1 H diag(w) B^-1 H^T`.
/// Every row sums to one and all entries are non-negative.
pub fn propagation_matrix(hg: &Hypergraph, w: &[f64]) -> Result<DenseMatrix> {
    let degrees = vertex_degrees(hg, w)?;
    let n = hg.n_nodes();
    let mut p = DenseMatrix::zeros(n, n);
    for (j, &wj) in w.iter().enumerate() {
        let edge = hg.members(j);
        let contrib = wj / edge.len() as f64; // B_jj = |edge|
        for &t in edge {
            for &i in edge {
                let v = p.get(t, i) + contrib;
                p.set(t, i, v);
            }
        }
    }
    for t in 0..n {
        for i in 0..n {
            let v = p.get(t, i) / degrees[t];
            p.set(t, i, v);
        }
    }
    Ok(p)
}

fn check_weights(hg: &Hypergraph, w: &[f64]) -> Result<()> {
    if w.len() != hg.n_hyperedges() {
        return Err(Error::Dimension {
            op: "vertex_degrees",
            detail: format!("{} weights for {} hyperedges", w.len(), hg.n_hyperedges()),
        });
    }
    if let Some(j) = w.iter().position(|&wj| wj <= 0.0) {
        return Err(Error::Parameter(format!(
            "hyperedge weight {} at index {j} must be positive for normalization",
            w[j]
        )));
    }
    Ok(())
}
