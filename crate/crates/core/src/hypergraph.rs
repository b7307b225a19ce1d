//! K-NN hypergraph construction, normalized propagation, and the two-layer
//! hypergraph-convolution head that turns fused token features into a prompt.
//!
//! Every vertex (token) anchors one hyperedge containing itself and its k
//! nearest neighbors by Euclidean distance, so no vertex or edge has zero
//! degree. The propagation matrix G = Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2} is
//! symmetric and positive semidefinite with Dv^{1/2}·1 as an eigenvalue-1
//! eigenvector. G is rebuilt from the current features on every forward pass
//! and enters the tape as a constant: gradients flow through XW + b only —
//! the discrete neighbor selection is not differentiated.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::nn::{Graph, Linear, ParamSet};
use crate::tape::NodeId;
use crate::tensor::{Tensor, TensorError};

/// A built hypergraph: incidence, degree vectors, cached propagation matrix,
/// and the per-anchor member lists (sorted ascending) for inspection.
#[derive(Debug, Clone)]
pub struct Hypergraph {
    n: usize,
    edges: Vec<Vec<usize>>,
    h: Tensor,
    dv: Vec<f64>,
    de: Vec<f64>,
    g: Arc<Tensor>,
}

impl Hypergraph {
    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge `i`'s sorted member list; edge `i` is anchored at vertex `i`.
    pub fn edge(&self, i: usize) -> &[usize] {
        &self.edges[i]
    }

    pub fn incidence(&self) -> &Tensor {
        &self.h
    }

    pub fn vertex_degrees(&self) -> &[f64] {
        &self.dv
    }

    pub fn edge_degrees(&self) -> &[f64] {
        &self.de
    }

    pub fn propagation(&self) -> &Arc<Tensor> {
        &self.g
    }
}

/// Squared Euclidean distances between all feature rows, accumulated by
/// direct subtraction in index order. The Gram-matrix shortcut
/// (‖a‖² + ‖b‖² − 2a·b) would be one gemm instead of this O(N²·d) loop, but
/// its different rounding can swap nearly-tied neighbours; the naive sum is
/// the form every independent reimplementation agrees with bit-for-bit, and
/// at N=128 it is a negligible slice of a forward pass.
fn pairwise_dist2(features: &Tensor) -> Vec<f64> {
    let (n, d) = features.rows_cols();
    let x = features.data();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            let mut acc = 0.0;
            for t in 0..d {
                let diff = a[t] - b[t];
                acc += diff * diff;
            }
            d2[i * n + j] = acc;
            d2[j * n + i] = acc;
        }
    }
    d2
}

/// Builds the k-NN hypergraph over feature rows. Each vertex anchors one
/// hyperedge = {vertex} ∪ its min(k, N−1) nearest neighbors; distance ties
/// are broken toward the lower vertex index.
pub fn build_knn_hypergraph(features: &Tensor, k: usize) -> Result<Hypergraph, TensorError> {
    if k == 0 {
        return Err(TensorError::Config("k-NN requires k >= 1".into()));
    }
    features.validate_finite("hypergraph features")?;
    let (n, _) = features.rows_cols();
    if n == 0 {
        return Err(TensorError::Config("hypergraph needs at least one vertex".into()));
    }
    let d2 = pairwise_dist2(features);
    let k_eff = k.min(n - 1);

    let mut edges = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n.saturating_sub(1));
    for anchor in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != anchor).map(|j| (d2[anchor * n + j], j)));
        candidates.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
        });
        let mut members: Vec<usize> = candidates[..k_eff].iter().map(|&(_, j)| j).collect();
        members.push(anchor);
        members.sort_unstable();
        edges.push(members);
    }

    let mut h = Tensor::zeros(vec![n, n]);
    for (e, members) in edges.iter().enumerate() {
        for &v in members {
            h.data_mut()[v * n + e] = 1.0;
        }
    }
    let (dv, de) = degrees(&h)?;
    let g = propagation_from_degrees(&h, &dv, &de);
    Ok(Hypergraph { n, edges, h, dv, de, g: Arc::new(g) })
}

fn degrees(h: &Tensor) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let (n, e) = h.rows_cols();
    for (i, &v) in h.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(TensorError::Config(format!(
                "incidence entry {i} = {v}, must be 0 or 1"
            )));
        }
    }
    let mut dv = vec![0.0; n];
    let mut de = vec![0.0; e];
    for v in 0..n {
        for ed in 0..e {
            let x = h.data()[v * e + ed];
            dv[v] += x;
            de[ed] += x;
        }
    }
    if let Some(v) = dv.iter().position(|&d| d == 0.0) {
        return Err(TensorError::Config(format!(
            "vertex {v} has degree 0 — hypergraph construction bug"
        )));
    }
    if let Some(ed) = de.iter().position(|&d| d == 0.0) {
        return Err(TensorError::Config(format!(
            "hyperedge {ed} is empty — hypergraph construction bug"
        )));
    }
    Ok((dv, de))
}

fn propagation_from_degrees(h: &Tensor, dv: &[f64], de: &[f64]) -> Tensor {
    let (n, e) = h.rows_cols();
    let dv_inv_sqrt: Vec<f64> = dv.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut g = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for ed in 0..e {
                acc += h.data()[i * e + ed] * h.data()[j * e + ed] / de[ed];
            }
            let val = acc * dv_inv_sqrt[i] * dv_inv_sqrt[j];
            g.data_mut()[i * n + j] = val;
            g.data_mut()[j * n + i] = val; // symmetric by construction
        }
    }
    g
}

/// Normalized propagation matrix Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2} for an
/// arbitrary 0/1 incidence matrix. Errors on any zero-degree vertex or edge.
pub fn propagation_matrix(h: &Tensor) -> Result<Tensor, TensorError> {
    let (dv, de) = degrees(h)?;
    Ok(propagation_from_degrees(h, &dv, &de))
}

/// One hypergraph-convolution layer: X' = G(XW + b), optionally GELU.
pub struct HgcnLayer {
    pub lin: Linear,
    pub gelu: bool,
}

impl HgcnLayer {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        gelu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self { lin: Linear::init(params, name, d_in, d_out, rng), gelu }
    }

    /// `gmat` must be a tape node holding the n×n propagation matrix
    /// (normally a constant, so no gradient flows into the graph structure).
    pub fn forward(&self, g: &mut Graph, gmat: NodeId, x: NodeId) -> Result<NodeId, TensorError> {
        let xwb = self.lin.forward(g, x)?;
        let propagated = g.tape.matmul(gmat, xwb)?;
        Ok(if self.gelu { g.tape.gelu(propagated) } else { propagated })
    }
}

/// Hypergraph convolution as a free function, for callers holding a dense G.
pub fn hgcn_forward(
    g: &mut Graph,
    x: NodeId,
    layer: &HgcnLayer,
    gmat: &Tensor,
) -> Result<NodeId, TensorError> {
    let gnode = g.constant(gmat.clone());
    layer.forward(g, gnode, x)
}

/// The prompt head: concat RGB and event tokens channel-wise, build the k-NN
/// hypergraph on the concatenated features, then two HGCN layers
/// (2C' → 2C' with GELU, 2C' → C' linear).
pub struct PromptHead {
    pub hgcn1: HgcnLayer,
    pub hgcn2: HgcnLayer,
    pub k: usize,
}

impl PromptHead {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        c_prime: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hgcn1: HgcnLayer::init(
                params,
                &format!("{prefix}.hgcn1"),
                2 * c_prime,
                2 * c_prime,
                true,
                rng,
            ),
            hgcn2: HgcnLayer::init(
                params,
                &format!("{prefix}.hgcn2"),
                2 * c_prime,
                c_prime,
                false,
                rng,
            ),
            k,
        }
    }

    /// Returns the N×C' prompt node and the hypergraph it was built on (the
    /// latter feeds the inspection CLI and tests).
    pub fn make_prompt(
        &self,
        g: &mut Graph,
        t_r: NodeId,
        f_e: NodeId,
    ) -> Result<(NodeId, Hypergraph), TensorError> {
        let t_re = g.tape.concat_cols(t_r, f_e)?;
        let hg = build_knn_hypergraph(g.tape.value(t_re), self.k)?;
        let gmat = g.constant(hg.propagation().as_ref().clone());
        let hidden = self.hgcn1.forward(g, gmat, t_re)?;
        let prompt = self.hgcn2.forward(g, gmat, hidden)?;
        Ok((prompt, hg))
    }
}

/// How the event branch is combined with the RGB backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Elementwise T_r + F_e fed once to the backbone.
    Addition,
    /// Channel concat + learned down-projection to C', fed once.
    Concatenate,
    /// Prompt-head output replaces the backbone input (no injection).
    HypergraphFusion,
    /// Prompt-head output injected after selected backbone blocks.
    HypergraphPrompt,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Addition,
        FusionStrategy::Concatenate,
        FusionStrategy::HypergraphFusion,
        FusionStrategy::HypergraphPrompt,
    ];
}

impl FromStr for FusionStrategy {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, TensorError> {
        match s {
            "addition" => Ok(Self::Addition),
            "concatenate" => Ok(Self::Concatenate),
            "hypergraph_fusion" => Ok(Self::HypergraphFusion),
            "hypergraph_prompt" => Ok(Self::HypergraphPrompt),
            other => Err(TensorError::Config(format!(
                "unknown fusion strategy `{other}` (expected addition, concatenate, \
                 hypergraph_fusion, or hypergraph_prompt)"
            ))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Addition => "addition",
            Self::Concatenate => "concatenate",
            Self::HypergraphFusion => "hypergraph_fusion",
            Self::HypergraphPrompt => "hypergraph_prompt",
        })
    }
}
