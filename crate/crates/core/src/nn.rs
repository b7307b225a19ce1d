//! Parameter storage and the layer vocabulary built on the tape.
//!
//! A [`ParamSet`] owns every trainable tensor; registration order is the
//! serialization order, so checkpoints stay stable as long as the model is
//! assembled the same way. A [`Graph`] wraps one tape for one forward pass
//! and lazily binds parameters as gradient leaves, which keeps per-sample
//! tapes small when only part of the model runs.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{AttnMask, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name. Names are paths like
    /// `"rgb_enc.block2.mha.wq.w"`; a duplicate is a model-assembly bug.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Per-parameter gradient buffers, shaped like a [`ParamSet`].
#[derive(Clone)]
pub struct GradStore {
    slots: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            slots: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn slot(&self, id: ParamId) -> &[f64] {
        &self.slots[id.index()]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.index()]
    }

    /// Elementwise sum with another store (same layout).
    pub fn add(&mut self, other: &GradStore) {
        assert_eq!(self.slots.len(), other.slots.len(), "grad store layout");
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.iter_mut() {
            for v in slot.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// One forward pass: a tape plus lazy parameter bindings.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Tape node for a parameter, created (as a gradient leaf) on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.index()] {
            return node;
        }
        let node = self.tape.leaf(self.params.get(id).clone(), true);
        self.bound[id.index()] = Some(node);
        node
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.tape.constant(value)
    }

    /// Adds this pass's parameter gradients into `store`. Call after
    /// `tape.backward`. Parameters never touched by this pass contribute 0.
    pub fn collect_grads(&self, store: &mut GradStore) {
        for (i, bound) in self.bound.iter().enumerate() {
            let Some(node) = bound else { continue };
            let Some(grad) = self.tape.grad(*node) else {
                continue;
            };
            let dst = store.slot_mut(ParamId(i));
            for (d, s) in dst.iter_mut().zip(grad) {
                *d += s;
            }
        }
    }
}

// ─── Initialization ─────────────────────────────────────────────────────

/// Truncated normal: N(0, std²) with resampling outside ±2·std.
pub fn trunc_normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let bound = 2.0 * std;
    let data = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= bound {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape/product consistency")
}

// ─── Layers ─────────────────────────────────────────────────────────────

/// Affine map `x·W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            trunc_normal(rng, vec![in_dim, out_dim], 0.02),
        );
        let b = params.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.register(format!("{name}.gamma"), Tensor::filled(vec![dim], 1.0));
        let beta = params.register(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention. Queries come from `q_src`, keys and values from
/// `kv_src` (self-attention passes the same node for both). Scores are
/// scaled by `1/sqrt(head_dim)`; an optional boolean mask blocks positions
/// before the row softmax.
#[derive(Clone, Copy)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub nhead: usize,
    pub d_model: usize,
}

impl Mha {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        nhead: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if nhead == 0 || d_model % nhead != 0 {
            return Err(TensorError::Config(format!(
                "attention width {d_model} is not divisible into {nhead} heads"
            )));
        }
        Ok(Self {
            wq: Linear::init(params, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::init(params, &format!("{name}.wk"), d_model, d_model, rng),
            wv: Linear::init(params, &format!("{name}.wv"), d_model, d_model, rng),
            wo: Linear::init(params, &format!("{name}.wo"), d_model, d_model, rng),
            nhead,
            d_model,
        })
    }

    /// Projects keys and values once so several queries (e.g. the same image
    /// tokens attended under many permutation masks) can share them.
    pub fn project_kv(
        &self,
        g: &mut Graph,
        kv_src: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        Ok((self.wk.forward(g, kv_src)?, self.wv.forward(g, kv_src)?))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q_src: NodeId,
        kv_src: NodeId,
        mask: Option<&Arc<AttnMask>>,
    ) -> Result<NodeId, TensorError> {
        let (k, v) = self.project_kv(g, kv_src)?;
        self.forward_with_kv(g, q_src, k, v, mask)
    }

    pub fn forward_with_kv(
        &self,
        g: &mut Graph,
        q_src: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<&Arc<AttnMask>>,
    ) -> Result<NodeId, TensorError> {
        let q = self.wq.forward(g, q_src)?;
        let dh = self.d_model / self.nhead;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged: Option<NodeId> = None;
        for h in 0..self.nhead {
            let qh = g.tape.slice_cols(q, h * dh, dh)?;
            let kh = g.tape.slice_cols(k, h * dh, dh)?;
            let vh = g.tape.slice_cols(v, h * dh, dh)?;
            let scores = g.tape.matmul_nt(qh, kh)?;
            let scaled = g.tape.scale(scores, scale);
            let gated = match mask {
                Some(m) => g.tape.add_mask(scaled, m.clone())?,
                None => scaled,
            };
            let probs = g.tape.softmax(gated)?;
            let ctx = g.tape.matmul(probs, vh)?;
            merged = Some(match merged {
                None => ctx,
                Some(acc) => g.tape.concat_cols(acc, ctx)?,
            });
        }
        self.wo.forward(g, merged.expect("nhead >= 1"))
    }
}

/// Two-layer position-wise MLP with a GELU between.
#[derive(Clone, Copy)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lin1: Linear::init(params, &format!("{name}.lin1"), d_model, hidden, rng),
            lin2: Linear::init(params, &format!("{name}.lin2"), hidden, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let h = self.lin1.forward(g, x)?;
        let a = g.tape.gelu(h);
        self.lin2.forward(g, a)
    }
}

// ─── Finite-difference validation over parameters ───────────────────────

/// Compares an analytic parameter gradient against central differences on a
/// deterministic random subset of coordinates per parameter. Returns
/// `max |analytic − fd| / max(1, |analytic|)` over all checked coordinates.
///
/// `eval` must recompute the scalar loss from the (perturbed) parameters
/// with the same non-parameter inputs the analytic gradient used.
pub fn grad_check_params<F>(
    params: &mut ParamSet,
    analytic: &GradStore,
    mut eval: F,
    coords_per_param: usize,
    h: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: FnMut(&ParamSet) -> Result<f64, TensorError>,
{
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut max_rel = 0.0f64;
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9e37));
        let mut coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < coords_per_param {
                picked.insert(rng.random_range(0..n));
            }
            picked.into_iter().collect()
        };
        coords.sort_unstable();
        for e in coords {
            let original = params.get(id).data()[e];
            params.get_mut(id).data_mut()[e] = original + h;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[e] = original - h;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[e] = original;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.slot(id)[e];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
