//! Charset/tokenizer, permutation sampling and masks, the position-query
//! decoder, and greedy inference.
//!
//! Training follows the permutation-language-modeling recipe: the context is
//! always the canonical `[B] + label` sequence, and each sampled permutation
//! only changes the attention mask, so position π(i) may attend to `[B]` and
//! the positions earlier in that permutation. Token ids: `[E]` = 0, charset
//! symbols 1..=C, `[B]` = C+1, `[P]` = C+2; the output head has C+1 classes
//! (symbols plus `[E]` — `[B]`/`[P]` are never predicted).

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Ffn, Graph, LayerNorm, Linear, Mha, ParamId, ParamSet};
use crate::tape::{AttnMask, NodeId};
use crate::tensor::{Tensor, TensorError};

// ─── Charset and label codec ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

/// Encoded label: context ids (`[B]` + chars, `[P]`-padded to T+1), target
/// ids (chars + `[E]`, `[P]`-padded), and the per-position loss mask (true
/// through the `[E]` position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLabel {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub active: Vec<bool>,
    pub len: usize,
}

impl Charset {
    pub const EOS: usize = 0;

    pub fn new(symbols: &str) -> Result<Self, TensorError> {
        if symbols.is_empty() {
            return Err(TensorError::Config("charset must be non-empty".into()));
        }
        let mut index = HashMap::new();
        let mut list = Vec::new();
        for c in symbols.chars() {
            if index.insert(c, list.len() + 1).is_some() {
                return Err(TensorError::Config(format!("duplicate charset symbol `{c}`")));
            }
            list.push(c);
        }
        Ok(Self { symbols: list, index })
    }

    /// Number of symbols C.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn bos(&self) -> usize {
        self.size() + 1
    }

    pub fn pad(&self) -> usize {
        self.size() + 2
    }

    /// Rows of the context embedding table: C symbols + [E], [B], [P].
    pub fn embed_rows(&self) -> usize {
        self.size() + 3
    }

    /// Output head width: C symbols + [E].
    pub fn n_classes(&self) -> usize {
        self.size() + 1
    }

    pub fn char_id(&self, c: char) -> Result<usize, TensorError> {
        self.index.get(&c).copied().ok_or_else(|| {
            TensorError::Config(format!("character `{c}` is not in the charset"))
        })
    }

    /// The symbol for id 1..=C; `None` for specials.
    pub fn char_of(&self, id: usize) -> Option<char> {
        (1..=self.size()).contains(&id).then(|| self.symbols[id - 1])
    }

    pub fn encode_label(&self, text: &str, t_max: usize) -> Result<EncodedLabel, TensorError> {
        if text.is_empty() {
            return Err(TensorError::Config("label must be non-empty".into()));
        }
        let ids: Vec<usize> = text.chars().map(|c| self.char_id(c)).collect::<Result<_, _>>()?;
        if ids.len() > t_max {
            return Err(TensorError::Config(format!(
                "label `{text}` has {} characters, exceeding the model maximum {t_max}",
                ids.len()
            )));
        }
        let len = ids.len();
        let mut context = Vec::with_capacity(t_max + 1);
        context.push(self.bos());
        context.extend(&ids);
        context.resize(t_max + 1, self.pad());

        let mut targets = ids;
        targets.push(Self::EOS);
        targets.resize(t_max + 1, self.pad());

        let active: Vec<bool> = (0..=t_max).map(|j| j <= len).collect();
        Ok(EncodedLabel { context, targets, active, len })
    }

    /// Inverse of `encode_label` on the prediction side: consumes target ids
    /// up to the first `[E]` (or a special token).
    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map_while(|&id| self.char_of(id))
            .collect()
    }
}

// ─── Permutations and masks ─────────────────────────────────────────────

fn factorial_capped(t: usize, cap: usize) -> usize {
    let mut f: usize = 1;
    for i in 2..=t {
        f = f.saturating_mul(i);
        if f >= cap {
            return cap;
        }
    }
    f
}

/// Samples K orderings of the positions 0..T−1: the identity first, its
/// reverse second, then uniformly sampled (σ, reverse σ) pairs, all
/// distinct; truncated to exactly K. K must not exceed T!.
pub fn sample_permutations(t: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TensorError> {
    if t == 0 || k == 0 {
        return Err(TensorError::Config(format!(
            "permutation sampling needs t >= 1 and k >= 1, got t={t}, k={k}"
        )));
    }
    let space = factorial_capped(t, usize::MAX / 2);
    if k > space {
        return Err(TensorError::Config(format!(
            "cannot draw {k} distinct permutations of {t} positions ({t}! = {space})"
        )));
    }
    let identity: Vec<usize> = (0..t).collect();
    let mut perms = vec![identity.clone()];
    let mut seen: std::collections::HashSet<Vec<usize>> = perms.iter().cloned().collect();
    let push_pair = |perms: &mut Vec<Vec<usize>>,
                         seen: &mut std::collections::HashSet<Vec<usize>>,
                         p: Vec<usize>|
     -> bool {
        let rev: Vec<usize> = p.iter().rev().copied().collect();
        if seen.contains(&p) || seen.contains(&rev) {
            return false;
        }
        seen.insert(p.clone());
        seen.insert(rev.clone());
        perms.push(p);
        perms.push(rev);
        true
    };

    if k > 1 {
        let rev: Vec<usize> = identity.iter().rev().copied().collect();
        if t == 1 {
            // only one permutation exists; k > space was already rejected
        } else {
            seen.insert(rev.clone());
            perms.push(rev);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    while perms.len() < k {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if !push_pair(&mut perms, &mut seen, p) {
            attempts += 1;
            // distinct-pair rejection sampling; the space check above makes
            // exhaustion impossible, but bound the loop defensively
            if attempts > 1000 * k * space {
                return Err(TensorError::Config(format!(
                    "failed to sample {k} distinct permutations of {t} positions"
                )));
            }
        }
    }
    perms.truncate(k);
    Ok(perms)
}

/// Builds the (T+1)×(T+1) decoder self-attention mask for one permutation.
/// Query row j is output position j (row T is the always-last final slot);
/// context column 0 is `[B]`, column j+1 is text position j. Row π(i)
/// allows `[B]` plus the positions earlier in the permutation; row T allows
/// everything.
pub fn perm_to_mask(perm: &[usize], t: usize) -> Result<AttnMask, TensorError> {
    let mut hit = vec![false; t];
    if perm.len() != t {
        return Err(TensorError::Config(format!(
            "permutation length {} does not cover {t} positions",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= t || hit[p] {
            return Err(TensorError::Config(format!(
                "invalid permutation {perm:?} of {t} positions"
            )));
        }
        hit[p] = true;
    }

    let mut mask = AttnMask::new(t + 1, t + 1, vec![false; (t + 1) * (t + 1)])?;
    for row in 0..=t {
        mask.set(row, 0, true); // [B] always visible — no degenerate rows
    }
    for (i, &pos) in perm.iter().enumerate() {
        for &earlier in &perm[..i] {
            mask.set(pos, earlier + 1, true);
        }
        mask.set(t, pos + 1, true); // final row sees every text position
    }
    Ok(mask)
}

/// Blocks the `[P]` context columns beyond `label_len` (every row keeps
/// `[B]` and the real text columns).
pub fn pad_mask(t: usize, label_len: usize) -> AttnMask {
    let mut mask = AttnMask::all_allowed(t + 1, t + 1);
    for col in label_len + 1..=t {
        for row in 0..=t {
            mask.set(row, col, false);
        }
    }
    mask
}

// ─── Decoder ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_model: usize,
    /// Maximum label length T; sequences run T+1 positions.
    pub t_max: usize,
    pub mlp_hidden: usize,
    pub depth: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.d_model % 32 != 0 {
            return Err(TensorError::Config(format!(
                "decoder d_model {} must be a positive multiple of 32 (nhead = d_model/32)",
                self.d_model
            )));
        }
        if self.t_max == 0 {
            return Err(TensorError::Config("t_max must be at least 1".into()));
        }
        if self.mlp_hidden == 0 || self.depth == 0 {
            return Err(TensorError::Config("mlp_hidden and depth must be positive".into()));
        }
        Ok(())
    }

    pub fn nhead(&self) -> usize {
        self.d_model / 32
    }
}

struct DecoderBlock {
    ln_q: LayerNorm,
    ln_ctx: LayerNorm,
    mha_ctx: Mha,
    ln_img: LayerNorm,
    mha_img: Mha,
    ln_mlp: LayerNorm,
    mlp: Ffn,
}

impl DecoderBlock {
    fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            ln_q: LayerNorm::init(params, &format!("{name}.ln_q"), cfg.d_model),
            ln_ctx: LayerNorm::init(params, &format!("{name}.ln_ctx"), cfg.d_model),
            mha_ctx: Mha::init(params, &format!("{name}.mha_ctx"), cfg.d_model, cfg.nhead(), rng)?,
            ln_img: LayerNorm::init(params, &format!("{name}.ln_img"), cfg.d_model),
            mha_img: Mha::init(params, &format!("{name}.mha_img"), cfg.d_model, cfg.nhead(), rng)?,
            ln_mlp: LayerNorm::init(params, &format!("{name}.ln_mlp"), cfg.d_model),
            mlp: Ffn::init(params, &format!("{name}.mlp"), cfg.d_model, cfg.mlp_hidden, rng),
        })
    }
}

/// Per-sample tensors that do not depend on the permutation mask: the
/// embedded context's K/V and the image tokens' K/V for every block. Hoisted
/// once and shared across the K masked forwards of one sample.
pub struct PreparedSample {
    ctx_kv: Vec<(NodeId, NodeId)>,
    img_kv: Vec<(NodeId, NodeId)>,
}

pub struct Decoder {
    /// Learned position-query table p, (T+1)×d.
    pub pos_q: ParamId,
    /// Context token embedding table, (C+3)×d.
    pub ctx_embed: ParamId,
    /// Learned positional table added to the embedded context, (T+1)×d.
    pub ctx_pos: ParamId,
    blocks: Vec<DecoderBlock>,
    pub head: Linear,
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: DecoderConfig,
        charset: &Charset,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let pos_q = params.register(
            format!("{name}.pos_q"),
            crate::nn::trunc_normal(rng, vec![cfg.t_max + 1, cfg.d_model], 0.02),
        );
        let ctx_embed = params.register(
            format!("{name}.ctx_embed"),
            crate::nn::trunc_normal(rng, vec![charset.embed_rows(), cfg.d_model], 0.02),
        );
        let ctx_pos = params.register(
            format!("{name}.ctx_pos"),
            crate::nn::trunc_normal(rng, vec![cfg.t_max + 1, cfg.d_model], 0.02),
        );
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock::init(params, &format!("{name}.block{i}"), &cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::init(params, &format!("{name}.head"), cfg.d_model, charset.n_classes(), rng);
        Ok(Self { pos_q, ctx_embed, ctx_pos, blocks, head, cfg })
    }

    /// Embeds the context ids and projects all mask-independent K/V pairs.
    pub fn prepare(
        &self,
        g: &mut Graph,
        z: NodeId,
        context_ids: &[usize],
    ) -> Result<PreparedSample, TensorError> {
        if context_ids.len() != self.cfg.t_max + 1 {
            return Err(TensorError::Config(format!(
                "context has {} ids, expected t_max+1 = {}",
                context_ids.len(),
                self.cfg.t_max + 1
            )));
        }
        let table = g.param(self.ctx_embed);
        let gathered = g.tape.gather(table, context_ids)?;
        let pos = g.param(self.ctx_pos);
        let ctx = g.tape.add(gathered, pos)?;

        let mut ctx_kv = Vec::with_capacity(self.blocks.len());
        let mut img_kv = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let normed = block.ln_ctx.forward(g, ctx)?;
            ctx_kv.push(block.mha_ctx.project_kv(g, normed)?);
            img_kv.push(block.mha_img.project_kv(g, z)?);
        }
        Ok(PreparedSample { ctx_kv, img_kv })
    }

    /// One masked decoding pass over a prepared sample: returns the
    /// (T+1)×(C+1) logits.
    pub fn forward_prepared(
        &self,
        g: &mut Graph,
        prepared: &PreparedSample,
        mask: &Arc<AttnMask>,
    ) -> Result<NodeId, TensorError> {
        let mut x = g.param(self.pos_q);
        for (i, block) in self.blocks.iter().enumerate() {
            let q = block.ln_q.forward(g, x)?;
            let (ck, cv) = prepared.ctx_kv[i];
            let from_ctx = block.mha_ctx.forward_with_kv(g, q, ck, cv, Some(mask))?;
            let x1 = g.tape.add(x, from_ctx)?;

            let qi = block.ln_img.forward(g, x1)?;
            let (ik, iv) = prepared.img_kv[i];
            let from_img = block.mha_img.forward_with_kv(g, qi, ik, iv, None)?;
            let x2 = g.tape.add(x1, from_img)?;

            let normed = block.ln_mlp.forward(g, x2)?;
            let expanded = block.mlp.forward(g, normed)?;
            x = g.tape.add(x2, expanded)?;
        }
        self.head.forward(g, x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        z: NodeId,
        context_ids: &[usize],
        mask: &Arc<AttnMask>,
    ) -> Result<NodeId, TensorError> {
        let prepared = self.prepare(g, z, context_ids)?;
        self.forward_prepared(g, &prepared, mask)
    }

    /// Permutation-averaged cross-entropy for one sample: each permutation's
    /// mask is ANDed with the pad mask, logits are scored against the
    /// canonical targets over active positions, and the K losses are meaned.
    pub fn perm_loss(
        &self,
        g: &mut Graph,
        z: NodeId,
        label: &EncodedLabel,
        perms: &[Vec<usize>],
    ) -> Result<NodeId, TensorError> {
        if perms.is_empty() {
            return Err(TensorError::Config("need at least one permutation".into()));
        }
        let prepared = self.prepare(g, z, &label.context)?;
        let pad = pad_mask(self.cfg.t_max, label.len);
        let mut total: Option<NodeId> = None;
        for perm in perms {
            let mask = Arc::new(perm_to_mask(perm, self.cfg.t_max)?.and(&pad)?);
            let logits = self.forward_prepared(g, &prepared, &mask)?;
            let ce = g.tape.ce_loss_mean(logits, &label.targets, &label.active)?;
            total = Some(match total {
                None => ce,
                Some(acc) => g.tape.add(acc, ce)?,
            });
        }
        Ok(g.tape.scale(total.expect("non-empty perms"), 1.0 / perms.len() as f64))
    }

    /// Left-to-right greedy inference under the identity mask: feed argmax
    /// tokens until `[E]` or T characters.
    pub fn greedy_decode(
        &self,
        params: &ParamSet,
        charset: &Charset,
        z: &Tensor,
    ) -> Result<String, TensorError> {
        let t = self.cfg.t_max;
        let identity: Vec<usize> = (0..t).collect();
        let causal = perm_to_mask(&identity, t)?;
        let mut context = vec![charset.pad(); t + 1];
        context[0] = charset.bos();
        let mut out = String::new();
        for step in 0..t {
            let mask = Arc::new(causal.and(&pad_mask(t, step))?);
            let mut g = Graph::new(params);
            let zn = g.constant(z.clone());
            let logits = self.forward(&mut g, zn, &context, &mask)?;
            let row = g.tape.value(logits).row(step);
            let (argmax, _) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("non-empty class row");
            if argmax == Charset::EOS {
                break;
            }
            out.push(charset.char_of(argmax).expect("head emits only symbols and [E]"));
            context[step + 1] = argmax;
        }
        Ok(out)
    }
}
