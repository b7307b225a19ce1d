//! Patch embedding and the twin transformer encoders.
//!
//! A 32×128 three-channel image is cut into 4×8 patches (128 tokens), each
//! flattened and linearly projected to the model width, plus a learned
//! positional table. Both branches run the same pre-LN block stack
//! (x + MHA(LN(x)), then x + FFN(LN(x))) with a final LN; the RGB branch
//! additionally accepts a prompt tensor added after selected blocks.

use rand::Rng;

use crate::event::ImagePlane;
use crate::nn::{trunc_normal, Ffn, Graph, LayerNorm, Linear, Mha, ParamSet};
use crate::tape::NodeId;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d_model: usize,
}

impl Default for PatchEmbedConfig {
    fn default() -> Self {
        Self { input_h: 32, input_w: 128, patch_h: 4, patch_w: 8, d_model: 128 }
    }
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.patch_h == 0
            || self.patch_w == 0
            || self.input_h % self.patch_h != 0
            || self.input_w % self.patch_w != 0
        {
            return Err(TensorError::Config(format!(
                "input {}x{} not divisible into {}x{} patches",
                self.input_h, self.input_w, self.patch_h, self.patch_w
            )));
        }
        if self.d_model == 0 {
            return Err(TensorError::Config("d_model must be positive".into()));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        (self.input_h / self.patch_h) * (self.input_w / self.patch_w)
    }

    /// Flattened patch length: patch_h · patch_w · 3 channels.
    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub nhead: usize,
    pub ffn_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n_blocks == 0 {
            return Err(TensorError::Config("encoder needs at least one block".into()));
        }
        if self.nhead == 0 || self.d_model % self.nhead != 0 {
            return Err(TensorError::Config(format!(
                "d_model {} not divisible by nhead {}",
                self.d_model, self.nhead
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(TensorError::Config("ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Flattens an image into per-patch rows, row-major over the patch grid,
/// channels interleaved last (y, x, c within a patch).
pub fn patch_rows(img: &ImagePlane, cfg: &PatchEmbedConfig) -> Result<Tensor, TensorError> {
    cfg.validate()?;
    if img.h() != cfg.input_h || img.w() != cfg.input_w || img.channels() != 3 {
        return Err(TensorError::Config(format!(
            "expected {}x{}x3 input, got {}x{}x{}",
            cfg.input_h,
            cfg.input_w,
            img.h(),
            img.w(),
            img.channels()
        )));
    }
    let (gh, gw) = (cfg.input_h / cfg.patch_h, cfg.input_w / cfg.patch_w);
    let mut data = Vec::with_capacity(cfg.n_tokens() * cfg.patch_len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..cfg.patch_h {
                for dx in 0..cfg.patch_w {
                    for c in 0..3 {
                        data.push(img.get(c, py * cfg.patch_h + dy, px * cfg.patch_w + dx));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.n_tokens(), cfg.patch_len()], data)
}

/// Learned patch projection + positional table for one branch.
#[derive(Clone, Copy)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: crate::nn::ParamId,
    pub cfg: PatchEmbedConfig,
}

impl PatchEmbed {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: PatchEmbedConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let proj = Linear::init(params, &format!("{name}.proj"), cfg.patch_len(), cfg.d_model, rng);
        let pos = params.register(
            format!("{name}.pos"),
            trunc_normal(rng, vec![cfg.n_tokens(), cfg.d_model], 0.02),
        );
        Ok(Self { proj, pos, cfg })
    }

    /// Projects pre-flattened patch rows and adds the positional table.
    pub fn forward(&self, g: &mut Graph, patches: NodeId) -> Result<NodeId, TensorError> {
        let projected = self.proj.forward(g, patches)?;
        let pos = g.param(self.pos);
        g.tape.add(projected, pos)
    }

    /// Convenience: image → tokens in one call (constant-embeds the pixels).
    pub fn embed_image(&self, g: &mut Graph, img: &ImagePlane) -> Result<NodeId, TensorError> {
        let rows = patch_rows(img, &self.cfg)?;
        let rows = g.constant(rows);
        self.forward(g, rows)
    }
}

/// Pre-LN transformer block parameters.
#[derive(Clone, Copy)]
pub struct VitBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl VitBlock {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            ln1: LayerNorm::init(params, &format!("{name}.ln1"), cfg.d_model),
            attn: Mha::init(params, &format!("{name}.attn"), cfg.d_model, cfg.nhead, rng)?,
            ln2: LayerNorm::init(params, &format!("{name}.ln2"), cfg.d_model),
            ffn: Ffn::init(params, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let normed = self.ln1.forward(g, x)?;
        let attended = self.attn.forward(g, normed, normed, None)?;
        let x = g.tape.add(x, attended)?;
        let normed = self.ln2.forward(g, x)?;
        let expanded = self.ffn.forward(g, normed)?;
        g.tape.add(x, expanded)
    }
}

/// An L-block encoder with final LN. The prompt hook covers both branches:
/// the event encoder simply never passes one.
#[derive(Clone)]
pub struct Encoder {
    pub blocks: Vec<VitBlock>,
    pub ln_final: LayerNorm,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let blocks = (0..cfg.n_blocks)
            .map(|l| VitBlock::init(params, &format!("{name}.block{l}"), &cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_final = LayerNorm::init(params, &format!("{name}.ln_final"), cfg.d_model);
        Ok(Self { blocks, ln_final, cfg })
    }

    /// Plain L-block encode (the event branch).
    pub fn forward(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId, TensorError> {
        self.forward_with_prompts(g, tokens, None, &[])
    }

    /// Encode with a prompt added after each block listed in
    /// `inject_layers` (1-based block indices). `prompt = None` or an empty
    /// layer set reduces bitwise to the plain encoder.
    pub fn forward_with_prompts(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        prompt: Option<NodeId>,
        inject_layers: &[usize],
    ) -> Result<NodeId, TensorError> {
        for &l in inject_layers {
            if l == 0 || l > self.blocks.len() {
                return Err(TensorError::Config(format!(
                    "inject layer {l} outside 1..={}",
                    self.blocks.len()
                )));
            }
        }
        let mut x = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            if let Some(p) = prompt {
                if inject_layers.contains(&(i + 1)) {
                    x = g.tape.add(x, p)?;
                }
            }
        }
        self.ln_final.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, GradStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig { n_blocks: 2, d_model: 32, nhead: 4, ffn_hidden: 64 }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn default_patch_grid_has_128_tokens() {
        let cfg = PatchEmbedConfig::default();
        assert_eq!(cfg.n_tokens(), 128);
        assert_eq!(cfg.patch_len(), 96);
        assert!(cfg.validate().is_ok());
        let bad = PatchEmbedConfig { patch_h: 5, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_image_zero_params_give_zero_tokens() {
        let cfg = PatchEmbedConfig { input_h: 8, input_w: 16, patch_h: 4, patch_w: 8, d_model: 6 };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let embed = PatchEmbed::init(&mut params, "emb", cfg, &mut rng).unwrap();
        *params.get_mut(embed.proj.w) = Tensor::zeros(vec![cfg.patch_len(), cfg.d_model]);
        *params.get_mut(embed.pos) = Tensor::zeros(vec![cfg.n_tokens(), cfg.d_model]);
        let img = ImagePlane::filled(8, 16, 3, 0.0);
        let mut g = Graph::new(&params);
        let tokens = embed.embed_image(&mut g, &img).unwrap();
        assert!(g.tape.value(tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_patches_swaps_token_rows() {
        let cfg = PatchEmbedConfig { input_h: 8, input_w: 16, patch_h: 4, patch_w: 8, d_model: 5 };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let embed = PatchEmbed::init(&mut params, "emb", cfg, &mut rng).unwrap();
        *params.get_mut(embed.pos) = Tensor::zeros(vec![cfg.n_tokens(), cfg.d_model]);

        // 2×2 patch grid; fill each patch with a distinct constant
        let mut img = ImagePlane::filled(8, 16, 3, 0.0);
        for (idx, val) in [(0usize, 0.2), (1, 0.4), (2, 0.6), (3, 0.8)] {
            let (py, px) = (idx / 2, idx % 2);
            for c in 0..3 {
                for dy in 0..4 {
                    for dx in 0..8 {
                        img.set(c, py * 4 + dy, px * 8 + dx, val);
                    }
                }
            }
        }
        let mut swapped = img.clone();
        for c in 0..3 {
            for dy in 0..4 {
                for dx in 0..8 {
                    swapped.set(c, dy, dx, img.get(c, dy, 8 + dx));
                    swapped.set(c, dy, 8 + dx, img.get(c, dy, dx));
                }
            }
        }

        let run = |im: &ImagePlane| {
            let mut g = Graph::new(&params);
            let t = embed.embed_image(&mut g, im).unwrap();
            g.tape.value(t).clone()
        };
        let base = run(&img);
        let perm = run(&swapped);
        assert_eq!(base.row(0), perm.row(1));
        assert_eq!(base.row(1), perm.row(0));
        assert_eq!(base.row(2), perm.row(2));
        assert_eq!(base.row(3), perm.row(3));
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        let cfg = tiny_encoder_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = VitBlock::init(&mut params, "b", &cfg, &mut rng).unwrap();
        *params.get_mut(block.attn.wo.w) = Tensor::zeros(vec![cfg.d_model, cfg.d_model]);
        *params.get_mut(block.ffn.lin2.w) = Tensor::zeros(vec![cfg.ffn_hidden, cfg.d_model]);
        let x = random_tokens(&mut rng, 5, cfg.d_model);
        let mut g = Graph::new(&params);
        let xn = g.constant(x.clone());
        let out = block.forward(&mut g, xn).unwrap();
        assert!(g.tape.value(out).bits_eq(&x));
    }

    #[test]
    fn blocks_preserve_shape_across_depths() {
        for n_blocks in [1usize, 4, 12] {
            let cfg = EncoderConfig { n_blocks, d_model: 16, nhead: 2, ffn_hidden: 32 };
            let mut params = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let enc = Encoder::init(&mut params, "e", cfg, &mut rng).unwrap();
            let x = random_tokens(&mut rng, 9, cfg.d_model);
            let mut g = Graph::new(&params);
            let xn = g.constant(x);
            let out = enc.forward(&mut g, xn).unwrap();
            assert_eq!(g.tape.value(out).rows_cols(), (9, cfg.d_model));
        }
    }

    #[test]
    fn zero_prompt_and_empty_layers_match_plain_encoder() {
        let cfg = tiny_encoder_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::init(&mut params, "e", cfg, &mut rng).unwrap();
        let x = random_tokens(&mut rng, 6, cfg.d_model);
        let prompt = random_tokens(&mut rng, 6, cfg.d_model);

        let run = |p: Option<&Tensor>, layers: &[usize]| {
            let mut g = Graph::new(&params);
            let xn = g.constant(x.clone());
            let pn = p.map(|t| g.constant(t.clone()));
            let out = enc.forward_with_prompts(&mut g, xn, pn, layers).unwrap();
            g.tape.value(out).clone()
        };

        let plain = run(None, &[]);
        let zero_prompt = run(Some(&Tensor::zeros(vec![6, cfg.d_model])), &[1, 2]);
        let no_layers = run(Some(&prompt), &[]);
        assert!(plain.bits_eq(&zero_prompt));
        assert!(plain.bits_eq(&no_layers));

        let injected = run(Some(&prompt), &[1, 2]);
        assert!(plain.max_abs_diff(&injected) > 1e-6);
        let last_only = run(Some(&prompt), &[2]);
        assert!(injected.max_abs_diff(&last_only) > 1e-9);
    }

    #[test]
    fn prompt_injection_layer_out_of_range_is_rejected() {
        let cfg = tiny_encoder_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::init(&mut params, "e", cfg, &mut rng).unwrap();
        let mut g = Graph::new(&params);
        let x = g.constant(random_tokens(&mut rng, 4, cfg.d_model));
        let p = g.constant(Tensor::zeros(vec![4, cfg.d_model]));
        assert!(enc.forward_with_prompts(&mut g, x, Some(p), &[3]).is_err());
        assert!(enc.forward_with_prompts(&mut g, x, Some(p), &[0]).is_err());
    }

    #[test]
    fn blocks_are_permutation_equivariant_without_positions() {
        let cfg = tiny_encoder_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = VitBlock::init(&mut params, "b", &cfg, &mut rng).unwrap();
        let x = random_tokens(&mut rng, 7, cfg.d_model);
        let perm = [4usize, 2, 6, 0, 3, 5, 1];
        let permuted_in = {
            let mut data = Vec::new();
            for &s in &perm {
                data.extend_from_slice(x.row(s));
            }
            Tensor::new(vec![7, cfg.d_model], data).unwrap()
        };

        let run = |t: &Tensor| {
            let mut g = Graph::new(&params);
            let xn = g.constant(t.clone());
            let out = block.forward(&mut g, xn).unwrap();
            g.tape.value(out).clone()
        };
        let base = run(&x);
        let permuted_out = run(&permuted_in);
        for (dst, &src) in perm.iter().enumerate() {
            for t in 0..cfg.d_model {
                let diff =
                    (permuted_out.data()[dst * cfg.d_model + t] - base.data()[src * cfg.d_model + t])
                        .abs();
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn single_block_gradient_check_including_input() {
        let cfg = EncoderConfig { n_blocks: 1, d_model: 8, nhead: 2, ffn_hidden: 16 };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_id = params.register("in.x", random_tokens(&mut rng, 4, 8));
        let block = VitBlock::init(&mut params, "b", &cfg, &mut rng).unwrap();

        let mut g = Graph::new(&params);
        let xn = g.param(x_id);
        let out = block.forward(&mut g, xn).unwrap();
        let loss = g.tape.mean(out);
        g.tape.backward(loss).unwrap();
        let mut grads = GradStore::zeros_like(&params);
        g.collect_grads(&mut grads);
        drop(g);

        let max_rel = grad_check_params(
            &mut params,
            &grads,
            |p| {
                let mut g = Graph::new(p);
                let xn = g.param(x_id);
                let out = block.forward(&mut g, xn)?;
                let loss = g.tape.mean(out);
                Ok(g.tape.value(loss).data()[0])
            },
            4,
            1e-5,
            902,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn full_encoder_parameter_gradient_check() {
        let cfg = EncoderConfig { n_blocks: 2, d_model: 32, nhead: 4, ffn_hidden: 48 };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Encoder::init(&mut params, "e", cfg, &mut rng).unwrap();
        let x = random_tokens(&mut rng, 8, cfg.d_model);

        let mut g = Graph::new(&params);
        let xn = g.constant(x.clone());
        let out = enc.forward(&mut g, xn).unwrap();
        let loss = g.tape.mean(out);
        g.tape.backward(loss).unwrap();
        let mut grads = GradStore::zeros_like(&params);
        g.collect_grads(&mut grads);
        drop(g);

        let max_rel = grad_check_params(
            &mut params,
            &grads,
            |p| {
                let mut g = Graph::new(p);
                let xn = g.constant(x.clone());
                let out = enc.forward(&mut g, xn)?;
                let loss = g.tape.mean(out);
                Ok(g.tape.value(loss).data()[0])
            },
            3,
            1e-5,
            901,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
