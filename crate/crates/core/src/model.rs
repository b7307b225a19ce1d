//! Full recognizer assembly: twin patch-embed + encoder branches, the
//! fusion stage (simple merges or the hypergraph prompt path), and the
//! permuted decoder, with modality-ablation input zeroing.
//!
//! Data flow: the RGB plane is patch-embedded to `T_r`; the event plane is
//! patch-embedded and fully encoded to `F_e`; the chosen fusion strategy
//! merges the two into the RGB backbone (as its input, or as a layer-wise
//! prompt); the backbone output `z` feeds the decoder's image
//! cross-attention.

use std::borrow::Cow;
use std::str::FromStr;

use rand::Rng;

use crate::decoder::{Charset, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, PatchEmbed, PatchEmbedConfig};
use crate::event::ImagePlane;
use crate::hypergraph::{FusionStrategy, Hypergraph, PromptHead};
use crate::nn::{Graph, Linear, ParamSet};
use crate::tape::NodeId;
use crate::tensor::TensorError;

/// Which input planes evaluation feeds the model: ablation modes replace the
/// absent branch's plane with zeros, the architecture is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    RgbOnly,
    EventOnly,
    Fused,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::RgbOnly, EvalMode::EventOnly, EvalMode::Fused];
}

impl FromStr for EvalMode {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, TensorError> {
        match s {
            "rgb" | "rgb_only" => Ok(EvalMode::RgbOnly),
            "event" | "event_only" => Ok(EvalMode::EventOnly),
            "fused" => Ok(EvalMode::Fused),
            other => Err(TensorError::Config(format!(
                "unknown eval mode `{other}` (expected rgb, event, or fused)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::RgbOnly => "rgb_only",
            EvalMode::EventOnly => "event_only",
            EvalMode::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch: PatchEmbedConfig,
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    /// Neighbours per hypergraph anchor.
    pub knn_k: usize,
    pub fusion: FusionStrategy,
    /// 1-based backbone blocks that receive the prompt (hypergraph-prompt
    /// strategy only); must be sorted and duplicate-free.
    pub inject_layers: Vec<usize>,
    /// Share the transformer blocks between the RGB and event branches
    /// (patch embeddings stay separate).
    pub share_encoders: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 32×128 inputs, 4×8 patches (128 tokens), four
    /// 128-wide blocks per branch, prompts injected at every block.
    pub fn desk(fusion: FusionStrategy) -> Self {
        Self {
            patch: PatchEmbedConfig {
                input_h: 32,
                input_w: 128,
                patch_h: 4,
                patch_w: 8,
                d_model: 128,
            },
            enc: EncoderConfig { n_blocks: 4, d_model: 128, nhead: 4, ffn_hidden: 512 },
            dec: DecoderConfig { d_model: 128, t_max: 10, mlp_hidden: 512, depth: 1 },
            knn_k: 10,
            fusion,
            inject_layers: (1..=4).collect(),
            share_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.patch.validate()?;
        self.enc.validate()?;
        self.dec.validate()?;
        if self.patch.d_model != self.enc.d_model || self.enc.d_model != self.dec.d_model {
            return Err(TensorError::Config(format!(
                "width mismatch: patch {} / encoder {} / decoder {}",
                self.patch.d_model, self.enc.d_model, self.dec.d_model
            )));
        }
        if self.knn_k == 0 {
            return Err(TensorError::Config("knn_k must be at least 1".into()));
        }
        for (i, &l) in self.inject_layers.iter().enumerate() {
            if l == 0 || l > self.enc.n_blocks {
                return Err(TensorError::Config(format!(
                    "inject layer {l} outside 1..={}",
                    self.enc.n_blocks
                )));
            }
            if i > 0 && self.inject_layers[i - 1] >= l {
                return Err(TensorError::Config(
                    "inject_layers must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub charset: Charset,
    pub embed_rgb: PatchEmbed,
    pub embed_ev: PatchEmbed,
    pub enc_rgb: Encoder,
    pub enc_ev: Encoder,
    pub prompt: PromptHead,
    /// Down-projection 2C′ → C′ for the plain concatenation strategy.
    pub concat_proj: Linear,
    pub decoder: Decoder,
}

impl Model {
    /// Registers every parameter in a fixed order (stable across runs, which
    /// the checkpoint index relies on). All fusion heads are always present
    /// so the parameter table does not depend on the strategy.
    pub fn init(
        params: &mut ParamSet,
        cfg: ModelConfig,
        charset: Charset,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let embed_rgb = PatchEmbed::init(params, "embed_rgb", cfg.patch, rng)?;
        let embed_ev = PatchEmbed::init(params, "embed_ev", cfg.patch, rng)?;
        let enc_rgb = Encoder::init(params, "enc_rgb", cfg.enc, rng)?;
        let enc_ev = if cfg.share_encoders {
            enc_rgb.clone()
        } else {
            Encoder::init(params, "enc_ev", cfg.enc, rng)?
        };
        let prompt = PromptHead::init(params, "prompt", cfg.enc.d_model, cfg.knn_k, rng);
        let concat_proj =
            Linear::init(params, "concat_proj", 2 * cfg.enc.d_model, cfg.enc.d_model, rng);
        let decoder = Decoder::init(params, "decoder", cfg.dec, &charset, rng)?;
        Ok(Self {
            cfg,
            charset,
            embed_rgb,
            embed_ev,
            enc_rgb,
            enc_ev,
            prompt,
            concat_proj,
            decoder,
        })
    }

    fn check_planes(&self, rgb: &ImagePlane, event_gray: &ImagePlane) -> Result<(), TensorError> {
        let (h, w) = (self.cfg.patch.input_h, self.cfg.patch.input_w);
        if rgb.h() != h || rgb.w() != w || rgb.channels() != 3 {
            return Err(TensorError::Config(format!(
                "RGB plane is {}x{}x{}, model expects {h}x{w}x3",
                rgb.h(),
                rgb.w(),
                rgb.channels()
            )));
        }
        if event_gray.h() != h || event_gray.w() != w || event_gray.channels() != 1 {
            return Err(TensorError::Config(format!(
                "event plane is {}x{}x{}, model expects {h}x{w}x1",
                event_gray.h(),
                event_gray.w(),
                event_gray.channels()
            )));
        }
        Ok(())
    }

    /// Encodes one sample to image tokens `z` (N×C′). Ablation modes zero
    /// the absent plane. Returns the fused hypergraph when the strategy
    /// builds one (for inspection tooling).
    pub fn image_tokens(
        &self,
        g: &mut Graph,
        rgb: &ImagePlane,
        event_gray: &ImagePlane,
        mode: EvalMode,
    ) -> Result<(NodeId, Option<Hypergraph>), TensorError> {
        self.check_planes(rgb, event_gray)?;
        let (h, w) = (self.cfg.patch.input_h, self.cfg.patch.input_w);
        let rgb_eff: Cow<ImagePlane> = match mode {
            EvalMode::EventOnly => Cow::Owned(ImagePlane::filled(h, w, 3, 0.0)),
            _ => Cow::Borrowed(rgb),
        };
        let ev_eff: Cow<ImagePlane> = match mode {
            EvalMode::RgbOnly => Cow::Owned(ImagePlane::filled(h, w, 1, 0.0)),
            _ => Cow::Borrowed(event_gray),
        };

        let t_r = self.embed_rgb.embed_image(g, &rgb_eff)?;
        let ev_tokens = self.embed_ev.embed_image(g, &ev_eff.to_rgb())?;
        let f_e = self.enc_ev.forward(g, ev_tokens)?;

        match self.cfg.fusion {
            FusionStrategy::Addition => {
                let x = g.tape.add(t_r, f_e)?;
                Ok((self.enc_rgb.forward(g, x)?, None))
            }
            FusionStrategy::Concatenate => {
                let cat = g.tape.concat_cols(t_r, f_e)?;
                let x = self.concat_proj.forward(g, cat)?;
                Ok((self.enc_rgb.forward(g, x)?, None))
            }
            FusionStrategy::HypergraphFusion => {
                let (prompt, hg) = self.prompt.make_prompt(g, t_r, f_e)?;
                Ok((self.enc_rgb.forward(g, prompt)?, Some(hg)))
            }
            FusionStrategy::HypergraphPrompt => {
                let (prompt, hg) = self.prompt.make_prompt(g, t_r, f_e)?;
                let z = self.enc_rgb.forward_with_prompts(
                    g,
                    t_r,
                    Some(prompt),
                    &self.cfg.inject_layers,
                )?;
                Ok((z, Some(hg)))
            }
        }
    }

    /// Permutation-averaged training loss for one labelled sample (always
    /// fused — ablation modes are an evaluation concept).
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        rgb: &ImagePlane,
        event_gray: &ImagePlane,
        label: &str,
        perms: &[Vec<usize>],
    ) -> Result<NodeId, TensorError> {
        let (z, _) = self.image_tokens(g, rgb, event_gray, EvalMode::Fused)?;
        let encoded = self.charset.encode_label(label, self.cfg.dec.t_max)?;
        self.decoder.perm_loss(g, z, &encoded, perms)
    }

    /// Greedy inference: one encoder pass produces `z`, then the decoder
    /// alone runs per emitted character.
    pub fn predict(
        &self,
        params: &ParamSet,
        rgb: &ImagePlane,
        event_gray: &ImagePlane,
        mode: EvalMode,
    ) -> Result<String, TensorError> {
        let z_val = {
            let mut g = Graph::new(params);
            let (z, _) = self.image_tokens(&mut g, rgb, event_gray, mode)?;
            g.tape.value(z).clone()
        };
        self.decoder.greedy_decode(params, &self.charset, &z_val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, GradStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(fusion: FusionStrategy) -> ModelConfig {
        ModelConfig {
            patch: PatchEmbedConfig { input_h: 8, input_w: 16, patch_h: 4, patch_w: 8, d_model: 32 },
            enc: EncoderConfig { n_blocks: 2, d_model: 32, nhead: 2, ffn_hidden: 48 },
            dec: DecoderConfig { d_model: 32, t_max: 3, mlp_hidden: 40, depth: 1 },
            knn_k: 2,
            fusion,
            inject_layers: vec![1, 2],
            share_encoders: false,
        }
    }

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImagePlane {
        let pixels = (0..h * w * c).map(|_| rng.random_range(0.0..=1.0)).collect();
        ImagePlane::new(h, w, c, pixels).unwrap()
    }

    fn build(fusion: FusionStrategy, seed: u64) -> (ParamSet, Model) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(
            &mut params,
            tiny_cfg(fusion),
            Charset::new("012").unwrap(),
            &mut rng,
        )
        .unwrap();
        (params, model)
    }

    #[test]
    fn every_strategy_emits_token_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        for fusion in FusionStrategy::ALL {
            let (params, model) = build(fusion, 7);
            let mut g = Graph::new(&params);
            let (z, hg) = model.image_tokens(&mut g, &rgb, &ev, EvalMode::Fused).unwrap();
            assert_eq!(g.tape.value(z).rows_cols(), (4, 32), "{fusion}");
            let wants_graph = matches!(
                fusion,
                FusionStrategy::HypergraphFusion | FusionStrategy::HypergraphPrompt
            );
            assert_eq!(hg.is_some(), wants_graph, "{fusion}");
            if let Some(hg) = hg {
                assert_eq!(hg.n_vertices(), 4);
            }
        }
    }

    #[test]
    fn strategies_produce_distinct_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        let mut outputs = Vec::new();
        for fusion in FusionStrategy::ALL {
            let (params, model) = build(fusion, 7); // same init seed
            let mut g = Graph::new(&params);
            let (z, _) = model.image_tokens(&mut g, &rgb, &ev, EvalMode::Fused).unwrap();
            outputs.push(g.tape.value(z).clone());
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert_ne!(outputs[i].data(), outputs[j].data(), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn event_only_mode_ignores_rgb_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        let rgb_a = random_plane(&mut rng, 8, 16, 3);
        let rgb_b = random_plane(&mut rng, 8, 16, 3);
        let (params, model) = build(FusionStrategy::HypergraphPrompt, 8);
        let run = |rgb: &ImagePlane, mode: EvalMode| {
            let mut g = Graph::new(&params);
            let (z, _) = model.image_tokens(&mut g, rgb, &ev, mode).unwrap();
            g.tape.value(z).clone()
        };
        let a = run(&rgb_a, EvalMode::EventOnly);
        let b = run(&rgb_b, EvalMode::EventOnly);
        assert_eq!(a.data(), b.data());
        // while the fused mode does depend on the RGB plane
        let fa = run(&rgb_a, EvalMode::Fused);
        let fb = run(&rgb_b, EvalMode::Fused);
        assert_ne!(fa.data(), fb.data());
    }

    #[test]
    fn rgb_only_mode_ignores_event_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev_a = random_plane(&mut rng, 8, 16, 1);
        let ev_b = random_plane(&mut rng, 8, 16, 1);
        let (params, model) = build(FusionStrategy::HypergraphPrompt, 9);
        let run = |ev: &ImagePlane, mode: EvalMode| {
            let mut g = Graph::new(&params);
            let (z, _) = model.image_tokens(&mut g, &rgb, ev, mode).unwrap();
            g.tape.value(z).clone()
        };
        assert_eq!(run(&ev_a, EvalMode::RgbOnly).data(), run(&ev_b, EvalMode::RgbOnly).data());
        assert_ne!(run(&ev_a, EvalMode::Fused).data(), run(&ev_b, EvalMode::Fused).data());
    }

    #[test]
    fn shared_encoders_reuse_block_parameters() {
        let count = |share: bool| {
            let mut params = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut cfg = tiny_cfg(FusionStrategy::HypergraphPrompt);
            cfg.share_encoders = share;
            Model::init(&mut params, cfg, Charset::new("012").unwrap(), &mut rng).unwrap();
            params.ids().count()
        };
        let separate = count(false);
        let shared = count(true);
        assert!(shared < separate, "shared {shared} vs separate {separate}");
        // exactly one encoder's parameters disappear: 2 blocks × (2 LN + 4
        // attention linears + 2 MLP linears, each linear = w+b) + final LN
        let per_encoder = 2 * (2 * 2 + 4 * 2 + 2 * 2) + 2;
        assert_eq!(separate - shared, per_encoder);
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let mut bad_width = tiny_cfg(FusionStrategy::Addition);
        bad_width.dec.d_model = 64;
        assert!(bad_width.validate().is_err());

        let mut bad_inject = tiny_cfg(FusionStrategy::HypergraphPrompt);
        bad_inject.inject_layers = vec![0];
        assert!(bad_inject.validate().is_err());
        bad_inject.inject_layers = vec![3];
        assert!(bad_inject.validate().is_err());
        bad_inject.inject_layers = vec![1, 1];
        assert!(bad_inject.validate().is_err());

        let mut bad_k = tiny_cfg(FusionStrategy::Addition);
        bad_k.knn_k = 0;
        assert!(bad_k.validate().is_err());

        assert!(ModelConfig::desk(FusionStrategy::HypergraphPrompt).validate().is_ok());
    }

    #[test]
    fn random_init_loss_sits_near_uniform_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        let (params, model) = build(FusionStrategy::HypergraphPrompt, 10);
        let perms = crate::decoder::sample_permutations(3, 2, 0).unwrap();
        let mut g = Graph::new(&params);
        let loss = model.sample_loss(&mut g, &rgb, &ev, "21", &perms).unwrap();
        let v = g.tape.value(loss).data()[0];
        let uniform = (model.charset.n_classes() as f64).ln(); // ln 4
        assert!((v - uniform).abs() < 0.5, "loss {v} vs ln(C+1) {uniform}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        let run = |seed: u64| {
            let (params, model) = build(FusionStrategy::HypergraphPrompt, seed);
            let mut g = Graph::new(&params);
            let (z, _) = model.image_tokens(&mut g, &rgb, &ev, EvalMode::Fused).unwrap();
            g.tape.value(z).clone()
        };
        assert_eq!(run(21).data(), run(21).data());
        assert_ne!(run(21).data(), run(22).data());
    }

    #[test]
    fn predictions_stay_within_charset_and_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (params, model) = build(FusionStrategy::HypergraphPrompt, 13);
        for _ in 0..4 {
            let rgb = random_plane(&mut rng, 8, 16, 3);
            let ev = random_plane(&mut rng, 8, 16, 1);
            for mode in EvalMode::ALL {
                let s = model.predict(&params, &rgb, &ev, mode).unwrap();
                assert!(s.chars().count() <= 3);
                assert!(s.chars().all(|c| model.charset.symbols().contains(&c)));
            }
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rgb = random_plane(&mut rng, 8, 16, 3);
        let ev = random_plane(&mut rng, 8, 16, 1);
        let (mut params, model) = build(FusionStrategy::HypergraphPrompt, 15);
        let perms = crate::decoder::sample_permutations(3, 2, 3).unwrap();

        let mut g = Graph::new(&params);
        let loss = model.sample_loss(&mut g, &rgb, &ev, "102", &perms).unwrap();
        g.tape.backward(loss).unwrap();
        let mut grads = GradStore::zeros_like(&params);
        g.collect_grads(&mut grads);
        drop(g);

        let max_rel = grad_check_params(
            &mut params,
            &grads,
            |p| {
                let mut g = Graph::new(p);
                let loss = model.sample_loss(&mut g, &rgb, &ev, "102", &perms)?;
                Ok(g.tape.value(loss).data()[0])
            },
            2,
            1e-5,
            904,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn eval_mode_strings_round_trip() {
        for mode in EvalMode::ALL {
            assert_eq!(mode.to_string().parse::<EvalMode>().unwrap(), mode);
        }
        assert_eq!("rgb".parse::<EvalMode>().unwrap(), EvalMode::RgbOnly);
        assert_eq!("event".parse::<EvalMode>().unwrap(), EvalMode::EventOnly);
        assert!("both".parse::<EvalMode>().is_err());
    }
}
