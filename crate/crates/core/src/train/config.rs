//! Flat key=value training configuration with a text round trip. Precedence
//! (CLI flag > config file > default) is realized by applying sources in
//! order onto the defaults.

use std::path::Path;
use std::str::FromStr;

use crate::hypergraph::FusionStrategy;
use crate::model::ModelConfig;
use crate::tensor::TensorError;
use crate::train::adam::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub charset: String,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub floor_frac: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Permutations averaged per training step (1 = plain left-to-right AR).
    pub k_perms: usize,
    /// Checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults (matches [`ModelConfig::desk`]).
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(FusionStrategy::HypergraphPrompt),
            charset: "0123456789K+".into(),
            lr_peak: 7e-4,
            warmup_frac: 0.1,
            floor_frac: 0.01,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            seed: 42,
            k_perms: 6,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TensorError> {
    value.parse().map_err(|_| {
        TensorError::Config(format!("cannot parse `{value}` as a value for `{key}`"))
    })
}

impl TrainConfig {
    /// Applies one key=value override. Unknown keys are errors so typos in
    /// config files cannot pass silently.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TensorError> {
        match key {
            "input_h" => self.model.patch.input_h = parse(key, value)?,
            "input_w" => self.model.patch.input_w = parse(key, value)?,
            "patch_h" => self.model.patch.patch_h = parse(key, value)?,
            "patch_w" => self.model.patch.patch_w = parse(key, value)?,
            "d_model" => {
                let d: usize = parse(key, value)?;
                self.model.patch.d_model = d;
                self.model.enc.d_model = d;
                self.model.dec.d_model = d;
            }
            "n_blocks" => self.model.enc.n_blocks = parse(key, value)?,
            "nhead" => self.model.enc.nhead = parse(key, value)?,
            "ffn_hidden" => self.model.enc.ffn_hidden = parse(key, value)?,
            "t_max" => self.model.dec.t_max = parse(key, value)?,
            "mlp_hidden" => self.model.dec.mlp_hidden = parse(key, value)?,
            "dec_depth" => self.model.dec.depth = parse(key, value)?,
            "knn_k" => self.model.knn_k = parse(key, value)?,
            "fusion" => self.model.fusion = value.parse()?,
            "inject_layers" => {
                self.model.inject_layers = if value == "none" || value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse::<usize>(key, s.trim()))
                        .collect::<Result<_, _>>()?
                };
            }
            "share_encoders" => self.model.share_encoders = parse(key, value)?,
            "charset" => self.charset = value.to_string(),
            "lr_peak" => self.lr_peak = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "floor_frac" => self.floor_frac = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k_perms" => self.k_perms = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => {
                return Err(TensorError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Canonical text form: one key=value per line, fixed key order.
    pub fn to_text(&self) -> String {
        let inject = if self.model.inject_layers.is_empty() {
            "none".to_string()
        } else {
            self.model
                .inject_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        [
            format!("input_h={}", self.model.patch.input_h),
            format!("input_w={}", self.model.patch.input_w),
            format!("patch_h={}", self.model.patch.patch_h),
            format!("patch_w={}", self.model.patch.patch_w),
            format!("d_model={}", self.model.enc.d_model),
            format!("n_blocks={}", self.model.enc.n_blocks),
            format!("nhead={}", self.model.enc.nhead),
            format!("ffn_hidden={}", self.model.enc.ffn_hidden),
            format!("t_max={}", self.model.dec.t_max),
            format!("mlp_hidden={}", self.model.dec.mlp_hidden),
            format!("dec_depth={}", self.model.dec.depth),
            format!("knn_k={}", self.model.knn_k),
            format!("fusion={}", self.model.fusion),
            format!("inject_layers={inject}"),
            format!("share_encoders={}", self.model.share_encoders),
            format!("charset={}", self.charset),
            format!("lr_peak={}", self.lr_peak),
            format!("warmup_frac={}", self.warmup_frac),
            format!("floor_frac={}", self.floor_frac),
            format!("beta1={}", self.adam.beta1),
            format!("beta2={}", self.adam.beta2),
            format!("eps={}", self.adam.eps),
            format!("batch_size={}", self.batch_size),
            format!("epochs={}", self.epochs),
            format!("seed={}", self.seed),
            format!("k_perms={}", self.k_perms),
            format!("checkpoint_every={}", self.checkpoint_every),
        ]
        .join("\n")
            + "\n"
    }

    /// Parses overrides (one `key=value` per line, `#` comments allowed)
    /// onto the defaults.
    pub fn from_text(text: &str) -> Result<Self, TensorError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), TensorError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TensorError::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, TensorError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TensorError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.model.validate()?;
        if self.charset.is_empty() {
            return Err(TensorError::Config("charset must be non-empty".into()));
        }
        if self.lr_peak <= 0.0 || !(0.0..1.0).contains(&self.warmup_frac)
            || !(0.0..=1.0).contains(&self.floor_frac)
        {
            return Err(TensorError::Config(format!(
                "bad schedule: lr_peak={} warmup_frac={} floor_frac={}",
                self.lr_peak, self.warmup_frac, self.floor_frac
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.k_perms == 0 {
            return Err(TensorError::Config(format!(
                "batch_size={}, epochs={}, k_perms={} must all be positive",
                self.batch_size, self.epochs, self.k_perms
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("d_model", "64").unwrap();
        cfg.apply_kv("fusion", "addition").unwrap();
        cfg.apply_kv("inject_layers", "1,3").unwrap();
        cfg.apply_kv("share_encoders", "true").unwrap();
        cfg.apply_kv("seed", "999").unwrap();
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn defaults_are_desk_scale_and_valid() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.model.enc.d_model, 128);
        assert_eq!(cfg.model.enc.n_blocks, 4);
        assert_eq!(cfg.model.dec.t_max, 10);
        assert_eq!(cfg.charset, "0123456789K+");
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.k_perms, 6);
        assert_eq!(cfg.lr_peak, 7e-4);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_kv("learning_rate", "1").is_err());
        let err = cfg.apply_kv("epochs", "many").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        assert!(TrainConfig::from_text("no equals sign here").is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped_and_later_lines_win() {
        let cfg = TrainConfig::from_text("# comment\n\nepochs=3\nepochs=5\n").unwrap();
        assert_eq!(cfg.epochs, 5);
    }

    #[test]
    fn d_model_sets_all_three_widths() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("d_model", "64").unwrap();
        assert_eq!(cfg.model.patch.d_model, 64);
        assert_eq!(cfg.model.enc.d_model, 64);
        assert_eq!(cfg.model.dec.d_model, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_zeroed_counts() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.k_perms = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_peak = -1.0;
        assert!(cfg.validate().is_err());
    }
}
