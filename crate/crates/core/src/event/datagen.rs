//! Dataset generation: sampling labels, motion, and degradations, and
//! persisting rendered pairs as netpbm images plus a manifest.
//!
//! Every sample is rendered from an RNG seeded by (master seed, index), so
//! regeneration is reproducible sample-by-sample regardless of parallelism.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng::derive_seed;

use super::font::FontAtlas;
use super::image::Degradation;
use super::manifest::{write_manifest, ManifestEntry};
use super::render::{render_text_sample, RenderConfig, RenderedSample};
use super::{
    read_pgm, read_ppm, write_event_csv, write_pgm, write_ppm, EventError, SamplePair,
};

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Prefix for sample ids, e.g. "train" → "train-00042".
    pub id_prefix: String,
    pub charset: String,
    pub render: RenderConfig,
    /// Draw a per-sample degradation from the built-in mix (dark / blur /
    /// noise / dark+blur, mostly clean). Mutually exclusive with `fixed`.
    pub degrade_mix: bool,
    /// Degradations applied identically to every sample (used for stressed
    /// test sets). Ignored when `degrade_mix` is set.
    pub fixed: Vec<Degradation>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            seed: 0,
            id_prefix: "sample".into(),
            charset: "0123456789K+".into(),
            render: RenderConfig::default(),
            degrade_mix: false,
            fixed: Vec::new(),
        }
    }
}

/// Draws a label: half marker-style `K<digits>+<digits>` (when the charset
/// supports it), half uniform strings of length 3–7, so every character
/// appears at every position over a large draw.
fn sample_label(charset: &[char], rng: &mut impl Rng) -> String {
    let digits: Vec<char> = charset.iter().copied().filter(|c| c.is_ascii_digit()).collect();
    let marker_style = charset.contains(&'K')
        && charset.contains(&'+')
        && !digits.is_empty()
        && rng.random_bool(0.5);
    if marker_style {
        let mut label = String::from("K");
        for _ in 0..rng.random_range(1..=3usize) {
            label.push(digits[rng.random_range(0..digits.len())]);
        }
        label.push('+');
        for _ in 0..rng.random_range(1..=3usize) {
            label.push(digits[rng.random_range(0..digits.len())]);
        }
        label
    } else {
        (0..rng.random_range(3..=7usize))
            .map(|_| charset[rng.random_range(0..charset.len())])
            .collect()
    }
}

fn sample_velocity(rng: &mut impl Rng) -> (f64, f64) {
    let sign = |rng: &mut dyn rand::RngCore| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    (
        sign(rng) * rng.random_range(0.4..0.9),
        sign(rng) * rng.random_range(0.05..0.25),
    )
}

fn sample_degradations(rng: &mut impl Rng) -> Vec<Degradation> {
    let u: f64 = rng.random();
    if u < 0.45 {
        Vec::new()
    } else if u < 0.60 {
        vec![Degradation::Dark { gamma: rng.random_range(2.0..5.0) }]
    } else if u < 0.75 {
        vec![Degradation::Blur { sigma: rng.random_range(0.8..1.8) }]
    } else if u < 0.85 {
        vec![Degradation::Noise { sigma: rng.random_range(0.05..0.15) }]
    } else {
        vec![
            Degradation::Dark { gamma: rng.random_range(2.0..5.0) },
            Degradation::Blur { sigma: rng.random_range(0.8..1.5) },
        ]
    }
}

/// Renders the whole dataset in memory, in index order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<RenderedSample>, EventError> {
    if cfg.charset.is_empty() {
        return Err(EventError::Config("charset must be non-empty".into()));
    }
    let atlas = FontAtlas::builtin();
    for c in cfg.charset.chars() {
        atlas.glyph(c)?; // fail fast before spawning work
    }
    let charset: Vec<char> = cfg.charset.chars().collect();
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            let label = sample_label(&charset, &mut rng);
            let velocity = sample_velocity(&mut rng);
            let degradations = if cfg.degrade_mix {
                sample_degradations(&mut rng)
            } else {
                cfg.fixed.clone()
            };
            render_text_sample(
                format!("{}-{i:05}", cfg.id_prefix),
                &label,
                &atlas,
                velocity,
                &degradations,
                &cfg.render,
                &mut rng,
            )
        })
        .collect()
}

/// Generates the dataset and writes it under `dir`: `img/<id>.{ppm,pgm}`
/// (plus `<id>.csv` event files when `emit_events`), and a `manifest.txt`
/// with paths relative to `dir`. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    cfg: &DatasetConfig,
    emit_events: bool,
) -> Result<PathBuf, EventError> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    let samples = generate_dataset(cfg)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let rgb_rel = PathBuf::from("img").join(format!("{}.ppm", s.pair.id));
        let egray_rel = PathBuf::from("img").join(format!("{}.pgm", s.pair.id));
        write_ppm(&dir.join(&rgb_rel), &s.pair.rgb)?;
        write_pgm(&dir.join(&egray_rel), &s.pair.event_gray)?;
        if emit_events {
            write_event_csv(&img_dir.join(format!("{}.csv", s.pair.id)), &s.events_cropped)?;
        }
        entries.push(ManifestEntry {
            id: s.pair.id.clone(),
            rgb: rgb_rel,
            egray: egray_rel,
            label: s.pair.label.clone(),
        });
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads one manifest entry's image pair, resolving relative paths against
/// `base` (the manifest's directory).
pub fn load_sample(base: &Path, entry: &ManifestEntry) -> Result<SamplePair, EventError> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(SamplePair {
        id: entry.id.clone(),
        rgb: read_ppm(&resolve(&entry.rgb))?,
        event_gray: read_pgm(&resolve(&entry.egray))?,
        label: entry.label.clone(),
    })
}
