//! Synthetic sample renderer: marker text sliding across a plain background.
//!
//! The string is rasterized once from the bitmap atlas, then shifted with
//! sub-pixel bilinear sampling to produce `n_frames` grayscale frames. The
//! frame sequence drives the event simulator; the middle frame (optionally
//! degraded) becomes the RGB view. Both planes are cropped to the text's
//! swept bounding box plus a margin and resized to the recognizer input
//! size, so they stay pixel-aligned by construction.

use rand::Rng;

use super::font::{FontAtlas, GLYPH_H, GLYPH_W};
use super::image::{resize_bilinear, translate_bilinear, Degradation};
use super::{simulate_events, synthesize_frame};
use super::{EventError, EventPoint, EventStream, ImagePlane, SamplePair};

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub out_h: usize,
    pub out_w: usize,
    /// Integer upscale applied to the 5×7 glyphs.
    pub glyph_scale: usize,
    /// Blank columns between characters, at glyph scale.
    pub char_spacing: usize,
    /// Horizontal layout slots the crop always spans. Shorter strings sit
    /// left-aligned in this fixed pitch, so glyph size and per-position
    /// columns do not depend on label length (longer strings widen the
    /// layout to fit). 0 crops tight around the actual text instead.
    pub layout_chars: usize,
    /// Pixels kept around the swept text box when cropping.
    pub margin: usize,
    pub n_frames: usize,
    /// Microseconds between consecutive frames.
    pub frame_dt_us: u64,
    /// Event-simulator log-intensity threshold.
    pub threshold: f64,
    /// Foreground (ink) and background intensities of the clean scene.
    pub fg: f64,
    pub bg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            out_h: 32,
            out_w: 128,
            glyph_scale: 2,
            char_spacing: 2,
            layout_chars: 8,
            margin: 4,
            n_frames: 8,
            frame_dt_us: 1000,
            threshold: 0.2,
            fg: 0.85,
            bg: 0.08,
        }
    }
}

/// A rendered pair plus the event stream re-expressed in the cropped frame's
/// coordinates, for callers that persist raw events next to the images.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub pair: SamplePair,
    pub events_cropped: EventStream,
}

/// Renders `text` moving at `velocity` (px/frame, rightward/downward
/// positive). Degradations apply to the RGB plane only, in order. The result
/// is a pure function of the arguments and the RNG state.
pub fn render_text_sample(
    id: impl Into<String>,
    text: &str,
    atlas: &FontAtlas,
    velocity: (f64, f64),
    degradations: &[Degradation],
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RenderedSample, EventError> {
    if text.is_empty() {
        return Err(EventError::Validation("label must be non-empty".into()));
    }
    if cfg.glyph_scale == 0 || cfg.n_frames < 2 {
        return Err(EventError::Config(format!(
            "glyph_scale {} / n_frames {} out of range",
            cfg.glyph_scale, cfg.n_frames
        )));
    }
    let s = cfg.glyph_scale;
    let n_chars = text.chars().count();
    let layout_n = if cfg.layout_chars == 0 { n_chars } else { cfg.layout_chars.max(n_chars) };
    let text_w = layout_n * GLYPH_W * s + (layout_n - 1) * cfg.char_spacing;
    let text_h = GLYPH_H * s;

    // total displacement over the clip; the canvas is sized so the swept box
    // plus margin never touches the border
    let steps = (cfg.n_frames - 1) as f64;
    let dx_total = velocity.0 * steps;
    let dy_total = velocity.1 * steps;
    let pad = cfg.margin + 2;
    let x0 = pad + (-dx_total).max(0.0).ceil() as usize;
    let y0 = pad + (-dy_total).max(0.0).ceil() as usize;
    let canvas_w = text_w + 2 * pad + dx_total.abs().ceil() as usize;
    let canvas_h = text_h + 2 * pad + dy_total.abs().ceil() as usize;

    // ink coverage mask at the base position
    let mut mask = ImagePlane::filled(canvas_h, canvas_w, 1, 0.0);
    let mut pen_x = x0;
    for c in text.chars() {
        let rows = atlas.glyph(c)?;
        for gy in 0..GLYPH_H {
            for gx in 0..GLYPH_W {
                if FontAtlas::is_set(rows, gy, gx) {
                    for yy in 0..s {
                        for xx in 0..s {
                            mask.set(0, y0 + gy * s + yy, pen_x + gx * s + xx, 1.0);
                        }
                    }
                }
            }
        }
        pen_x += GLYPH_W * s + cfg.char_spacing;
    }

    let to_intensity = |coverage: &ImagePlane| -> ImagePlane {
        let pixels = coverage
            .pixels()
            .iter()
            .map(|&m| cfg.bg + (cfg.fg - cfg.bg) * m)
            .collect();
        ImagePlane::new(canvas_h, canvas_w, 1, pixels).expect("affine blend stays in range")
    };

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut timestamps = Vec::with_capacity(cfg.n_frames);
    for j in 0..cfg.n_frames {
        let shifted = translate_bilinear(&mask, velocity.0 * j as f64, velocity.1 * j as f64, 0.0);
        frames.push(to_intensity(&shifted));
        timestamps.push(j as u64 * cfg.frame_dt_us);
    }

    let stream = simulate_events(&frames, &timestamps, cfg.threshold)?;
    let event_full = synthesize_frame(&stream, 0, *timestamps.last().expect("n_frames >= 2"))?;

    let mid = cfg.n_frames / 2;
    let mut rgb = frames[mid].to_rgb();
    for d in degradations {
        rgb = d.apply(&rgb, rng);
    }

    // swept text box + margin, clamped to the canvas
    let bx0 = (x0 as f64 + dx_total.min(0.0)).floor() as usize - cfg.margin;
    let by0 = (y0 as f64 + dy_total.min(0.0)).floor() as usize - cfg.margin;
    let bx1 = ((x0 + text_w) as f64 + dx_total.max(0.0)).ceil() as usize + cfg.margin;
    let by1 = ((y0 + text_h) as f64 + dy_total.max(0.0)).ceil() as usize + cfg.margin;
    let (bx1, by1) = (bx1.min(canvas_w), by1.min(canvas_h));
    let (bw, bh) = (bx1 - bx0, by1 - by0);

    let rgb_out = resize_bilinear(&rgb.crop(by0, bx0, bh, bw)?, cfg.out_h, cfg.out_w)?;
    let event_out = resize_bilinear(&event_full.crop(by0, bx0, bh, bw)?, cfg.out_h, cfg.out_w)?;

    let cropped_events: Vec<EventPoint> = stream
        .events()
        .iter()
        .filter(|e| {
            (bx0..bx1).contains(&(e.x as usize)) && (by0..by1).contains(&(e.y as usize))
        })
        .map(|e| EventPoint {
            t: e.t,
            x: e.x - bx0 as u32,
            y: e.y - by0 as u32,
            p: e.p,
        })
        .collect();
    let events_cropped = EventStream::new(bw as u32, bh as u32, cropped_events)?;

    Ok(RenderedSample {
        pair: SamplePair {
            id: id.into(),
            rgb: rgb_out,
            event_gray: event_out,
            label: text.to_string(),
        },
        events_cropped,
    })
}
