//! Event-stream ingestion and paired-sample synthesis.
//!
//! An event camera reports per-pixel brightness changes as (t, x, y, ±1)
//! points. This module parses and writes those streams, simulates them from
//! rendered frame sequences with a log-intensity threshold model, collapses
//! them into a grayscale frame by polarity accumulation, and renders moving
//! synthetic marker text into paired RGB/event inputs at 32×128.

mod csv;
mod datagen;
mod font;
mod frame;
mod image;
mod manifest;
mod render;
mod simulate;

pub use csv::{parse_event_csv, parse_event_csv_str, write_event_csv, write_event_csv_string};
pub use font::FontAtlas;
pub use frame::synthesize_frame;
pub use image::{
    blur_gaussian, darken_gamma, noise_gaussian, read_pgm, read_ppm, resize_bilinear,
    translate_bilinear, write_pgm, write_ppm, Degradation,
};
pub use datagen::{generate_dataset, load_sample, write_dataset, DatasetConfig};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use render::{render_text_sample, RenderConfig, RenderedSample};
pub use simulate::{simulate_events, simulate_pixel_scalar};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One camera event: timestamp in microseconds, pixel coordinates, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventPoint {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// +1 for a brightness increase, −1 for a decrease.
    pub p: i8,
}

/// A time-sorted event sequence with its sensor extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    sensor_w: u32,
    sensor_h: u32,
    events: Vec<EventPoint>,
}

impl EventStream {
    /// Validates coordinates/polarity and stably sorts by timestamp.
    pub fn new(
        sensor_w: u32,
        sensor_h: u32,
        mut events: Vec<EventPoint>,
    ) -> Result<Self, EventError> {
        if sensor_w == 0 || sensor_h == 0 {
            return Err(EventError::Validation(format!(
                "sensor extent {sensor_w}x{sensor_h} must be positive"
            )));
        }
        for (i, ev) in events.iter().enumerate() {
            if ev.x >= sensor_w || ev.y >= sensor_h {
                return Err(EventError::Validation(format!(
                    "event {i} at ({}, {}) outside {sensor_w}x{sensor_h} sensor",
                    ev.x, ev.y
                )));
            }
            if ev.p != 1 && ev.p != -1 {
                return Err(EventError::Validation(format!(
                    "event {i} polarity {} not in {{+1, -1}}",
                    ev.p
                )));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            sensor_w,
            sensor_h,
            events,
        })
    }

    pub fn sensor_w(&self) -> u32 {
        self.sensor_w
    }

    pub fn sensor_h(&self) -> u32 {
        self.sensor_h
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Flips every polarity, used by the antisymmetry property tests.
    pub fn negated(&self) -> EventStream {
        EventStream {
            sensor_w: self.sensor_w,
            sensor_h: self.sensor_h,
            events: self.events.iter().map(|e| EventPoint { p: -e.p, ..*e }).collect(),
        }
    }
}

/// A dense image with pixels in [0,1], stored channel-planar
/// (`pixels[c][y][x]` flattened as `c·h·w + y·w + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    h: usize,
    w: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImagePlane {
    pub fn new(h: usize, w: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, EventError> {
        if channels != 1 && channels != 3 {
            return Err(EventError::Validation(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != h * w * channels {
            return Err(EventError::Validation(format!(
                "pixel buffer has {} values, expected {}x{}x{channels} = {}",
                pixels.len(),
                h,
                w,
                h * w * channels
            )));
        }
        for (i, &v) in pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(EventError::Validation(format!(
                    "pixel {i} = {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { h, w, channels, pixels })
    }

    pub fn filled(h: usize, w: usize, channels: usize, value: f64) -> Self {
        Self {
            h,
            w,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); h * w * channels],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.h + y) * self.w + x] = v.clamp(0.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Replicates a single-channel plane to 3 identical channels.
    pub fn to_rgb(&self) -> ImagePlane {
        assert_eq!(self.channels, 1, "to_rgb expects a grayscale plane");
        let mut pixels = Vec::with_capacity(self.pixels.len() * 3);
        for _ in 0..3 {
            pixels.extend_from_slice(&self.pixels);
        }
        ImagePlane {
            h: self.h,
            w: self.w,
            channels: 3,
            pixels,
        }
    }

    /// Crops rows [y0, y0+ch) and columns [x0, x0+cw).
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<ImagePlane, EventError> {
        if y0 + ch > self.h || x0 + cw > self.w || ch == 0 || cw == 0 {
            return Err(EventError::Validation(format!(
                "crop [{y0}+{ch}, {x0}+{cw}] exceeds {}x{}",
                self.h, self.w
            )));
        }
        let mut pixels = Vec::with_capacity(ch * cw * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + ch {
                let base = (c * self.h + y) * self.w + x0;
                pixels.extend_from_slice(&self.pixels[base..base + cw]);
            }
        }
        Ok(ImagePlane {
            h: ch,
            w: cw,
            channels: self.channels,
            pixels,
        })
    }

    pub fn bits_eq(&self, other: &ImagePlane) -> bool {
        self.h == other.h
            && self.w == other.w
            && self.channels == other.channels
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One recognizer input: aligned RGB and event-derived grayscale planes plus
/// the ground-truth string.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub rgb: ImagePlane,
    pub event_gray: ImagePlane,
    pub label: String,
}
