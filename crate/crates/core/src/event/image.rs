//! Image-plane operations: bilinear resampling, photometric degradations,
//! and 8-bit PGM/PPM persistence.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EventError, ImagePlane};

/// Corner-aligned bilinear resize. Output pixel (i,j) samples the source at
/// `(i·(h−1)/(h'−1), j·(w−1)/(w'−1))`; a size-1 output axis samples the
/// source midpoint. Values stay in [0,1] because bilinear weights are a
/// convex combination.
pub fn resize_bilinear(img: &ImagePlane, out_h: usize, out_w: usize) -> Result<ImagePlane, EventError> {
    if out_h == 0 || out_w == 0 {
        return Err(EventError::Validation(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    let (h, w, ch) = (img.h(), img.w(), img.channels());
    let src_y = |i: usize| -> f64 {
        if out_h == 1 {
            (h - 1) as f64 / 2.0
        } else {
            i as f64 * (h - 1) as f64 / (out_h - 1) as f64
        }
    };
    let src_x = |j: usize| -> f64 {
        if out_w == 1 {
            (w - 1) as f64 / 2.0
        } else {
            j as f64 * (w - 1) as f64 / (out_w - 1) as f64
        }
    };
    let mut pixels = Vec::with_capacity(out_h * out_w * ch);
    for c in 0..ch {
        for i in 0..out_h {
            let sy = src_y(i);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for j in 0..out_w {
                let sx = src_x(j);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v = (1.0 - fy) * (1.0 - fx) * img.get(c, y0, x0)
                    + (1.0 - fy) * fx * img.get(c, y0, x1)
                    + fy * (1.0 - fx) * img.get(c, y1, x0)
                    + fy * fx * img.get(c, y1, x1);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::new(out_h, out_w, ch, pixels)
}

/// Shifts an image by a (possibly fractional) offset with bilinear sampling;
/// source reads outside the frame contribute `fill`. Positive dx moves
/// content rightward, positive dy downward.
pub fn translate_bilinear(img: &ImagePlane, dx: f64, dy: f64, fill: f64) -> ImagePlane {
    let (h, w, ch) = (img.h(), img.w(), img.channels());
    let fill = fill.clamp(0.0, 1.0);
    let sample = |c: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            fill
        } else {
            img.get(c, y as usize, x as usize)
        }
    };
    let mut pixels = Vec::with_capacity(h * w * ch);
    for c in 0..ch {
        for i in 0..h {
            let sy = i as f64 - dy;
            let y0 = sy.floor();
            let fy = sy - y0;
            for j in 0..w {
                let sx = j as f64 - dx;
                let x0 = sx.floor();
                let fx = sx - x0;
                let v = (1.0 - fy) * (1.0 - fx) * sample(c, y0 as i64, x0 as i64)
                    + (1.0 - fy) * fx * sample(c, y0 as i64, x0 as i64 + 1)
                    + fy * (1.0 - fx) * sample(c, y0 as i64 + 1, x0 as i64)
                    + fy * fx * sample(c, y0 as i64 + 1, x0 as i64 + 1);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::new(h, w, ch, pixels).expect("translate preserves extent")
}

// ─── Photometric degradations (applied to the RGB branch only) ──────────

/// One degradation step; a sample may apply several in sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    /// Power-law darkening `I → I^gamma` (gamma > 1 darkens).
    Dark { gamma: f64 },
    /// Gaussian blur with the given standard deviation in pixels.
    Blur { sigma: f64 },
    /// Additive zero-mean Gaussian noise, clamped back to [0,1].
    Noise { sigma: f64 },
}

impl Degradation {
    pub fn apply(&self, img: &ImagePlane, rng: &mut impl Rng) -> ImagePlane {
        match *self {
            Degradation::Dark { gamma } => darken_gamma(img, gamma),
            Degradation::Blur { sigma } => blur_gaussian(img, sigma),
            Degradation::Noise { sigma } => noise_gaussian(img, sigma, rng),
        }
    }
}

pub fn darken_gamma(img: &ImagePlane, gamma: f64) -> ImagePlane {
    let pixels = img.pixels().iter().map(|&v| v.powf(gamma)).collect();
    ImagePlane::new(img.h(), img.w(), img.channels(), pixels)
        .expect("powf of [0,1] stays in [0,1] for positive gamma")
}

/// Separable Gaussian blur; kernel radius 3σ, weights renormalized at the
/// borders (no energy leaves the frame).
pub fn blur_gaussian(img: &ImagePlane, sigma: f64) -> ImagePlane {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w, ch) = (img.h(), img.w(), img.channels());

    let mut horizontal = vec![0.0; h * w * ch];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = x as i64 + ki as i64 - radius;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    acc += kv * img.get(c, y, sx as usize);
                    norm += kv;
                }
                horizontal[(c * h + y) * w + x] = acc / norm;
            }
        }
    }
    let mut pixels = vec![0.0; h * w * ch];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = y as i64 + ki as i64 - radius;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    acc += kv * horizontal[(c * h + sy as usize) * w + x];
                    norm += kv;
                }
                pixels[(c * h + y) * w + x] = (acc / norm).clamp(0.0, 1.0);
            }
        }
    }
    ImagePlane::new(h, w, ch, pixels).expect("blur preserves range")
}

pub fn noise_gaussian(img: &ImagePlane, sigma: f64, rng: &mut impl Rng) -> ImagePlane {
    if sigma <= 0.0 {
        return img.clone();
    }
    let dist = Normal::new(0.0, sigma).expect("sigma positive and finite");
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| (v + dist.sample(rng)).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(img.h(), img.w(), img.channels(), pixels).expect("clamped to range")
}

// ─── 8-bit binary PGM/PPM ────────────────────────────────────────────────

/// Writes a grayscale plane as binary PGM (P5), mapping [0,1] → 0..=255.
pub fn write_pgm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<(), EventError> {
    if img.channels() != 1 {
        return Err(EventError::Validation(
            "PGM requires a single-channel image".into(),
        ));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", img.w(), img.h()).into_bytes();
    bytes.extend(img.pixels().iter().map(|&v| quantize(v)));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes a 3-channel plane as binary PPM (P6), interleaving RGB per pixel.
pub fn write_ppm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<(), EventError> {
    if img.channels() != 3 {
        return Err(EventError::Validation(
            "PPM requires a three-channel image".into(),
        ));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", img.w(), img.h()).into_bytes();
    let (h, w) = (img.h(), img.w());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(img.get(c, y, x)));
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImagePlane, EventError> {
    let bytes = std::fs::read(&path)?;
    let (w, h, body) = parse_netpbm_header(&bytes, b"P5")?;
    if body.len() < w * h {
        return Err(EventError::Parse {
            line: 0,
            reason: format!("PGM body has {} bytes, needs {}", body.len(), w * h),
        });
    }
    let pixels = body[..w * h].iter().map(|&b| b as f64 / 255.0).collect();
    ImagePlane::new(h, w, 1, pixels)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImagePlane, EventError> {
    let bytes = std::fs::read(&path)?;
    let (w, h, body) = parse_netpbm_header(&bytes, b"P6")?;
    if body.len() < w * h * 3 {
        return Err(EventError::Parse {
            line: 0,
            reason: format!("PPM body has {} bytes, needs {}", body.len(), w * h * 3),
        });
    }
    let mut pixels = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    ImagePlane::new(h, w, 3, pixels)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_netpbm_header<'a>(
    bytes: &'a [u8],
    magic: &[u8],
) -> Result<(usize, usize, &'a [u8]), EventError> {
    let mut cursor = bytes;
    let mut word = || -> Result<Vec<u8>, EventError> {
        // skip whitespace and `#` comment lines between header tokens
        loop {
            match cursor.first() {
                Some(b) if b.is_ascii_whitespace() => cursor = &cursor[1..],
                Some(b'#') => {
                    while let Some(&b) = cursor.first() {
                        cursor = &cursor[1..];
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let mut out = Vec::new();
        while let Some(&b) = cursor.first() {
            if b.is_ascii_whitespace() {
                break;
            }
            out.push(b);
            cursor = &cursor[1..];
        }
        if out.is_empty() {
            return Err(EventError::Parse {
                line: 0,
                reason: "truncated netpbm header".into(),
            });
        }
        Ok(out)
    };

    let m = word()?;
    if m != magic {
        return Err(EventError::Parse {
            line: 0,
            reason: format!(
                "expected {} image, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&m)
            ),
        });
    }
    let parse_int = |w: Vec<u8>| -> Result<usize, EventError> {
        String::from_utf8_lossy(&w)
            .parse()
            .map_err(|_| EventError::Parse {
                line: 0,
                reason: "bad integer in netpbm header".into(),
            })
    };
    let w = parse_int(word()?)?;
    let h = parse_int(word()?)?;
    let maxval = parse_int(word()?)?;
    if maxval != 255 {
        return Err(EventError::Parse {
            line: 0,
            reason: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    let mut body = cursor;
    // exactly one whitespace byte separates the header from binary data
    if let Some(b) = body.first() {
        if b.is_ascii_whitespace() {
            body = &body[1..];
        }
    }
    Ok((w, h, body))
}
