//! Deterministic toy latent codec.
//!
//! Encoding averages non-overlapping `(t, h, w)` pixel blocks and then folds
//! each `s x s` spatial neighbourhood into channels. Decoding unfolds and
//! replicates, so `decode(encode(v))` is the block average of `v` and
//! `encode` is an exact left inverse of `decode`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Averaging block `(t, h, w)`.
    pub block: (usize, usize, usize),
    /// Spatial space-to-depth factor applied after averaging.
    pub fold: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            block: (2, 2, 2),
            fold: 2,
        }
    }
}

impl CodecConfig {
    /// Total pixel-to-latent downsampling per axis `(t, h, w)`.
    pub fn factors(&self) -> (usize, usize, usize) {
        (self.block.0, self.block.1 * self.fold, self.block.2 * self.fold)
    }

    pub fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels * self.fold * self.fold
    }

    pub fn latent_shape(&self, c: usize, t: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        let (ft, fh, fw) = self.factors();
        if !t.is_multiple_of(ft) || !h.is_multiple_of(fh) || !w.is_multiple_of(fw) || t == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "video {t}x{h}x{w} not divisible by codec factors {ft}x{fh}x{fw}"
            )));
        }
        Ok([self.latent_channels(c), t / ft, h / fh, w / fw])
    }
}

/// `(C, T, H, W)` latent plus the factors that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub values: Array4<f32>,
    pub codec: CodecConfig,
}

pub fn codec_encode(video: &Array4<f32>, codec: CodecConfig) -> Result<LatentVideo> {
    let (c, t, h, w) = video.dim();
    let [lc, lt, lh, lw] = codec.latent_shape(c, t, h, w)?;
    let (bt, bh, bw) = codec.block;
    let s = codec.fold;
    let norm = (bt * bh * bw) as f64;
    let mut out = Array4::<f32>::zeros((lc, lt, lh, lw));
    for ci in 0..c {
        for ti in 0..lt {
            for yi in 0..lh * s {
                for xi in 0..lw * s {
                    let mut acc = 0.0f64;
                    for dt in 0..bt {
                        for dy in 0..bh {
                            for dx in 0..bw {
                                acc += f64::from(video[[ci, ti * bt + dt, yi * bh + dy, xi * bw + dx]]);
                            }
                        }
                    }
                    let ch = ci * s * s + (yi % s) * s + xi % s;
                    out[[ch, ti, yi / s, xi / s]] = (acc / norm) as f32;
                }
            }
        }
    }
    Ok(LatentVideo { values: out, codec })
}

pub fn codec_decode(latent: &LatentVideo) -> Result<Array4<f32>> {
    let codec = latent.codec;
    let s = codec.fold;
    let (lc, lt, lh, lw) = latent.values.dim();
    if lc % (s * s) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{lc} latent channels not divisible by fold {s}x{s}"
        )));
    }
    let c = lc / (s * s);
    let (bt, bh, bw) = codec.block;
    let (t, h, w) = (lt * bt, lh * s * bh, lw * s * bw);
    Ok(Array4::from_shape_fn((c, t, h, w), |(ci, ti, y, x)| {
        let (yb, xb) = (y / bh, x / bw);
        let ch = ci * s * s + (yb % s) * s + xb % s;
        latent.values[[ch, ti / bt, yb / s, xb / s]]
    }))
}

/// Encodes a single `(C, H, W)` image by treating it as a clip of `block.0`
/// identical frames; returns the `(C', h, w)` latent image.
pub fn encode_image(image: &Array3<f32>, codec: CodecConfig) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    let frames = codec.block.0;
    let video = Array4::from_shape_fn((c, frames, h, w), |(ci, _, y, x)| image[[ci, y, x]]);
    let lat = codec_encode(&video, codec)?;
    Ok(lat.values.index_axis(ndarray::Axis(1), 0).to_owned())
}

/// Maps `[0, 1]` intensities to the roughly unit-scale range the backbone
/// sees, applied after encoding.
pub fn normalize_latent(values: &Array4<f32>) -> Array4<f32> {
    values.mapv(|v| (v - 0.5) * 2.0)
}

pub fn denormalize_latent(values: &Array4<f32>) -> Array4<f32> {
    values.mapv(|v| v * 0.5 + 0.5)
}
