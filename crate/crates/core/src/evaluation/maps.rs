//! Routing maps as binary graymaps: identity `k` of `N` is drawn at gray
//! level `floor(255 k / (N - 1))`, so two identities show as black and white.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One layer's argmax routing map at one denoising step, indices in
/// `(t, h, w)` row-major order over the token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pub step: usize,
    pub layer: usize,
    pub grid: (usize, usize, usize),
    pub indices: Vec<usize>,
}

pub fn gray_level(k: usize, n_ids: usize) -> u8 {
    if n_ids < 2 {
        return 0;
    }
    ((255 * k) / (n_ids - 1)).min(255) as u8
}

/// Inverse of [`gray_level`] for `n_ids <= 256`.
pub fn identity_of_gray(v: u8, n_ids: usize) -> usize {
    if n_ids < 2 {
        return 0;
    }
    (usize::from(v) * (n_ids - 1)).div_ceil(255)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {width}x{height} graymap",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary graymap with maxval 255: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CorruptFile(format!("{}: {m}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 graymap"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(bad("raster size mismatch"));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Nearest-neighbour upsampling of one `h x w` frame by `(sy, sx)`.
pub fn upsample_frame(frame: &[usize], h: usize, w: usize, sy: usize, sx: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w * sy * sx);
    for y in 0..h * sy {
        for x in 0..w * sx {
            out.push(frame[(y / sy) * w + x / sx]);
        }
    }
    out
}

pub fn map_file_name(step: usize, layer: usize, frame: usize) -> String {
    format!("step{step}_layer{layer}_frame{frame}.pgm")
}

/// Writes every `layer_stride`-th layer and every `frame_stride`-th latent
/// frame of each map, upsampled by `upsample = (sy, sx)`. Returns the files
/// written.
pub fn emit_routing_maps(
    maps: &[LayerMap],
    n_ids: usize,
    out_dir: &Path,
    frame_stride: usize,
    layer_stride: usize,
    upsample: (usize, usize),
) -> Result<Vec<PathBuf>> {
    if frame_stride == 0 || layer_stride == 0 {
        return Err(Error::StrideInvalid(format!(
            "frame stride {frame_stride}, layer stride {layer_stride}"
        )));
    }
    if upsample.0 == 0 || upsample.1 == 0 {
        return Err(Error::StrideInvalid(format!("upsampling factor {upsample:?}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for m in maps.iter().filter(|m| m.layer % layer_stride == 0) {
        let (t, h, w) = m.grid;
        if m.indices.len() != t * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for grid {:?}",
                m.indices.len(),
                m.grid
            )));
        }
        if let Some(&k) = m.indices.iter().find(|&&k| k >= n_ids) {
            return Err(Error::IndexOutOfRange {
                index: k as i64,
                count: n_ids,
            });
        }
        for f in (0..t).step_by(frame_stride) {
            let frame = &m.indices[f * h * w..(f + 1) * h * w];
            let up = upsample_frame(frame, h, w, upsample.0, upsample.1);
            let pixels: Vec<u8> = up.iter().map(|&k| gray_level(k, n_ids)).collect();
            let path = out_dir.join(map_file_name(m.step, m.layer, f));
            write_pgm(&path, w * upsample.1, h * upsample.0, &pixels)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Recovers token-grid indices from an emitted frame.
pub fn decode_map_frame(pixels: &[u8], width: usize, n_ids: usize, upsample: (usize, usize)) -> Vec<usize> {
    let height = pixels.len() / width.max(1);
    let (h, w) = (height / upsample.0, width / upsample.1);
    (0..h * w)
        .map(|i| identity_of_gray(pixels[(i / w) * upsample.0 * width + (i % w) * upsample.1], n_ids))
        .collect()
}
