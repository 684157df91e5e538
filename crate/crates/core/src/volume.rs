//! Raw volume files: row-major little-endian payloads with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.bottom() <= height && self.right() <= width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.bottom() && other.top < self.bottom() && self.left < other.right() && other.left < self.right()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }
}

/// Copies `rect` out of a `(C, H, W)` image.
pub fn crop(image: &ArrayView3<f32>, rect: Rect) -> ndarray::Array3<f32> {
    image
        .slice(ndarray::s![.., rect.top..rect.bottom(), rect.left..rect.right()])
        .to_owned()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoSidecar {
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaskSidecar {
    pub n_ids: usize,
    pub shape: [usize; 4],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn shape4<T>(a: &Array4<T>) -> [usize; 4] {
    let d = a.dim();
    [d.0, d.1, d.2, d.3]
}

/// Writes a `(C, T, H, W)` float volume as little-endian f32, W fastest.
pub fn write_video(path: &Path, video: &Array4<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(video.len() * 4);
    for v in video.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = serde_json::to_string(&VideoSidecar { shape: shape4(video) })?;
    let sp = sidecar_path(path);
    fs::write(&sp, side).map_err(|e| Error::io(sp, e))
}

pub fn read_video(path: &Path) -> Result<Array4<f32>> {
    let sp = sidecar_path(path);
    let side: VideoSidecar = serde_json::from_str(&fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            bytes.len(),
            side.shape
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [c, t, h, w] = side.shape;
    Array4::from_shape_vec((c, t, h, w), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Writes signed 8-bit labels, W fastest, then H, then T.
pub fn write_labels(path: &Path, labels: &Array4<i8>, n_ids: usize) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().map(|&v| v as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = serde_json::to_string(&MaskSidecar {
        n_ids,
        shape: shape4(labels),
    })?;
    let sp = sidecar_path(path);
    fs::write(&sp, side).map_err(|e| Error::io(sp, e))
}

pub fn read_labels(path: &Path) -> Result<(Array4<i8>, usize)> {
    let sp = sidecar_path(path);
    let side: MaskSidecar = serde_json::from_str(&fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            bytes.len(),
            side.shape
        )));
    }
    let [c, t, h, w] = side.shape;
    let data: Vec<i8> = bytes.into_iter().map(|b| b as i8).collect();
    let labels = Array4::from_shape_vec((c, t, h, w), data).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((labels, side.n_ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_intersection() {
        let a = Rect::new(0, 0, 4, 4);
        assert!(a.intersects(&Rect::new(3, 3, 2, 2)));
        assert!(!a.intersects(&Rect::new(4, 0, 2, 2)));
        assert!(!a.intersects(&Rect::new(0, 4, 2, 2)));
    }

    #[test]
    fn label_file_layout_is_w_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut labels = Array4::<i8>::from_elem((1, 2, 2, 3), -1);
        labels[[0, 1, 0, 2]] = 1;
        write_labels(&p, &labels, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // t=1, h=0, w=2 -> 1*6 + 0*3 + 2
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes.iter().filter(|&&b| b == 0xff).count(), 11);
        let (back, n) = read_labels(&p).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back, labels);
    }
}
