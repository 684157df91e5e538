//! Facial extractor: detection, the white-padded global composite, and the
//! per-identity local feature stacks.
//!
//! Real face models are replaced by exact oracles. A synthetic face is an
//! axis-aligned ellipse inscribed in its box whose four quadrants carry flat
//! colors; [`quadrant_colors`] recovers those colors from any crop, which makes
//! the oracle encoders position invariant and usable on generated frames.
//! External detectors and encoders plug in through [`FaceDetector`],
//! [`RecognitionEncoder`] and [`SemanticEncoder`].

use ndarray::{concatenate, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::volume::{crop, Rect};

/// Composite padding ("white").
pub const PAD_VALUE: f32 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    /// `(3, box.height, box.width)` intensities in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub rect: Rect,
    pub identity_index: usize,
}

impl FaceCrop {
    pub fn new(pixels: Array3<f32>, rect: Rect, identity_index: usize) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != rect.height || w != rect.width {
            return Err(Error::ShapeMismatch(format!(
                "crop pixels {:?} do not match box {}x{}",
                pixels.dim(),
                rect.height,
                rect.width
            )));
        }
        Ok(Self {
            pixels,
            rect,
            identity_index,
        })
    }
}

/// Reference images in canonical identity order.
#[derive(Debug, Clone)]
pub struct IdentitySet {
    pub references: Vec<Array3<f32>>,
}

impl IdentitySet {
    pub fn new(references: Vec<Array3<f32>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::EmptyInput("identity set"));
        }
        Ok(Self { references })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalComposite {
    pub image: Array3<f32>,
    /// Placed rectangle per identity, in identity order.
    pub layout: Vec<Rect>,
    pub pad_value: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureStack {
    /// Coarse to fine, each `(tokens, channels)`.
    pub recognition_scales: Vec<Array2<f32>>,
    pub semantic_features: Array2<f32>,
    pub identity_index: usize,
}

/// Whether pixel `(y, x)` of an `h x w` box lies inside the inscribed ellipse.
pub fn ellipse_contains(h: usize, w: usize, y: usize, x: usize) -> bool {
    let ry = h as f64 / 2.0;
    let rx = w as f64 / 2.0;
    let dy = (y as f64 + 0.5 - ry) / ry;
    let dx = (x as f64 + 0.5 - rx) / rx;
    dy * dy + dx * dx <= 1.0
}

/// Quadrant index (top-left, top-right, bottom-left, bottom-right).
pub fn quadrant_of(h: usize, w: usize, y: usize, x: usize) -> usize {
    let bottom = usize::from(y >= h / 2);
    let right = usize::from(x >= w / 2);
    bottom * 2 + right
}

/// Mean color of each quadrant over the pixels inside the inscribed ellipse.
/// Empty quadrants read as mid-gray.
pub fn quadrant_colors(pixels: &ArrayView3<f32>) -> [[f64; 3]; 4] {
    let (_, h, w) = pixels.dim();
    let mut sum = [[0.0f64; 3]; 4];
    let mut count = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            if !ellipse_contains(h, w, y, x) {
                continue;
            }
            let q = quadrant_of(h, w, y, x);
            for c in 0..3 {
                sum[q][c] += f64::from(pixels[[c, y, x]]);
            }
            count[q] += 1;
        }
    }
    let mut out = [[0.5f64; 3]; 4];
    for q in 0..4 {
        if count[q] > 0 {
            for c in 0..3 {
                out[q][c] = sum[q][c] / count[q] as f64;
            }
        }
    }
    out
}

/// Unit vector of centered quadrant colors.
pub fn embedding_from_colors(colors: &[[f64; 3]; 4]) -> Vec<f64> {
    let v: Vec<f64> = colors.iter().flatten().map(|c| c - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// The oracle recognition embedding of a crop (12-d, unit norm).
pub fn appearance_embedding(pixels: &ArrayView3<f32>) -> Vec<f64> {
    embedding_from_colors(&quadrant_colors(pixels))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

pub trait FaceDetector {
    /// Crops in identity-index order.
    fn detect(&self, frame: &ArrayView3<f32>) -> Result<Vec<FaceCrop>>;
}

/// What an oracle detector expects to find: the box a scene script placed an
/// identity at, and the identity's quadrant colors.
#[derive(Debug, Clone)]
pub struct ExpectedFace {
    pub identity_index: usize,
    pub rect: Rect,
    pub colors: [[f32; 3]; 4],
}

/// Detector that replays the scene script which rendered the frame. It only
/// reports a face when the frame actually shows the expected pattern.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub expected: Vec<ExpectedFace>,
}

impl FaceDetector for OracleDetector {
    fn detect(&self, frame: &ArrayView3<f32>) -> Result<Vec<FaceCrop>> {
        let (_, fh, fw) = frame.dim();
        let mut expected = self.expected.clone();
        expected.sort_by_key(|e| e.identity_index);
        let mut out = Vec::with_capacity(expected.len());
        for e in expected {
            let r = e.rect;
            if !r.fits_in(fh, fw) {
                return Err(Error::NoFaceFound {
                    identity: e.identity_index,
                });
            }
            let mut present = true;
            'scan: for y in 0..r.height {
                for x in 0..r.width {
                    if !ellipse_contains(r.height, r.width, y, x) {
                        continue;
                    }
                    let q = quadrant_of(r.height, r.width, y, x);
                    for c in 0..3 {
                        if frame[[c, r.top + y, r.left + x]] != e.colors[q][c] {
                            present = false;
                            break 'scan;
                        }
                    }
                }
            }
            if !present {
                return Err(Error::NoFaceFound {
                    identity: e.identity_index,
                });
            }
            out.push(FaceCrop::new(crop(frame, r), r, e.identity_index)?);
        }
        Ok(out)
    }
}

pub fn detect_faces(frame: &ArrayView3<f32>, detector: &dyn FaceDetector) -> Result<Vec<FaceCrop>> {
    detector.detect(frame)
}

/// Nearest-neighbor resize of a `(C, H, W)` image; output pixel centers map
/// back onto source pixel centers.
pub fn resize_nearest(src: &ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize).min(w - 1);
        src[[ch, sy, sx]]
    })
}

/// Places crops left to right in identity order, one equal-width cell each.
/// Crops larger than their cell are shrunk isotropically (never enlarged) and
/// centered; everything else is `PAD_VALUE`.
pub fn build_global_composite(crops: &[FaceCrop], target: (usize, usize)) -> Result<GlobalComposite> {
    let mut ordered: Vec<&FaceCrop> = crops.iter().collect();
    ordered.sort_by_key(|c| c.identity_index);
    let images: Vec<&Array3<f32>> = ordered.iter().map(|c| &c.pixels).collect();
    let (image, layout) = place_in_cells(&images, target, PAD_VALUE)?;
    Ok(GlobalComposite {
        image,
        layout,
        pad_value: PAD_VALUE,
    })
}

/// The composite layout rule for images with any channel count: image `i`
/// goes in cell `i`, shrunk if needed and centered, on a `pad` canvas.
pub fn place_in_cells(images: &[&Array3<f32>], target: (usize, usize), pad: f32) -> Result<(Array3<f32>, Vec<Rect>)> {
    let (th, tw) = target;
    let Some(first) = images.first() else {
        return Err(Error::EmptyInput("composite crops"));
    };
    let n = images.len();
    let cell_w = tw / n;
    if th == 0 || cell_w == 0 {
        return Err(Error::TargetTooSmall {
            height: th,
            width: tw,
            cells: n,
        });
    }
    let channels = first.dim().0;
    let mut image = Array3::from_elem((channels, th, tw), pad);
    let mut layout = Vec::with_capacity(n);
    for (cell, src) in images.iter().enumerate() {
        let (c, h, w) = src.dim();
        if c != channels || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "composite part {cell} is {:?}, expected {channels} channels",
                src.dim()
            )));
        }
        let scale = (th as f64 / h as f64).min(cell_w as f64 / w as f64).min(1.0);
        let nh = ((h as f64 * scale).round() as usize).clamp(1, th);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, cell_w);
        let resized = if (nh, nw) == (h, w) {
            (*src).clone()
        } else {
            resize_nearest(&src.view(), nh, nw)
        };
        let top = (th - nh) / 2;
        let left = cell * cell_w + (cell_w - nw) / 2;
        image
            .slice_mut(ndarray::s![.., top..top + nh, left..left + nw])
            .assign(&resized);
        layout.push(Rect::new(top, left, nh, nw));
    }
    Ok((image, layout))
}

pub trait RecognitionEncoder: Send + Sync {
    /// Token count of each scale, coarse to fine.
    fn scale_tokens(&self) -> &[usize];
    fn width(&self) -> usize;
    fn encode(&self, pixels: &ArrayView3<f32>) -> Result<Vec<Array2<f32>>>;
}

pub trait SemanticEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, pixels: &ArrayView3<f32>) -> Result<Array2<f32>>;
}

fn tile(v: &[f64], width: usize) -> Vec<f32> {
    (0..width).map(|j| v[j % v.len()] as f32).collect()
}

/// Every token of every scale is the appearance embedding tiled to `width`.
#[derive(Debug, Clone)]
pub struct OracleRecognitionEncoder {
    pub scale_tokens: Vec<usize>,
    pub width: usize,
}

impl Default for OracleRecognitionEncoder {
    fn default() -> Self {
        Self {
            scale_tokens: vec![1, 4],
            width: 16,
        }
    }
}

impl RecognitionEncoder for OracleRecognitionEncoder {
    fn scale_tokens(&self) -> &[usize] {
        &self.scale_tokens
    }

    fn width(&self) -> usize {
        self.width
    }

    fn encode(&self, pixels: &ArrayView3<f32>) -> Result<Vec<Array2<f32>>> {
        let row = tile(&appearance_embedding(pixels), self.width);
        Ok(self
            .scale_tokens
            .iter()
            .map(|&n| Array2::from_shape_fn((n, self.width), |(_, j)| row[j]))
            .collect())
    }
}

/// One token per quadrant: the centered quadrant color tiled to `width`.
#[derive(Debug, Clone)]
pub struct OracleSemanticEncoder {
    pub width: usize,
}

impl Default for OracleSemanticEncoder {
    fn default() -> Self {
        Self { width: 16 }
    }
}

impl SemanticEncoder for OracleSemanticEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode(&self, pixels: &ArrayView3<f32>) -> Result<Array2<f32>> {
        let colors = quadrant_colors(pixels);
        let mut out = Array2::zeros((4, self.width));
        for (q, color) in colors.iter().enumerate() {
            let centered: Vec<f64> = color.iter().map(|c| c - 0.5).collect();
            for (j, v) in tile(&centered, self.width).into_iter().enumerate() {
                out[[q, j]] = v;
            }
        }
        Ok(out)
    }
}

pub fn encode_local(
    crop: &FaceCrop,
    recognition: &dyn RecognitionEncoder,
    semantic: &dyn SemanticEncoder,
) -> Result<LocalFeatureStack> {
    let scales = recognition.encode(&crop.pixels.view())?;
    let sem = semantic.encode(&crop.pixels.view())?;
    let width = recognition.width();
    if semantic.width() != width {
        return Err(Error::ShapeMismatch(format!(
            "recognition width {width} != semantic width {}",
            semantic.width()
        )));
    }
    if scales.len() != recognition.scale_tokens().len() {
        return Err(Error::ShapeMismatch(format!(
            "encoder returned {} scales, configured for {}",
            scales.len(),
            recognition.scale_tokens().len()
        )));
    }
    for (s, (m, &n)) in scales.iter().zip(recognition.scale_tokens()).enumerate() {
        if m.dim() != (n, width) {
            return Err(Error::ShapeMismatch(format!(
                "scale {s} is {:?}, expected ({n}, {width})",
                m.dim()
            )));
        }
    }
    if sem.ncols() != width {
        return Err(Error::ShapeMismatch(format!(
            "semantic features have width {}, expected {width}",
            sem.ncols()
        )));
    }
    Ok(LocalFeatureStack {
        recognition_scales: scales,
        semantic_features: sem,
        identity_index: crop.identity_index,
    })
}

fn concat_tokens(parts: &[&Array2<f32>]) -> Result<Array2<f32>> {
    let width = parts[0].ncols();
    if let Some(bad) = parts.iter().find(|p| p.ncols() != width) {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate width {} with width {width}",
            bad.ncols()
        )));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// All recognition scales coarse to fine, then the semantic tokens.
pub fn concat_multiscale(stack: &LocalFeatureStack) -> Result<Array2<f32>> {
    let mut parts: Vec<&Array2<f32>> = stack.recognition_scales.iter().collect();
    parts.push(&stack.semantic_features);
    concat_tokens(&parts)
}

/// Recognition scale `scale` followed by the semantic tokens: the key/value
/// sequence for the injection layers fed by that scale.
pub fn concat_scale(stack: &LocalFeatureStack, scale: usize) -> Result<Array2<f32>> {
    let rec = stack
        .recognition_scales
        .get(scale)
        .ok_or_else(|| Error::ShapeMismatch(format!("no recognition scale {scale}")))?;
    concat_tokens(&[rec, &stack.semantic_features])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn face(h: usize, w: usize, colors: [[f32; 3]; 4], bg: f32) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            if ellipse_contains(h, w, y, x) {
                colors[quadrant_of(h, w, y, x)][c]
            } else {
                bg
            }
        })
    }

    const COLORS: [[f32; 3]; 4] = [[0.9, 0.1, 0.2], [0.2, 0.8, 0.3], [0.1, 0.2, 0.7], [0.6, 0.6, 0.1]];

    #[test]
    fn quadrant_colors_ignore_background() {
        for bg in [0.0, 0.37, 1.0] {
            let q = quadrant_colors(&face(12, 14, COLORS, bg).view());
            for i in 0..4 {
                for c in 0..3 {
                    assert!((q[i][c] - f64::from(COLORS[i][c])).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn smallest_even_face_fills_every_quadrant() {
        for y in 0..2 {
            for x in 0..2 {
                assert!(ellipse_contains(2, 2, y, x));
            }
        }
    }

    #[test]
    fn oracle_detector_finds_and_misses() {
        let mut frame = Array3::from_elem((3, 24, 24), 0.5f32);
        let rect = Rect::new(8, 8, 16, 16);
        frame
            .slice_mut(ndarray::s![.., 8..24, 8..24])
            .assign(&face(16, 16, COLORS, 0.5));
        let det = OracleDetector {
            expected: vec![ExpectedFace {
                identity_index: 0,
                rect,
                colors: COLORS,
            }],
        };
        let crops = detect_faces(&frame.view(), &det).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].rect, rect);

        let empty = Array3::from_elem((3, 24, 24), 0.5f32);
        assert!(matches!(
            detect_faces(&empty.view(), &det),
            Err(Error::NoFaceFound { identity: 0 })
        ));
    }

    #[test]
    fn composite_single_exact_crop_is_identity() {
        let px = face(8, 8, COLORS, 0.2);
        let c = FaceCrop::new(px.clone(), Rect::new(0, 0, 8, 8), 0).unwrap();
        let g = build_global_composite(&[c], (8, 8)).unwrap();
        assert_eq!(g.image, px);
        assert_eq!(g.layout, vec![Rect::new(0, 0, 8, 8)]);
        assert_eq!(g.pad_value, 1.0);
    }

    #[test]
    fn composite_two_crops_tile_exactly() {
        let a = FaceCrop::new(Array3::from_elem((3, 8, 8), 0.25), Rect::new(0, 0, 8, 8), 0).unwrap();
        let b = FaceCrop::new(Array3::from_elem((3, 8, 8), 0.75), Rect::new(0, 0, 8, 8), 1).unwrap();
        // Input order does not matter; identity order does.
        let g = build_global_composite(&[b, a], (8, 16)).unwrap();
        assert_eq!(g.layout, vec![Rect::new(0, 0, 8, 8), Rect::new(0, 8, 8, 8)]);
        assert!(g.image.slice(ndarray::s![.., .., 0..8]).iter().all(|&v| v == 0.25));
        assert!(g.image.slice(ndarray::s![.., .., 8..16]).iter().all(|&v| v == 0.75));
    }

    #[test]
    fn composite_too_small() {
        let a = FaceCrop::new(Array3::zeros((3, 2, 2)), Rect::new(0, 0, 2, 2), 0).unwrap();
        let b = FaceCrop::new(Array3::zeros((3, 2, 2)), Rect::new(0, 0, 2, 2), 1).unwrap();
        assert!(matches!(
            build_global_composite(&[a, b], (4, 1)),
            Err(Error::TargetTooSmall { .. })
        ));
    }

    #[test]
    fn concat_counts_and_width_check() {
        let stack = LocalFeatureStack {
            recognition_scales: vec![Array2::zeros((4, 8)), Array2::ones((4, 8))],
            semantic_features: Array2::from_elem((8, 8), 2.0),
            identity_index: 0,
        };
        assert_eq!(concat_multiscale(&stack).unwrap().nrows(), 16);
        assert_eq!(concat_scale(&stack, 1).unwrap().nrows(), 12);

        let single = LocalFeatureStack {
            recognition_scales: vec![Array2::from_elem((3, 5), 7.0)],
            semantic_features: Array2::zeros((0, 5)),
            identity_index: 0,
        };
        assert_eq!(concat_multiscale(&single).unwrap(), single.recognition_scales[0]);

        let bad = LocalFeatureStack {
            recognition_scales: vec![Array2::zeros((4, 8))],
            semantic_features: Array2::zeros((4, 6)),
            identity_index: 0,
        };
        assert!(matches!(concat_multiscale(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn concat_follows_scale_order() {
        // Each token carries (scale id, token id); permuting the scales list
        // must permute the output blocks the same way.
        let mk = |s: usize, n: usize| Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { s as f32 } else { i as f32 });
        let scales = [mk(0, 1), mk(1, 4), mk(2, 2)];
        let sem = mk(9, 3);
        let expected = |order: &[usize]| {
            let mut rows = Vec::new();
            for &s in order {
                for i in 0..scales[s].nrows() {
                    rows.push((s as f32, i as f32));
                }
            }
            for i in 0..3 {
                rows.push((9.0, i as f32));
            }
            rows
        };
        for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let stack = LocalFeatureStack {
                recognition_scales: order.iter().map(|&s| scales[s].clone()).collect(),
                semantic_features: sem.clone(),
                identity_index: 0,
            };
            let out = concat_multiscale(&stack).unwrap();
            let got: Vec<(f32, f32)> = out.rows().into_iter().map(|r| (r[0], r[1])).collect();
            assert_eq!(got, expected(&order));
        }
    }

    #[test]
    fn encode_local_rejects_width_mismatch() {
        let c = FaceCrop::new(face(8, 8, COLORS, 0.0), Rect::new(0, 0, 8, 8), 1).unwrap();
        let rec = OracleRecognitionEncoder::default();
        let ok = encode_local(&c, &rec, &OracleSemanticEncoder::default()).unwrap();
        assert_eq!(ok.identity_index, 1);
        assert_eq!(ok.recognition_scales.len(), 2);
        let bad = encode_local(&c, &rec, &OracleSemanticEncoder { width: 8 });
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
    }
}
