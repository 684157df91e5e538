//! Routing supervision: pixel label masks, their trilinear reduction to the
//! token grid, and the cross-entropy routing objective with background
//! positions excluded.

use candle_core::{Device, Tensor, D};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, softmax_last};
use crate::volume::Rect;

pub const BACKGROUND: i8 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Pixel,
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    /// `(1, T, H, W)`; `-1` is background, `n` is identity `n`.
    pub labels: Array4<i8>,
    pub n_ids: usize,
    pub resolution: Resolution,
}

impl MaskVolume {
    pub fn frames(&self) -> usize {
        self.labels.dim().1
    }

    pub fn max_label(&self) -> i8 {
        self.labels.iter().copied().max().unwrap_or(BACKGROUND)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    Box,
    Seg,
}

impl std::str::FromStr for SupervisionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Self::Box),
            "seg" => Ok(Self::Seg),
            other => Err(Error::ModeInvalid(other.to_string())),
        }
    }
}

/// One identity's region in one frame: its box, plus the exact occupied
/// pixels inside the box when a segmentation is available.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRegion {
    pub rect: Rect,
    pub pixels: Option<Array2<bool>>,
}

/// Per-frame regions of one identity (`None` where it is not visible).
pub type IdentityTrack = Vec<Option<FrameRegion>>;

/// Rasterizes identity regions into a pixel-resolution label volume.
/// Overlaps go to the lowest identity index.
pub fn build_masks(
    num_frames: usize,
    height: usize,
    width: usize,
    tracks: &[IdentityTrack],
    mode: SupervisionMode,
) -> Result<MaskVolume> {
    let mut labels = Array4::from_elem((1, num_frames, height, width), BACKGROUND);
    for (id, track) in tracks.iter().enumerate() {
        for (t, region) in track.iter().enumerate().take(num_frames) {
            let Some(region) = region else { continue };
            let r = region.rect;
            if !r.fits_in(height, width) {
                return Err(Error::RegionOutOfBounds { identity: id });
            }
            if let Some(px) = &region.pixels {
                if px.dim() != (r.height, r.width) {
                    return Err(Error::ShapeMismatch(format!(
                        "segment {:?} does not match box {}x{}",
                        px.dim(),
                        r.height,
                        r.width
                    )));
                }
            }
            for y in 0..r.height {
                for x in 0..r.width {
                    let inside = match (mode, &region.pixels) {
                        (SupervisionMode::Seg, Some(px)) => px[[y, x]],
                        _ => true,
                    };
                    let cell = &mut labels[[0, t, r.top + y, r.left + x]];
                    if inside && *cell == BACKGROUND {
                        *cell = id as i8;
                    }
                }
            }
        }
    }
    Ok(MaskVolume {
        labels,
        n_ids: tracks.len(),
        resolution: Resolution::Pixel,
    })
}

/// Recovers per-identity tracks (tight box + exact pixels) from a label volume.
pub fn tracks_from_mask(mask: &MaskVolume) -> Vec<IdentityTrack> {
    let (_, t, h, w) = mask.labels.dim();
    (0..mask.n_ids)
        .map(|id| {
            (0..t)
                .map(|f| {
                    let mut y0 = usize::MAX;
                    let mut x0 = usize::MAX;
                    let mut y1 = 0;
                    let mut x1 = 0;
                    for y in 0..h {
                        for x in 0..w {
                            if mask.labels[[0, f, y, x]] == id as i8 {
                                y0 = y0.min(y);
                                x0 = x0.min(x);
                                y1 = y1.max(y + 1);
                                x1 = x1.max(x + 1);
                            }
                        }
                    }
                    if y0 == usize::MAX {
                        return None;
                    }
                    let rect = Rect::new(y0, x0, y1 - y0, x1 - x0);
                    let pixels = Array2::from_shape_fn((rect.height, rect.width), |(y, x)| {
                        mask.labels[[0, f, y0 + y, x0 + x]] == id as i8
                    });
                    Some(FrameRegion {
                        rect,
                        pixels: Some(pixels),
                    })
                })
                .collect()
        })
        .collect()
}

/// Re-rasterizes a segmentation label volume under the given supervision mode.
pub fn remask(mask: &MaskVolume, mode: SupervisionMode) -> Result<MaskVolume> {
    let (_, t, h, w) = mask.labels.dim();
    build_masks(t, h, w, &tracks_from_mask(mask), mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingLabels {
    /// `(N, t, h, w)`, one-hot at valid positions, zero elsewhere.
    pub one_hot: Array4<f32>,
    /// `(t, h, w)`, 1 where some identity is the label.
    pub valid: Array3<f32>,
    /// `(t, h, w)`, label per position with background `-1`.
    pub labels: Array3<i8>,
}

impl RoutingLabels {
    pub fn n_ids(&self) -> usize {
        self.one_hot.dim().0
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.valid.dim()
    }

    pub fn as_mask(&self) -> MaskVolume {
        let (t, h, w) = self.labels.dim();
        MaskVolume {
            labels: self.labels.clone().into_shape_with_order((1, t, h, w)).unwrap(),
            n_ids: self.n_ids(),
            resolution: Resolution::Latent,
        }
    }

    /// Labels flattened to positions in `(t, h, w)` row-major order:
    /// `(P, N)` one-hot and `(P,)` validity.
    pub fn to_tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        let (n, t, h, w) = self.one_hot.dim();
        let p = t * h * w;
        let mut oh = Vec::with_capacity(p * n);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..n {
                        oh.push(self.one_hot[[k, ti, y, x]]);
                    }
                }
            }
        }
        let valid: Vec<f32> = self.valid.iter().copied().collect();
        Ok((
            Tensor::from_vec(oh, (p, n), device)?,
            Tensor::from_vec(valid, p, device)?,
        ))
    }
}

/// Source sample position and blend weight along one axis, matching linear
/// interpolation with half-pixel centers (no corner alignment).
fn axis_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Reduces a pixel label volume to a `(h, w, t)` grid: each identity channel
/// and a background channel are one-hot encoded and trilinearly interpolated,
/// then the largest channel wins (identities before background on ties).
pub fn downsample_masks(mask: &MaskVolume, grid: (usize, usize, usize)) -> Result<RoutingLabels> {
    let (gh, gw, gt) = grid;
    let (_, t, h, w) = mask.labels.dim();
    if gh == 0 || gw == 0 || gt == 0 || gh > h || gw > w || gt > t {
        return Err(Error::GridInvalid(format!(
            "grid {gh}x{gw}x{gt} for a {h}x{w}x{t} mask"
        )));
    }
    let n = mask.n_ids;
    if let Some(&bad) = mask.labels.iter().find(|&&v| v < BACKGROUND || v as i64 >= n as i64) {
        return Err(Error::IndexOutOfRange {
            index: i64::from(bad),
            count: n,
        });
    }
    let tt = axis_taps(gt, t);
    let ty = axis_taps(gh, h);
    let tx = axis_taps(gw, w);
    let channel = |v: i8| if v == BACKGROUND { n } else { v as usize };

    let mut one_hot = Array4::zeros((n, gt, gh, gw));
    let mut valid = Array3::zeros((gt, gh, gw));
    let mut labels = Array3::from_elem((gt, gh, gw), BACKGROUND);
    let mut acc = vec![0.0f64; n + 1];
    for (oi, &(t0, t1, lt)) in tt.iter().enumerate() {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (ts, wt) in [(t0, 1.0 - lt), (t1, lt)] {
                    for (ys, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                        for (xs, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                            acc[channel(mask.labels[[0, ts, ys, xs]])] += wt * wy * wx;
                        }
                    }
                }
                let mut best = 0;
                for k in 1..=n {
                    if acc[k] > acc[best] {
                        best = k;
                    }
                }
                if best < n {
                    one_hot[[best, oi, oy, ox]] = 1.0;
                    valid[[oi, oy, ox]] = 1.0;
                    labels[[oi, oy, ox]] = best as i8;
                }
            }
        }
    }
    Ok(RoutingLabels { one_hot, valid, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Diffusion loss only.
    None,
    /// Squared error between routing probabilities and one-hot labels.
    Mse,
    /// Cross-entropy routing loss.
    Route,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mse" => Ok(Self::Mse),
            "route" => Ok(Self::Route),
            other => Err(Error::ModeInvalid(other.to_string())),
        }
    }
}

fn check_label_shapes(logits: &Tensor, one_hot: &Tensor, valid: &Tensor) -> Result<()> {
    let ld = logits.dims();
    if ld != one_hot.dims() || ld[..ld.len() - 1] != *valid.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?}, labels {:?}, valid {:?}",
            ld,
            one_hot.dims(),
            valid.dims()
        )));
    }
    Ok(())
}

fn valid_mean(per_position: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let count = valid.sum_all()?;
    let denom = count.maximum(&count.ones_like()?)?;
    Ok((per_position * valid)?.sum_all()?.div(&denom)?)
}

/// Cross-entropy routing term: mean over valid positions of
/// `-(1/N) sum_n y_n log softmax(logits)_n`. Logits are `(..., P, N)`,
/// one-hot labels the same, validity `(..., P)`.
pub fn routing_term(logits: &Tensor, one_hot: &Tensor, valid: &Tensor) -> Result<Tensor> {
    check_label_shapes(logits, one_hot, valid)?;
    let n = *logits.dims().last().unwrap() as f64;
    let ce = (one_hot * log_softmax_last(logits)?)?
        .sum(D::Minus1)?
        .affine(-1.0 / n, 0.0)?;
    valid_mean(&ce, valid)
}

/// Mean over valid positions of the per-identity squared error between
/// routing probabilities and one-hot labels.
pub fn routing_mse_term(logits: &Tensor, one_hot: &Tensor, valid: &Tensor) -> Result<Tensor> {
    check_label_shapes(logits, one_hot, valid)?;
    let se = (softmax_last(logits)? - one_hot)?.sqr()?.mean(D::Minus1)?;
    valid_mean(&se, valid)
}

/// Routing objective for a loss variant, or `None` when it has no routing term.
pub fn routing_objective(
    variant: LossVariant,
    logits: &Tensor,
    one_hot: &Tensor,
    valid: &Tensor,
) -> Result<Option<Tensor>> {
    match variant {
        LossVariant::None => Ok(None),
        LossVariant::Mse => routing_mse_term(logits, one_hot, valid).map(Some),
        LossVariant::Route => routing_term(logits, one_hot, valid).map(Some),
    }
}

#[derive(Debug, Clone)]
pub struct RouteLoss {
    pub total: Tensor,
    pub term: Tensor,
}

/// `L_route = L_diff + lambda * routing_term`.
pub fn routing_loss(
    logits: &Tensor,
    one_hot: &Tensor,
    valid: &Tensor,
    l_diff: &Tensor,
    lambda: f64,
) -> Result<RouteLoss> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::LambdaNegative(lambda));
    }
    let term = routing_term(logits, one_hot, valid)?;
    let total = (l_diff + term.affine(lambda, 0.0)?)?;
    Ok(RouteLoss { total, term })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;
    use candle_core::DType;

    #[test]
    fn empty_regions_are_background() {
        let m = build_masks(2, 4, 4, &[], SupervisionMode::Box).unwrap();
        assert!(m.labels.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn full_frame_region() {
        let track = vec![Some(FrameRegion {
            rect: Rect::new(0, 0, 4, 5),
            pixels: None,
        })];
        let m = build_masks(1, 4, 5, &[track], SupervisionMode::Seg).unwrap();
        assert!(m.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn out_of_bounds_region() {
        let track = vec![Some(FrameRegion {
            rect: Rect::new(2, 2, 4, 4),
            pixels: None,
        })];
        assert!(matches!(
            build_masks(1, 4, 4, &[track], SupervisionMode::Box),
            Err(Error::RegionOutOfBounds { identity: 0 })
        ));
    }

    #[test]
    fn overlap_goes_to_lowest_identity() {
        let r = |top, left| {
            vec![Some(FrameRegion {
                rect: Rect::new(top, left, 3, 3),
                pixels: None,
            })]
        };
        let m = build_masks(1, 5, 5, &[r(0, 0), r(2, 2)], SupervisionMode::Box).unwrap();
        assert_eq!(m.labels[[0, 0, 2, 2]], 0);
        assert_eq!(m.labels[[0, 0, 4, 4]], 1);
    }

    #[test]
    fn seg_uses_pixels_box_fills_rect() {
        let px = Array2::from_shape_fn((2, 2), |(y, x)| y == x);
        let track = vec![Some(FrameRegion {
            rect: Rect::new(0, 0, 2, 2),
            pixels: Some(px),
        })];
        let seg = build_masks(1, 2, 2, std::slice::from_ref(&track), SupervisionMode::Seg).unwrap();
        let bx = build_masks(1, 2, 2, &[track], SupervisionMode::Box).unwrap();
        assert_eq!(seg.labels.iter().filter(|&&v| v == 0).count(), 2);
        assert_eq!(bx.labels.iter().filter(|&&v| v == 0).count(), 4);
        assert_eq!(remask(&seg, SupervisionMode::Box).unwrap(), bx);
    }

    #[test]
    fn uniform_and_background_downsampling() {
        let m = MaskVolume {
            labels: Array4::zeros((1, 4, 4, 4)),
            n_ids: 1,
            resolution: Resolution::Pixel,
        };
        let l = downsample_masks(&m, (2, 2, 2)).unwrap();
        assert!(l.labels.iter().all(|&v| v == 0));
        assert!(l.valid.iter().all(|&v| v == 1.0));

        let bg = MaskVolume {
            labels: Array4::from_elem((1, 4, 4, 4), BACKGROUND),
            n_ids: 2,
            resolution: Resolution::Pixel,
        };
        let l = downsample_masks(&bg, (2, 2, 2)).unwrap();
        assert!(l.valid.iter().all(|&v| v == 0.0));
        assert!(l.one_hot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_larger_than_mask_rejected() {
        let m = MaskVolume {
            labels: Array4::zeros((1, 2, 2, 2)),
            n_ids: 1,
            resolution: Resolution::Pixel,
        };
        assert!(matches!(downsample_masks(&m, (4, 2, 2)), Err(Error::GridInvalid(_))));
    }

    #[test]
    fn lambda_zero_and_background_only() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[3.0f64, -1.0], [0.2, 0.1]], &dev).unwrap();
        let oh = Tensor::new(&[[0.0f64, 1.0], [1.0, 0.0]], &dev).unwrap();
        let valid = Tensor::new(&[1.0f64, 1.0], &dev).unwrap();
        let l_diff = Tensor::new(0.4321f64, &dev).unwrap();
        let r = routing_loss(&logits, &oh, &valid, &l_diff, 0.0).unwrap();
        assert_eq!(scalar_f64(&r.total).unwrap(), 0.4321);

        let none = Tensor::zeros(2, DType::F64, &dev).unwrap();
        let r = routing_loss(&logits, &oh.zeros_like().unwrap(), &none, &l_diff, 5.0).unwrap();
        assert_eq!(scalar_f64(&r.total).unwrap(), 0.4321);

        assert!(matches!(
            routing_loss(&logits, &oh, &valid, &l_diff, -1.0),
            Err(Error::LambdaNegative(_))
        ));
    }

    #[test]
    fn single_position_log_softmax_values() {
        let dev = Device::Cpu;
        let oh = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let valid = Tensor::new(&[1.0f64], &dev).unwrap();
        let good = Tensor::new(&[[10.0f64, -10.0]], &dev).unwrap();
        let term = scalar_f64(&routing_term(&good, &oh, &valid).unwrap()).unwrap();
        assert!(term < 1e-4);
        let bad = Tensor::new(&[[-10.0f64, 10.0]], &dev).unwrap();
        let term = scalar_f64(&routing_term(&bad, &oh, &valid).unwrap()).unwrap();
        // -log softmax_0 = 20 + log(1 + e^-20); halved by 1/N.
        let expected = (20.0 + (-20.0f64).exp().ln_1p()) / 2.0;
        assert!((term - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_variant_parsing() {
        assert_eq!("mse".parse::<LossVariant>().unwrap(), LossVariant::Mse);
        assert!("ce".parse::<LossVariant>().is_err());
        assert_eq!("seg".parse::<SupervisionMode>().unwrap(), SupervisionMode::Seg);
    }
}
