//! Turns loaded clips into the tensors a training or evaluation step needs.

use candle_core::{DType, Device, Tensor};
use ndarray::Array4;

use crate::backbone::{codec, global_latent, CodecConfig, GlobalConcatMode, TextConditionStub};
use crate::error::{Error, Result};
use crate::identity_embedding::{
    appearance_embedding, detect_faces, encode_local, FaceCrop, OracleRecognitionEncoder, OracleSemanticEncoder,
    RecognitionEncoder, SemanticEncoder,
};
use crate::model::{IdentityFeatures, ModelConfig};
use crate::supervision::{downsample_masks, remask, MaskVolume, RoutingLabels, SupervisionMode};
use crate::synthdata::LoadedClip;
use crate::volume::Rect;

/// Encoders used to build local identity features.
pub struct Encoders {
    pub recognition: Box<dyn RecognitionEncoder>,
    pub semantic: Box<dyn SemanticEncoder>,
}

impl Default for Encoders {
    fn default() -> Self {
        Self {
            recognition: Box::new(OracleRecognitionEncoder::default()),
            semantic: Box::new(OracleSemanticEncoder::default()),
        }
    }
}

/// One clip, ready for the model. Tensors carry no batch axis.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip_id: String,
    pub n_ids: usize,
    /// `(C, T, H, W)` normalized latent.
    pub x0: Tensor,
    /// `(C, T, H, W)` normalized global-composite latent.
    pub global: Tensor,
    /// Per recognition scale `(N, tokens, F)`.
    pub scales: Vec<Tensor>,
    /// `(N, tokens, F)`.
    pub semantic: Tensor,
    /// `(text_width,)`.
    pub text: Tensor,
    /// `(P, N)` one-hot and `(P,)` validity at the token grid.
    pub one_hot: Tensor,
    pub valid: Tensor,
    pub labels: RoutingLabels,
    /// Reference crops (frame 0) and their canonical embeddings.
    pub references: Vec<FaceCrop>,
    pub reference_embeddings: Vec<Vec<f64>>,
    /// Scripted face box per identity per frame.
    pub boxes: Vec<Vec<Rect>>,
    pub prompt: String,
}

/// Settings that decide how a clip is turned into tensors.
#[derive(Debug, Clone, Copy)]
pub struct PrepareOptions {
    pub supervision: SupervisionMode,
    pub concat: GlobalConcatMode,
}

/// Token-grid routing labels for a pixel mask under a supervision mode.
pub fn token_labels(mask: &MaskVolume, cfg: &ModelConfig, mode: SupervisionMode) -> Result<RoutingLabels> {
    let masked = remask(mask, mode)?;
    let (ct, ch, cw) = cfg.codec.factors();
    let (pt, ph, pw) = cfg.dit.patch;
    let (_, t, h, w) = mask.labels.dim();
    downsample_masks(&masked, (h / (ch * ph), w / (cw * pw), t / (ct * pt)))
}

fn array4_tensor(a: &Array4<f32>, device: &Device) -> Result<Tensor> {
    let (c, t, h, w) = a.dim();
    Ok(Tensor::from_vec(
        a.iter().copied().collect::<Vec<_>>(),
        (c, t, h, w),
        device,
    )?)
}

fn stack_rows(rows: &[ndarray::Array2<f32>], device: &Device) -> Result<Tensor> {
    let parts = rows
        .iter()
        .map(|m| {
            let (r, c) = m.dim();
            Ok(Tensor::from_vec(m.iter().copied().collect::<Vec<_>>(), (r, c), device)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

/// Normalized latent of a pixel video.
pub fn encode_video(video: &Array4<f32>, codec_cfg: CodecConfig) -> Result<Array4<f32>> {
    Ok(codec::normalize_latent(&codec::codec_encode(video, codec_cfg)?.values))
}

/// Conditioning tensors derived from reference crops.
#[derive(Debug, Clone)]
pub struct IdentityTensors {
    /// `(C, T, H, W)` normalized global-composite latent.
    pub global: Tensor,
    /// Per recognition scale `(N, tokens, F)`.
    pub scales: Vec<Tensor>,
    /// `(N, tokens, F)`.
    pub semantic: Tensor,
}

/// Global latent and local features for reference crops, for a clip of
/// `(frames, height, width)` pixels.
pub fn identity_tensors(
    references: &[FaceCrop],
    (t, h, w): (usize, usize, usize),
    cfg: &ModelConfig,
    concat: GlobalConcatMode,
    encoders: &Encoders,
    device: &Device,
) -> Result<IdentityTensors> {
    if references.is_empty() {
        return Err(Error::EmptyInput("reference crops"));
    }
    let global = codec::normalize_latent(&global_latent(references, h, w, t, cfg.codec, concat)?);
    let stacks = references
        .iter()
        .map(|c| encode_local(c, encoders.recognition.as_ref(), encoders.semantic.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let scales = (0..stacks[0].recognition_scales.len())
        .map(|s| {
            let rows: Vec<_> = stacks.iter().map(|st| st.recognition_scales[s].clone()).collect();
            stack_rows(&rows, device)
        })
        .collect::<Result<Vec<_>>>()?;
    let sem_rows: Vec<_> = stacks.iter().map(|st| st.semantic_features.clone()).collect();
    Ok(IdentityTensors {
        global: array4_tensor(&global, device)?,
        scales,
        semantic: stack_rows(&sem_rows, device)?,
    })
}

pub fn prepare_clip(
    clip: &LoadedClip,
    cfg: &ModelConfig,
    opts: PrepareOptions,
    encoders: &Encoders,
    device: &Device,
) -> Result<PreparedClip> {
    let (_, t, h, w) = clip.video.dim();
    let x0 = encode_video(&clip.video, cfg.codec)?;
    if x0.dim()
        != (
            cfg.dit.latent_channels,
            cfg.dit.latent_grid.0,
            cfg.dit.latent_grid.1,
            cfg.dit.latent_grid.2,
        )
    {
        return Err(Error::ShapeMismatch(format!(
            "clip {} encodes to {:?}, model expects {} channels on {:?}",
            clip.manifest.clip_id,
            x0.dim(),
            cfg.dit.latent_channels,
            cfg.dit.latent_grid
        )));
    }
    let frame0 = clip.video.index_axis(ndarray::Axis(1), 0);
    let references = detect_faces(&frame0, &clip.script.oracle_detector(0))?;
    let ids = identity_tensors(&references, (t, h, w), cfg, opts.concat, encoders, device)?;

    let labels = token_labels(&clip.mask, cfg, opts.supervision)?;
    let (one_hot, valid) = labels.to_tensors(device)?;
    let text = TextConditionStub::from_prompt(&clip.manifest.prompt, cfg.dit.text_width);
    let specs = clip.script.identities();
    Ok(PreparedClip {
        clip_id: clip.manifest.clip_id.clone(),
        n_ids: references.len(),
        x0: array4_tensor(&x0, device)?,
        global: ids.global,
        scales: ids.scales,
        semantic: ids.semantic,
        text: Tensor::from_vec(text.embedding, cfg.dit.text_width, device)?,
        one_hot,
        valid,
        labels,
        references,
        reference_embeddings: specs.iter().map(|i| i.canonical_embedding.clone()).collect(),
        boxes: clip
            .script
            .trajectories
            .iter()
            .map(|tr| (0..t).map(|f| tr.rect_at(f)).collect())
            .collect(),
        prompt: clip.manifest.prompt.clone(),
    })
}

fn roll_tensor(x: &Tensor, dim: usize, shift: usize) -> Result<Tensor> {
    let len = x.dim(dim)?;
    let shift = shift % len;
    if shift == 0 {
        return Ok(x.clone());
    }
    Ok(Tensor::cat(
        &[x.narrow(dim, len - shift, shift)?, x.narrow(dim, 0, len - shift)?],
        dim,
    )?)
}

fn roll_rows<T: Clone>(a: &ndarray::ArrayView<T, ndarray::IxDyn>, axis: usize, shift: usize) -> ndarray::ArrayD<T> {
    let len = a.shape()[axis];
    let mut out = a.to_owned();
    for i in 0..len {
        out.index_axis_mut(ndarray::Axis(axis), (i + shift) % len)
            .assign(&a.index_axis(ndarray::Axis(axis), i));
    }
    out
}

/// The clip moved down by `token_rows` token rows, wrapping at the bottom.
/// Backgrounds vary only horizontally, so the wrapped clip is as valid as
/// the original: faces stay intact and labels move with them. Boxes wrap
/// too and may straddle the bottom edge.
pub fn roll_vertical(clip: &PreparedClip, token_rows: usize, cfg: &ModelConfig) -> Result<PreparedClip> {
    let (gt, gh, gw) = cfg.dit.token_grid();
    let k = token_rows % gh;
    if k == 0 {
        return Ok(clip.clone());
    }
    let n = clip.n_ids;
    let latent_rows = k * cfg.dit.patch.1;
    let pixel_rows = latent_rows * cfg.codec.factors().1;
    let pixel_h = cfg.dit.latent_grid.1 * cfg.codec.factors().1;
    let one_hot = roll_tensor(&clip.one_hot.reshape((gt, gh, gw, n))?, 1, k)?.reshape((gt * gh * gw, n))?;
    let valid = roll_tensor(&clip.valid.reshape((gt, gh, gw))?, 1, k)?.reshape(gt * gh * gw)?;
    let labels = RoutingLabels {
        one_hot: roll_rows(&clip.labels.one_hot.view().into_dyn(), 2, k)
            .into_dimensionality()
            .expect("rank 4"),
        valid: roll_rows(&clip.labels.valid.view().into_dyn(), 1, k)
            .into_dimensionality()
            .expect("rank 3"),
        labels: roll_rows(&clip.labels.labels.view().into_dyn(), 1, k)
            .into_dimensionality()
            .expect("rank 3"),
    };
    Ok(PreparedClip {
        x0: roll_tensor(&clip.x0, 2, latent_rows)?,
        one_hot,
        valid,
        labels,
        boxes: clip
            .boxes
            .iter()
            .map(|b| {
                b.iter()
                    .map(|r| Rect::new((r.top + pixel_rows) % pixel_h, r.left, r.height, r.width))
                    .collect()
            })
            .collect(),
        ..clip.clone()
    })
}

/// Per-channel colour map `x_c -> 0.5 + sign_c * gain_c * (x_{source_c} - 0.5)`.
/// It keeps intensities in `[0, 1]` and commutes with the linear codec, so
/// it can be applied to a latent directly. Identities differ only in their
/// colours, which makes a recoloured clip a clip of new identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorMap {
    pub source: [usize; 3],
    pub sign: [f32; 3],
    pub gain: [f32; 3],
}

impl ColorMap {
    pub const IDENTITY: Self = Self {
        source: [0, 1, 2],
        sign: [1.0; 3],
        gain: [1.0; 3],
    };

    /// Uniform channel permutation, fair sign per channel, gain uniform in
    /// `[min_gain, 1]`.
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R, min_gain: f32) -> Self {
        let mut source = [0, 1, 2];
        for i in (1..3).rev() {
            source.swap(i, rng.random_range(0..=i));
        }
        let mut sign = [1.0; 3];
        let mut gain = [1.0; 3];
        for c in 0..3 {
            if rng.random_bool(0.5) {
                sign[c] = -1.0;
            }
            gain[c] = rng.random_range(min_gain..=1.0);
        }
        Self { source, sign, gain }
    }

    /// `(3, ...)` pixel intensities.
    pub fn apply_pixels<D: ndarray::Dimension + ndarray::RemoveAxis>(
        &self,
        pixels: &ndarray::Array<f32, D>,
    ) -> ndarray::Array<f32, D> {
        let mut out = pixels.clone();
        for c in 0..3 {
            let k = self.sign[c] * self.gain[c];
            let src = pixels.index_axis(ndarray::Axis(0), self.source[c]);
            out.index_axis_mut(ndarray::Axis(0), c)
                .assign(&src.mapv(|v| 0.5 + k * (v - 0.5)));
        }
        out
    }

    /// `(C, ...)` normalized latent whose channels are grouped by pixel
    /// channel, `C / 3` consecutive channels each.
    pub fn apply_latent(&self, latent: &Tensor) -> Result<Tensor> {
        let group = latent.dim(0)? / 3;
        let parts = (0..3)
            .map(|c| {
                let k = f64::from(self.sign[c] * self.gain[c]);
                Ok(latent.narrow(0, self.source[c] * group, group)?.affine(k, 0.0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// The clip with every pixel recoloured by `map`. Identity features are
/// recomputed from the recoloured reference crops, and the reference
/// embeddings become those of the recoloured crops.
pub fn recolor(
    clip: &PreparedClip,
    map: &ColorMap,
    cfg: &ModelConfig,
    concat: GlobalConcatMode,
    encoders: &Encoders,
) -> Result<PreparedClip> {
    let references = clip
        .references
        .iter()
        .map(|r| FaceCrop::new(map.apply_pixels(&r.pixels), r.rect, r.identity_index))
        .collect::<Result<Vec<_>>>()?;
    let (ft, fh, fw) = cfg.codec.factors();
    let (lt, lh, lw) = cfg.dit.latent_grid;
    let ids = identity_tensors(
        &references,
        (lt * ft, lh * fh, lw * fw),
        cfg,
        concat,
        encoders,
        clip.x0.device(),
    )?;
    Ok(PreparedClip {
        x0: map.apply_latent(&clip.x0)?,
        global: ids.global,
        scales: ids.scales,
        semantic: ids.semantic,
        reference_embeddings: references
            .iter()
            .map(|r| appearance_embedding(&r.pixels.view()))
            .collect(),
        references,
        ..clip.clone()
    })
}

/// A batch assembled from prepared clips (all with the same identity count).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: Tensor,
    pub global: Tensor,
    pub features: IdentityFeatures,
    pub text: Tensor,
    /// `(B, P, N)` and `(B, P)`.
    pub one_hot: Tensor,
    pub valid: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x0.dim(0).unwrap_or(0)
    }
}

pub fn make_batch(clips: &[&PreparedClip], dtype: DType) -> Result<Batch> {
    let first = clips.first().ok_or(Error::CorpusEmpty)?;
    if clips.iter().any(|c| c.n_ids != first.n_ids) {
        return Err(Error::ShapeMismatch(
            "clips in a batch must share the identity count".into(),
        ));
    }
    let stack = |f: &dyn Fn(&PreparedClip) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<&Tensor> = clips.iter().map(|c| f(c)).collect();
        Ok(Tensor::stack(&parts, 0)?.to_dtype(dtype)?)
    };
    let scales = (0..first.scales.len())
        .map(|s| stack(&|c: &PreparedClip| &c.scales[s]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        x0: stack(&|c| &c.x0)?,
        global: stack(&|c| &c.global)?,
        features: IdentityFeatures {
            scales,
            semantic: stack(&|c| &c.semantic)?,
        },
        text: stack(&|c| &c.text)?,
        one_hot: stack(&|c| &c.one_hot)?,
        valid: stack(&|c| &c.valid)?,
    })
}
