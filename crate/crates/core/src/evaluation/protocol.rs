//! Model-in-the-loop evaluation: guided generation with routing-map capture,
//! routing accuracy against latent labels, and face similarity of denoised
//! clips.

use candle_core::{Device, Tensor};
use ndarray::{s, Array3, Array4};

use crate::backbone::{codec, GlobalConcatMode, LatentVideo, TextConditionStub};
use crate::diffusion::{add_noise, sample_from, seeded_normal, Branch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluation::maps::LayerMap;
use crate::evaluation::{face_similarity_greedy, label_centroids, motion_features, text_relevance_features};
use crate::evaluation::{frechet_distance, prompt_features, ClipRow};
use crate::identity_embedding::{appearance_embedding, FaceCrop};
use crate::model::{IdentityFeatures, IdentityInput, Model, Routing};
use crate::supervision::{MaskVolume, Resolution, BACKGROUND};
use crate::synthdata::IdentitySpec;
use crate::training::data::{identity_tensors, Encoders, PreparedClip};
use crate::training::TRAIN_DTYPE;
use crate::volume::{crop, Rect};

/// Side of the reference face rendered for identities given by seed.
pub const SEED_FACE_SIZE: usize = 12;

/// Everything a single generation is conditioned on (batch of one).
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(1, text_width)`.
    pub text: Tensor,
    /// `(1, C, T, H, W)` when the model takes a global latent.
    pub global: Option<Tensor>,
    pub features: IdentityFeatures,
    pub n_ids: usize,
}

impl Conditioning {
    pub fn from_clip(model: &Model, clip: &PreparedClip) -> Result<Self> {
        Ok(Self {
            text: clip.text.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?,
            global: if model.cfg.dit.global_channels {
                Some(clip.global.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?)
            } else {
                None
            },
            features: IdentityFeatures {
                scales: clip
                    .scales
                    .iter()
                    .map(|s| Ok(s.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?))
                    .collect::<Result<Vec<_>>>()?,
                semantic: clip.semantic.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?,
            },
            n_ids: clip.n_ids,
        })
    }

    /// Conditioning for identities given as specs, each drawn as a face on
    /// white, for a clip of `(frames, height, width)` pixels.
    pub fn from_identities(
        model: &Model,
        specs: &[IdentitySpec],
        prompt: &str,
        dims: (usize, usize, usize),
        concat: GlobalConcatMode,
        encoders: &Encoders,
    ) -> Result<Self> {
        let refs = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                FaceCrop::new(
                    spec.render_face(SEED_FACE_SIZE, SEED_FACE_SIZE, 1.0),
                    Rect::new(0, 0, SEED_FACE_SIZE, SEED_FACE_SIZE),
                    i,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = identity_tensors(&refs, dims, &model.cfg, concat, encoders, &Device::Cpu)?;
        let width = model.cfg.dit.text_width;
        let text = TextConditionStub::from_prompt(prompt, width);
        Ok(Self {
            text: Tensor::from_vec(text.embedding, (1, width), &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?,
            global: if model.cfg.dit.global_channels {
                Some(ids.global.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?)
            } else {
                None
            },
            features: IdentityFeatures {
                scales: ids
                    .scales
                    .iter()
                    .map(|s| Ok(s.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?))
                    .collect::<Result<Vec<_>>>()?,
                semantic: ids.semantic.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?,
            },
            n_ids: specs.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// `(1, C, T, H, W)` normalized latent.
    pub latent: Tensor,
    /// Decoded `(3, T, H, W)` pixels, clamped to `[0, 1]`.
    pub video: Array4<f32>,
    /// Conditional-branch routing maps, one per (step, layer).
    pub maps: Vec<LayerMap>,
}

fn tensor_array4(t: &Tensor) -> Result<Array4<f32>> {
    let (c, f, h, w) = t.dims4()?;
    let v = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array4::from_shape_vec((c, f, h, w), v).expect("shape matches length"))
}

/// Pixels of a normalized `(1, C, T, H, W)` latent.
pub fn decode_latent(model: &Model, latent: &Tensor) -> Result<Array4<f32>> {
    let values = codec::denormalize_latent(&tensor_array4(&latent.squeeze(0)?)?);
    let video = codec::codec_decode(&LatentVideo {
        values,
        codec: model.cfg.codec,
    })?;
    Ok(video.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Guided DDIM from `x_start` over `timesteps`. The unconditional branch
/// keeps the identities and the global latent and drops only the prompt.
pub fn generate(
    model: &Model,
    cond: &Conditioning,
    x_start: Tensor,
    timesteps: &[usize],
    guidance: f64,
    sched: &NoiseSchedule,
    record_maps: bool,
) -> Result<Generated> {
    let latents = model.project(&cond.features)?;
    let null_text = cond.text.zeros_like()?;
    let grid = model.cfg.dit.token_grid();
    let mut maps = Vec::new();
    let mut step = 0usize;
    let latent = sample_from(
        |x: &Tensor, t: usize, branch: Branch| -> Result<Tensor> {
            let text = match branch {
                Branch::Conditional => &cond.text,
                Branch::Unconditional => &null_text,
            };
            let out = model.forward(
                x,
                &[t],
                text,
                cond.global.as_ref(),
                Some(IdentityInput {
                    latents: &latents,
                    routing: Routing::Router,
                }),
            )?;
            if branch == Branch::Conditional {
                if record_maps {
                    for (layer, m) in out.injected_layers.iter().zip(&out.maps) {
                        maps.push(LayerMap {
                            step,
                            layer: *layer,
                            grid,
                            indices: m.row(0).to_vec(),
                        });
                    }
                }
                step += 1;
            }
            Ok(out.eps)
        },
        x_start,
        timesteps,
        guidance,
        sched,
    )?;
    let video = decode_latent(model, &latent)?;
    Ok(Generated { latent, video, maps })
}

/// Evenly spaced timesteps from `t_start` down to 0 (`steps` of them, or
/// fewer when `t_start` is small).
pub fn partial_timesteps(t_start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("zero sampling steps".into()));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (t_start as f64 * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

fn clip_seed(seed: u64, clip: usize, t: usize) -> u64 {
    seed ^ ((clip as u64) << 40) ^ ((t as u64) << 20)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoutingAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl RoutingAccuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }
}

/// Agreement of router argmax maps with latent labels at valid positions,
/// pooled over clips, noise levels and injection layers. Each clip is noised
/// to each `t` with a seeded draw and denoised by one conditional forward.
pub fn routing_accuracy(
    model: &Model,
    clips: &[PreparedClip],
    timesteps: &[usize],
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<RoutingAccuracy> {
    let mut acc = RoutingAccuracy::default();
    for (ci, clip) in clips.iter().enumerate() {
        let cond = Conditioning::from_clip(model, clip)?;
        let latents = model.project(&cond.features)?;
        let x0 = clip.x0.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?;
        let labels: Vec<i8> = clip.labels.labels.iter().copied().collect();
        for &t in timesteps {
            let eps = seeded_normal(x0.dims(), clip_seed(seed, ci, t), &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
            let xt = add_noise(&x0, &eps, &[t], sched)?;
            let out = model.forward(
                &xt,
                &[t],
                &cond.text,
                cond.global.as_ref(),
                Some(IdentityInput {
                    latents: &latents,
                    routing: Routing::Router,
                }),
            )?;
            for m in &out.maps {
                if m.positions != labels.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} routed positions for {} labels",
                        m.positions,
                        labels.len()
                    )));
                }
                for (&k, &l) in m.row(0).iter().zip(&labels) {
                    if l != BACKGROUND {
                        acc.total += 1;
                        acc.correct += usize::from(k == l as usize);
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// Appearance embeddings of the boxes `boxes[i]` in one decoded frame.
pub fn face_embeddings_at(video: &Array4<f32>, frame: usize, boxes: &[Rect]) -> Vec<Vec<f64>> {
    let img = video.slice(s![.., frame, .., ..]);
    boxes
        .iter()
        .map(|&r| appearance_embedding(&crop(&img, r).view()))
        .collect()
}

/// Clip-level face similarity of a denoised clip: the clip is noised to
/// `t_start`, denoised with guidance, and each frame's faces (at the
/// scripted boxes) are greedily matched to the references. Returns the mean
/// over frames of the per-frame minimum.
pub fn denoise_face_similarity(
    model: &Model,
    clip: &PreparedClip,
    t_start: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let cond = Conditioning::from_clip(model, clip)?;
    let x0 = clip.x0.unsqueeze(0)?.to_dtype(TRAIN_DTYPE)?;
    let eps = seeded_normal(x0.dims(), seed, &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
    let xt = add_noise(&x0, &eps, &[t_start], sched)?;
    let gen = generate(
        model,
        &cond,
        xt,
        &partial_timesteps(t_start, steps)?,
        guidance,
        sched,
        false,
    )?;
    let frames = gen.video.dim().1;
    let mut total = 0.0;
    for f in 0..frames {
        let boxes: Vec<Rect> = clip.boxes.iter().map(|b| b[f]).collect();
        total += face_similarity_greedy(&face_embeddings_at(&gen.video, f, &boxes), &clip.reference_embeddings)?;
    }
    Ok(total / frames as f64)
}

/// Pixel-resolution label volume from a token-grid map, each token covering
/// a `factors = (ft, fh, fw)` block.
pub fn map_to_pixel_mask(map: &LayerMap, factors: (usize, usize, usize), n_ids: usize) -> Result<MaskVolume> {
    let (t, h, w) = map.grid;
    if map.indices.len() != t * h * w {
        return Err(Error::ShapeMismatch(format!(
            "{} indices for grid {:?}",
            map.indices.len(),
            map.grid
        )));
    }
    if n_ids > i8::MAX as usize {
        return Err(Error::Config(format!("{n_ids} identities exceed the label range")));
    }
    let (ft, fh, fw) = factors;
    let labels = Array4::from_shape_fn((1, t * ft, h * fh, w * fw), |(_, f, y, x)| {
        map.indices[((f / ft) * h + y / fh) * w + x / fw] as i8
    });
    Ok(MaskVolume {
        labels,
        n_ids,
        resolution: Resolution::Pixel,
    })
}

/// Bounding box of the largest 4-connected region labeled `k` in one frame
/// of `(T, H, W)` labels; ties go to the region found first in raster order.
pub fn largest_component(labels: &Array3<i8>, frame: usize, k: i8) -> Option<Rect> {
    let (_, h, w) = labels.dim();
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, Rect)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[[frame, start / w, start % w]] != k {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut y0, mut x0, mut y1, mut x1, mut size) = (h, w, 0, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            size += 1;
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
            let mut visit = |q: usize| {
                if !seen[q] && labels[[frame, q / w, q % w]] == k {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, Rect::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1)));
        }
    }
    best.map(|(_, r)| r)
}

/// Faces in a generated clip located through its routing mask: per frame,
/// the largest region of each identity. Identities absent from a frame are
/// skipped there.
pub fn detect_by_routing(video: &Array4<f32>, mask: &MaskVolume) -> Vec<Vec<(usize, Vec<f64>)>> {
    let (_, t, h, w) = mask.labels.dim();
    let labels = mask
        .labels
        .clone()
        .into_shape_with_order((t, h, w))
        .expect("single-channel mask");
    (0..t.min(video.dim().1))
        .map(|f| {
            let img = video.slice(s![.., f, .., ..]);
            (0..mask.n_ids)
                .filter_map(|k| {
                    largest_component(&labels, f, k as i8).map(|r| (k, appearance_embedding(&crop(&img, r).view())))
                })
                .collect()
        })
        .collect()
}

/// Metric row for one generated clip. Faces come from [`detect_by_routing`];
/// face similarity is the mean over frames of the greedy minimum against
/// `references`; the Fréchet distance compares all detected face embeddings
/// with reference embeddings drawn as the clip's ideal faces at every
/// frame; text relevance reads motion off the routing mask.
pub fn clip_metrics(
    clip_id: &str,
    video: &Array4<f32>,
    mask: &MaskVolume,
    references: &[Vec<f64>],
    prompt: &str,
) -> Result<ClipRow> {
    let detections = detect_by_routing(video, mask);
    let mut sims = Vec::new();
    let mut generated = Vec::new();
    let mut ideal = Vec::new();
    for frame in &detections {
        if frame.is_empty() {
            continue;
        }
        let embs: Vec<Vec<f64>> = frame.iter().map(|(_, e)| e.clone()).collect();
        sims.push(face_similarity_greedy(&embs, references)?);
        for (k, e) in frame {
            generated.push(e.clone());
            ideal.push(references[*k].clone());
        }
    }
    if sims.is_empty() {
        return Err(Error::EmptyInput("detected faces"));
    }
    let frechet = if generated.len() >= 2 {
        frechet_distance(&generated, &ideal)?
    } else {
        0.0
    };
    let frames = motion_features(&label_centroids(mask));
    Ok(ClipRow {
        clip_id: clip_id.to_string(),
        face_sim_min: sims.iter().sum::<f64>() / sims.len() as f64,
        frechet,
        text_relevance: text_relevance_features(&frames, &prompt_features(prompt, mask.n_ids))?,
    })
}

/// Per-position majority over the layers of one denoising step; ties go to
/// the lowest identity index.
pub fn consensus_map(maps: &[LayerMap], step: usize, n_ids: usize) -> Result<LayerMap> {
    let at: Vec<&LayerMap> = maps.iter().filter(|m| m.step == step).collect();
    let first = at.first().ok_or(Error::EmptyInput("routing maps at step"))?;
    let p = first.indices.len();
    let mut votes = vec![0usize; p * n_ids];
    for m in &at {
        if m.indices.len() != p {
            return Err(Error::ShapeMismatch("routing maps of one step differ in size".into()));
        }
        for (i, &k) in m.indices.iter().enumerate() {
            if k >= n_ids {
                return Err(Error::IndexOutOfRange {
                    index: k as i64,
                    count: n_ids,
                });
            }
            votes[i * n_ids + k] += 1;
        }
    }
    let indices = votes
        .chunks(n_ids)
        .map(|v| (0..n_ids).fold(0, |best, k| if v[k] > v[best] { k } else { best }))
        .collect();
    Ok(LayerMap {
        step,
        layer: 0,
        grid: first.grid,
        indices,
    })
}
