//! Procedural multi-identity video corpus with exact ground truth.
//!
//! An identity is a seeded face pattern (four flat quadrant colors inside an
//! inscribed ellipse). A clip is a scene script: one horizontal lane per
//! identity, a straight left/right/still path through it, and a soft
//! gradient background. Rendering the script gives pixels, pixel-exact
//! masks, and the boxes an oracle detector reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity_embedding::{
    cosine, ellipse_contains, embedding_from_colors, quadrant_of, ExpectedFace, OracleDetector,
};
use crate::supervision::{MaskVolume, Resolution, BACKGROUND};
use crate::volume::{self, Rect};

/// Distinct identities in one corpus must stay below this embedding cosine.
pub const MAX_IDENTITY_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub seed: u64,
    /// Quadrant colors, row-major `[quadrant][channel]`.
    pub pattern_params: Vec<f64>,
    pub canonical_embedding: Vec<f64>,
}

impl IdentitySpec {
    pub fn colors(&self) -> [[f32; 3]; 4] {
        let mut out = [[0.0f32; 3]; 4];
        for (i, v) in self.pattern_params.iter().enumerate() {
            out[i / 3][i % 3] = *v as f32;
        }
        out
    }

    /// The face drawn at `h x w` over a flat background.
    pub fn render_face(&self, h: usize, w: usize, background: f32) -> Array3<f32> {
        let colors = self.colors();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            if ellipse_contains(h, w, y, x) {
                colors[quadrant_of(h, w, y, x)][c]
            } else {
                background
            }
        })
    }
}

pub fn gen_identity(seed: u64) -> IdentitySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern_params: Vec<f64> = (0..12)
        .map(|_| f64::from(rng.random_range(13u8..=242) as f32 / 255.0))
        .collect();
    let mut colors = [[0.0f64; 3]; 4];
    for (i, v) in pattern_params.iter().enumerate() {
        colors[i / 3][i % 3] = *v;
    }
    IdentitySpec {
        seed,
        canonical_embedding: embedding_from_colors(&colors),
        pattern_params,
    }
}

/// Draws identity seeds from `rng`, skipping any whose embedding is too close
/// to one already accepted.
pub fn gen_identity_pool(count: usize, rng: &mut ChaCha8Rng) -> Vec<IdentitySpec> {
    let mut pool: Vec<IdentitySpec> = Vec::with_capacity(count);
    while pool.len() < count {
        let cand = gen_identity(rng.random());
        if pool
            .iter()
            .all(|p| cosine(&p.canonical_embedding, &cand.canonical_embedding) < MAX_IDENTITY_COSINE)
        {
            pool.push(cand);
        }
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub top: f64,
    pub left: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub height: usize,
    pub width: usize,
    /// Sorted by frame; positions between keyframes are linearly interpolated.
    pub keyframes: Vec<Keyframe>,
}

impl Trajectory {
    pub fn rect_at(&self, frame: usize) -> Rect {
        let ks = &self.keyframes;
        let (top, left) = match ks.iter().position(|k| k.frame >= frame) {
            Some(0) => (ks[0].top, ks[0].left),
            None => {
                let k = ks.last().unwrap();
                (k.top, k.left)
            }
            Some(i) => {
                let (a, b) = (ks[i - 1], ks[i]);
                let u = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
                (a.top + u * (b.top - a.top), a.left + u * (b.left - a.left))
            }
        };
        Rect::new(
            (top + 0.5).floor() as usize,
            (left + 0.5).floor() as usize,
            self.height,
            self.width,
        )
    }

    /// Horizontal direction over the whole path.
    pub fn motion(&self) -> Motion {
        let dx = self.keyframes.last().unwrap().left - self.keyframes[0].left;
        if dx > 0.0 {
            Motion::Right
        } else if dx < 0.0 {
            Motion::Left
        } else {
            Motion::Still
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Still,
}

impl Motion {
    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Left => "moves left",
            Motion::Right => "moves right",
            Motion::Still => "stays still",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    /// Added at the right edge, subtracted at the left.
    pub gradient: [f32; 3],
}

impl Background {
    pub fn color(&self, c: usize, x: usize, width: usize) -> f32 {
        let u = if width > 1 {
            x as f32 / (width - 1) as f32 - 0.5
        } else {
            0.0
        };
        (self.base[c] + self.gradient[c] * u).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub identity_seeds: Vec<u64>,
    pub trajectories: Vec<Trajectory>,
    pub background: Background,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_stride: usize,
}

impl SceneScript {
    pub fn identities(&self) -> Vec<IdentitySpec> {
        self.identity_seeds.iter().map(|&s| gen_identity(s)).collect()
    }

    pub fn prompt(&self) -> String {
        let parts: Vec<String> = self
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, tr)| format!("id{i} {}", tr.motion().phrase()))
            .collect();
        parts.join(" and ")
    }

    pub fn oracle_detector(&self, frame: usize) -> OracleDetector {
        let ids = self.identities();
        OracleDetector {
            expected: self
                .trajectories
                .iter()
                .zip(&ids)
                .enumerate()
                .map(|(i, (tr, id))| ExpectedFace {
                    identity_index: i,
                    rect: tr.rect_at(frame),
                    colors: id.colors(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_clips: usize,
    pub num_ids: usize,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub frame_stride: usize,
    /// Inclusive range of face heights/widths in pixels (even values are used).
    pub face_min: usize,
    pub face_max: usize,
    pub seed: u64,
    /// Size of a shared identity pool the clips draw from; 0 gives every
    /// clip its own fresh identities.
    pub identity_pool: usize,
    /// Seed of the shared pool (defaults to `seed`), so a second corpus can
    /// reuse the identities of a first one in new scenes.
    pub identity_seed: Option<u64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_clips: 20,
            num_ids: 2,
            height: 32,
            width: 32,
            num_frames: 16,
            frame_stride: 1,
            face_min: 10,
            face_max: 14,
            seed: 0,
            identity_pool: 0,
            identity_seed: None,
        }
    }
}

fn even_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let lo = lo.max(2).div_ceil(2);
    let hi = (hi / 2).max(lo);
    2 * rng.random_range(lo..=hi)
}

/// A random script placing each identity in its own horizontal lane.
pub fn random_script(identities: &[IdentitySpec], cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> SceneScript {
    let n = identities.len();
    let lane_h = cfg.height / n;
    let mut lanes: Vec<usize> = (0..n).collect();
    lanes.shuffle(rng);
    let span = ((cfg.num_frames.max(1) - 1) * cfg.frame_stride) as f64;

    let trajectories = lanes
        .iter()
        .map(|&lane| {
            let h = even_in(rng, cfg.face_min, cfg.face_max.min(lane_h));
            let w = even_in(rng, cfg.face_min, cfg.face_max.min(cfg.width));
            let top = (lane * lane_h + rng.random_range(0..=lane_h - h)) as f64;
            let room = (cfg.width - w) as f64;
            let roll: f64 = rng.random();
            let speed = if rng.random_bool(0.5) { 0.5 } else { 1.0 };
            let dist = if span > 0.0 { (speed * span).min(room) } else { 0.0 };
            let (x0, x1) = if roll < 0.4 {
                let x0 = rng.random_range(0.0..=room - dist).round();
                (x0, x0 + dist)
            } else if roll < 0.8 {
                let x0 = rng.random_range(dist..=room).round();
                (x0, x0 - dist)
            } else {
                let x0 = rng.random_range(0.0..=room).round();
                (x0, x0)
            };
            Trajectory {
                height: h,
                width: w,
                keyframes: vec![
                    Keyframe {
                        frame: 0,
                        top,
                        left: x0,
                    },
                    Keyframe {
                        frame: cfg.num_frames.max(1) - 1,
                        top,
                        left: x1,
                    },
                ],
            }
        })
        .collect();

    let mut base = [0.0f32; 3];
    let mut gradient = [0.0f32; 3];
    for c in 0..3 {
        base[c] = rng.random_range(0.1f32..0.9);
        gradient[c] = rng.random_range(-0.1f32..0.1);
    }
    SceneScript {
        identity_seeds: identities.iter().map(|i| i.seed).collect(),
        trajectories,
        background: Background { base, gradient },
        num_frames: cfg.num_frames,
        height: cfg.height,
        width: cfg.width,
        frame_stride: cfg.frame_stride,
    }
}

#[derive(Debug, Clone)]
pub struct RenderedClip {
    /// `(3, T, H, W)` in `[0, 1]`.
    pub video: Array4<f32>,
    /// Exact occupancy at pixel resolution.
    pub mask: MaskVolume,
    /// Box per identity per frame.
    pub boxes: Vec<Vec<Rect>>,
    pub prompt: String,
}

pub fn render_clip(script: &SceneScript) -> Result<RenderedClip> {
    let (t, h, w) = (script.num_frames, script.height, script.width);
    let ids = script.identities();
    if ids.len() != script.trajectories.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} identities, {} trajectories",
            ids.len(),
            script.trajectories.len()
        )));
    }
    let mut video = Array4::from_shape_fn((3, t, h, w), |(c, _, _, x)| script.background.color(c, x, w));
    let mut labels = Array4::from_elem((1, t, h, w), BACKGROUND);
    let mut boxes = vec![Vec::with_capacity(t); ids.len()];
    for f in 0..t {
        for (i, (tr, id)) in script.trajectories.iter().zip(&ids).enumerate() {
            let r = tr.rect_at(f);
            if !r.fits_in(h, w) {
                return Err(Error::RegionOutOfBounds { identity: i });
            }
            let colors = id.colors();
            for y in 0..r.height {
                for x in 0..r.width {
                    if !ellipse_contains(r.height, r.width, y, x) {
                        continue;
                    }
                    let cell = &mut labels[[0, f, r.top + y, r.left + x]];
                    if *cell != BACKGROUND {
                        continue;
                    }
                    *cell = i as i8;
                    let q = quadrant_of(r.height, r.width, y, x);
                    for c in 0..3 {
                        video[[c, f, r.top + y, r.left + x]] = colors[q][c];
                    }
                }
            }
            boxes[i].push(r);
        }
    }
    Ok(RenderedClip {
        video,
        mask: MaskVolume {
            labels,
            n_ids: ids.len(),
            resolution: Resolution::Pixel,
        },
        boxes,
        prompt: script.prompt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: String,
    /// Paths relative to the corpus directory.
    pub video: String,
    pub mask: String,
    pub script: String,
    pub prompt: String,
    pub identity_seeds: Vec<u64>,
}

/// Separates the pool's random stream from the scene stream of the same seed.
const POOL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_CONFIG_FILE: &str = "corpus.json";

/// Renders and writes `cfg.num_clips` clips plus `manifest.jsonl`.
pub fn write_corpus(out_dir: &Path, cfg: &CorpusConfig) -> Result<Vec<ClipManifest>> {
    if cfg.num_ids == 0 || cfg.num_ids > 127 || cfg.height / cfg.num_ids < cfg.face_min {
        return Err(Error::Config(format!(
            "{} identities do not fit a {}-pixel-high frame",
            cfg.num_ids, cfg.height
        )));
    }
    if cfg.face_max > cfg.width || cfg.face_min > cfg.face_max || cfg.frame_stride == 0 {
        return Err(Error::Config("face size range or frame stride invalid".into()));
    }
    if cfg.identity_pool != 0 && cfg.identity_pool < cfg.num_ids {
        return Err(Error::Config(format!(
            "identity pool of {} cannot fill {} slots per clip",
            cfg.identity_pool, cfg.num_ids
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let casts: Vec<Vec<IdentitySpec>> = if cfg.identity_pool == 0 {
        gen_identity_pool(cfg.num_clips * cfg.num_ids, &mut rng)
            .chunks(cfg.num_ids)
            .map(<[IdentitySpec]>::to_vec)
            .collect()
    } else {
        let mut pool_rng = ChaCha8Rng::seed_from_u64(cfg.identity_seed.unwrap_or(cfg.seed) ^ POOL_SALT);
        let pool = gen_identity_pool(cfg.identity_pool, &mut pool_rng);
        (0..cfg.num_clips)
            .map(|_| {
                rand::seq::index::sample(&mut rng, pool.len(), cfg.num_ids)
                    .iter()
                    .map(|i| pool[i].clone())
                    .collect()
            })
            .collect()
    };

    let mut manifests = Vec::with_capacity(cfg.num_clips);
    for (c, ids) in casts.iter().enumerate() {
        let script = random_script(ids, cfg, &mut rng);
        let clip = render_clip(&script)?;
        let clip_id = format!("clip_{c:04}");
        let m = ClipManifest {
            video: format!("{clip_id}.video.bin"),
            mask: format!("{clip_id}.mask.bin"),
            script: format!("{clip_id}.script.json"),
            prompt: clip.prompt.clone(),
            identity_seeds: script.identity_seeds.clone(),
            clip_id,
        };
        volume::write_video(&out_dir.join(&m.video), &clip.video)?;
        volume::write_labels(&out_dir.join(&m.mask), &clip.mask.labels, clip.mask.n_ids)?;
        let sp = out_dir.join(&m.script);
        fs::write(&sp, serde_json::to_string_pretty(&script)?).map_err(|e| Error::io(sp, e))?;
        manifests.push(m);
    }

    let mp = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
    for m in &manifests {
        writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&mp, e))?;
    }
    let cp = out_dir.join(CORPUS_CONFIG_FILE);
    fs::write(&cp, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(cp, e))?;
    Ok(manifests)
}

#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub manifest: ClipManifest,
    pub script: SceneScript,
    pub video: Array4<f32>,
    pub mask: MaskVolume,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ClipManifest>> {
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn load_clip(dir: &Path, m: &ClipManifest) -> Result<LoadedClip> {
    let path = |p: &str| -> PathBuf { dir.join(p) };
    let video = volume::read_video(&path(&m.video))?;
    let (labels, n_ids) = volume::read_labels(&path(&m.mask))?;
    let sp = path(&m.script);
    let script: SceneScript = serde_json::from_str(&fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let (_, t, h, w) = video.dim();
    let (_, mt, mh, mw) = labels.dim();
    if (t, h, w) != (mt, mh, mw) || n_ids != m.identity_seeds.len() || script.identity_seeds != m.identity_seeds {
        return Err(Error::ShapeMismatch(format!(
            "clip {}: video {:?} / mask {:?} / identities disagree",
            m.clip_id,
            video.dim(),
            labels.dim()
        )));
    }
    Ok(LoadedClip {
        manifest: m.clone(),
        script,
        video,
        mask: MaskVolume {
            labels,
            n_ids,
            resolution: Resolution::Pixel,
        },
    })
}

pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedClip>> {
    read_manifest(dir)?.iter().map(|m| load_clip(dir, m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity_embedding::{appearance_embedding, detect_faces};

    #[test]
    fn identity_is_deterministic_and_normalized() {
        assert_eq!(gen_identity(7), gen_identity(7));
        let e = &gen_identity(7).canonical_embedding;
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pool_of_fifty_is_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool = gen_identity_pool(50, &mut rng);
        for i in 0..50 {
            for j in 0..i {
                let c = cosine(&pool[i].canonical_embedding, &pool[j].canonical_embedding);
                assert!(c < MAX_IDENTITY_COSINE, "pair ({i},{j}) cosine {c}");
            }
        }
    }

    fn static_script(left: f64, moving: bool) -> SceneScript {
        let end = if moving { left + 15.0 } else { left };
        SceneScript {
            identity_seeds: vec![3],
            trajectories: vec![Trajectory {
                height: 10,
                width: 10,
                keyframes: vec![
                    Keyframe {
                        frame: 0,
                        top: 4.0,
                        left,
                    },
                    Keyframe {
                        frame: 15,
                        top: 4.0,
                        left: end,
                    },
                ],
            }],
            background: Background {
                base: [0.3, 0.4, 0.5],
                gradient: [0.05, 0.0, -0.05],
            },
            num_frames: 16,
            height: 32,
            width: 32,
            frame_stride: 1,
        }
    }

    #[test]
    fn static_identity_mask_constant() {
        let clip = render_clip(&static_script(5.0, false)).unwrap();
        let first = clip.mask.labels.slice(ndarray::s![0, 0, .., ..]).to_owned();
        for f in 1..16 {
            assert_eq!(clip.mask.labels.slice(ndarray::s![0, f, .., ..]), first);
        }
    }

    #[test]
    fn translating_identity_mask_translates() {
        let clip = render_clip(&static_script(2.0, true)).unwrap();
        let l = &clip.mask.labels;
        for f in 1..16 {
            for y in 0..32 {
                for x in 1..32 {
                    assert_eq!(l[[0, f, y, x]], l[[0, f - 1, y, x - 1]]);
                }
            }
        }
    }

    #[test]
    fn rendered_crop_embedding_matches_canonical() {
        let script = static_script(2.0, true);
        let clip = render_clip(&script).unwrap();
        let id = gen_identity(3);
        for f in [0, 7, 15] {
            let frame = clip.video.slice(ndarray::s![.., f, .., ..]);
            let crops = detect_faces(&frame, &script.oracle_detector(f)).unwrap();
            let e = appearance_embedding(&crops[0].pixels.view());
            for (a, b) in e.iter().zip(&id.canonical_embedding) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_identities_never_share_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CorpusConfig::default();
        for _ in 0..10 {
            let ids = gen_identity_pool(2, &mut rng);
            let script = random_script(&ids, &cfg, &mut rng);
            let clip = render_clip(&script).unwrap();
            for f in 0..cfg.num_frames {
                assert!(!clip.boxes[0][f].intersects(&clip.boxes[1][f]));
                let count = |k: i8| {
                    clip.mask
                        .labels
                        .slice(ndarray::s![0, f, .., ..])
                        .iter()
                        .filter(|&&v| v == k)
                        .count()
                };
                let area = |k: usize| {
                    let r = clip.boxes[k][f];
                    (0..r.height)
                        .flat_map(|y| (0..r.width).map(move |x| (y, x)))
                        .filter(|&(y, x)| ellipse_contains(r.height, r.width, y, x))
                        .count()
                };
                assert_eq!(count(0), area(0));
                assert_eq!(count(1), area(1));
            }
        }
    }

    #[test]
    fn prompt_follows_motion() {
        let s = static_script(2.0, true);
        assert_eq!(s.prompt(), "id0 moves right");
        assert_eq!(static_script(2.0, false).prompt(), "id0 stays still");
    }
}
