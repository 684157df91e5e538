//! Identity, distribution and prompt metrics, plus routing-map export.

pub mod maps;
pub mod protocol;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity_embedding::cosine;
use crate::supervision::{MaskVolume, BACKGROUND};

pub use maps::{emit_routing_maps, read_pgm, write_pgm, LayerMap};

/// Greedy matching: repeatedly take the most similar unmatched
/// (generated, reference) pair, lowest indices first on ties. Returns the
/// chosen pairs with their similarity, in the order they were picked.
pub fn greedy_matches(sim: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let rows = sim.len();
    let cols = sim.first().map_or(0, Vec::len);
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut out = Vec::with_capacity(rows.min(cols));
    for _ in 0..rows.min(cols) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in sim.iter().enumerate() {
            if row_used[i] {
                continue;
            }
            for (j, &s) in row.iter().enumerate() {
                if !col_used[j] && best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((i, j, s));
                }
            }
        }
        let (i, j, s) = best.expect("unmatched pair remains");
        row_used[i] = true;
        col_used[j] = true;
        out.push((i, j, s));
    }
    out
}

fn similarity_matrix(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("generated faces"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference faces"));
    }
    Ok(generated
        .iter()
        .map(|g| reference.iter().map(|r| cosine(g, r)).collect())
        .collect())
}

/// Minimum cosine over the greedy matching of generated to reference faces.
pub fn face_similarity_greedy(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let sim = similarity_matrix(generated, reference)?;
    Ok(greedy_matches(&sim).iter().map(|m| m.2).fold(f64::INFINITY, f64::min))
}

/// Minimum similarity under the assignment with the largest total, found
/// by enumeration. Ties keep the first assignment found.
pub fn optimal_assignment_min(sim: &[Vec<f64>]) -> f64 {
    let rows = sim.len();
    let cols = sim.first().map_or(0, Vec::len);
    if rows < cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| sim.iter().map(|r| r[j]).collect()).collect();
        return optimal_assignment_min(&t);
    }
    // Every column gets a distinct row.
    fn rec(col: usize, sim: &[Vec<f64>], used: &mut [bool], chosen: &mut Vec<f64>, best: &mut (f64, f64)) {
        if col == sim[0].len() {
            let total: f64 = chosen.iter().sum();
            if total > best.0 {
                *best = (total, chosen.iter().copied().fold(f64::INFINITY, f64::min));
            }
            return;
        }
        for r in 0..sim.len() {
            if !used[r] {
                used[r] = true;
                chosen.push(sim[r][col]);
                rec(col + 1, sim, used, chosen, best);
                chosen.pop();
                used[r] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    rec(0, sim, &mut vec![false; rows], &mut Vec::with_capacity(cols), &mut best);
    best.1
}

/// [`face_similarity_greedy`] with the optimal assignment instead of the
/// greedy one. For comparison only.
pub fn face_similarity_exhaustive(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    Ok(optimal_assignment_min(&similarity_matrix(generated, reference)?))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Diagonal regularization added to both covariances.
pub const FRECHET_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussians fitted to the rows of `a` and `b`:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::EmptyInput("at least two samples per side"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch("feature rows must share a non-zero width".into()));
    }
    let to_m = |x: &[Vec<f64>]| DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
    let (ma, mut sa) = mean_and_cov(&to_m(a));
    let (mb, mut sb) = mean_and_cov(&to_m(b));
    for i in 0..d {
        sa[(i, i)] += FRECHET_EPS;
        sb[(i, i)] += FRECHET_EPS;
    }
    let ra = psd_sqrt(&sa);
    let cross = psd_sqrt(&(&ra * &sb * &ra));
    let diff = (ma - mb).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross.trace()).max(0.0))
}

/// Motion classes of the text stub, in feature order.
pub const MOTIONS: [&str; 3] = ["moves left", "moves right", "stays still"];

/// Prompt features: per identity slot, a one-hot over [`MOTIONS`]. Clauses
/// look like `id<k> <motion>` joined by `and`.
pub fn prompt_features(prompt: &str, n_ids: usize) -> Vec<f64> {
    let mut v = vec![0.0; 3 * n_ids];
    for clause in prompt.to_lowercase().split(" and ") {
        let clause = clause.trim();
        let Some(rest) = clause.strip_prefix("id") else {
            continue;
        };
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let Ok(slot) = digits.parse::<usize>() else { continue };
        if slot >= n_ids {
            continue;
        }
        if let Some(m) = MOTIONS.iter().position(|m| clause.ends_with(m)) {
            v[3 * slot + m] = 1.0;
        }
    }
    v
}

/// Horizontal centroid of each identity per frame (`None` if absent).
pub fn label_centroids(mask: &MaskVolume) -> Vec<Vec<Option<f64>>> {
    let t = mask.labels.dim().1;
    let mut out = vec![vec![None; t]; mask.n_ids];
    for (f, frame) in mask.labels.index_axis(ndarray::Axis(0), 0).outer_iter().enumerate() {
        let mut sum = vec![(0.0f64, 0usize); mask.n_ids];
        for ((_, x), &l) in frame.indexed_iter() {
            if l != BACKGROUND && (l as usize) < mask.n_ids {
                sum[l as usize].0 += x as f64;
                sum[l as usize].1 += 1;
            }
        }
        for (k, (s, c)) in sum.into_iter().enumerate() {
            if c > 0 {
                out[k][f] = Some(s / c as f64);
            }
        }
    }
    out
}

/// Frames on either side used to judge motion at a frame.
pub const MOTION_HALF_WINDOW: usize = 4;
/// Horizontal displacement (pixels) over the window that counts as motion.
pub const MOTION_THRESHOLD: f64 = 1.0;

/// Per-frame motion features: for each identity, a one-hot over
/// [`MOTIONS`] from its centroid displacement across a window around the
/// frame; all zeros for an identity not visible at both window ends.
pub fn motion_features(centroids: &[Vec<Option<f64>>]) -> Vec<Vec<f64>> {
    let n = centroids.len();
    let t = centroids.first().map_or(0, Vec::len);
    (0..t)
        .map(|f| {
            let lo = f.saturating_sub(MOTION_HALF_WINDOW);
            let hi = (f + MOTION_HALF_WINDOW).min(t - 1);
            let mut v = vec![0.0; 3 * n];
            for (k, c) in centroids.iter().enumerate() {
                if let (Some(a), Some(b)) = (c[lo], c[hi]) {
                    let d = b - a;
                    let m = if d < -MOTION_THRESHOLD {
                        0
                    } else if d > MOTION_THRESHOLD {
                        1
                    } else {
                        2
                    };
                    v[3 * k + m] = 1.0;
                }
            }
            v
        })
        .collect()
}

/// Mean over frames of the cosine between per-frame features and the
/// prompt feature.
pub fn text_relevance_features(frames: &[Vec<f64>], prompt: &[f64]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    Ok(frames.iter().map(|f| cosine(f, prompt)).sum::<f64>() / frames.len() as f64)
}

/// Prompt agreement of the motion visible in a label volume.
pub fn text_relevance(mask: &MaskVolume, prompt: &str) -> Result<f64> {
    let frames = motion_features(&label_centroids(mask));
    text_relevance_features(&frames, &prompt_features(prompt, mask.n_ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip_id: String,
    pub face_sim_min: f64,
    pub frechet: f64,
    pub text_relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub face_sim_min: f64,
    pub frechet: f64,
    pub text_relevance: f64,
    pub per_clip: Vec<ClipRow>,
}

impl EvalReport {
    pub fn from_rows(per_clip: Vec<ClipRow>) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(Error::EmptyInput("evaluation rows"));
        }
        let n = per_clip.len() as f64;
        let mean = |f: fn(&ClipRow) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            face_sim_min: mean(|r| r.face_sim_min),
            frechet: mean(|r| r.frechet),
            text_relevance: mean(|r| r.text_relevance),
            per_clip,
        })
    }
}
