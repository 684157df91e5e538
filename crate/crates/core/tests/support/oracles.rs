//! Loop-level reimplementations checked against the library on random
//! instances.

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use multiid::diffusion::{add_noise, NoiseSchedule};
use multiid::evaluation::{frechet_distance, FRECHET_EPS};
use multiid::projector::{cross_attention, CrossAttentionBlock};
use multiid::router::{gather_features, RoutingMap};
use multiid::supervision::{downsample_masks, MaskVolume, Resolution, BACKGROUND};

use super::Tally;

/// Tolerance for the floating-point oracles.
pub const FLOAT_TOL: f64 = 1e-5;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Routed features must equal the selected identity's feature bit for bit.
pub fn check_gather(instances: usize, seed: u64) -> Tally {
    let mut tally = Tally::new("gather_features");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (b, n, p, c) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
        );
        let per_position = rng.random_bool(0.5);
        let indices: Vec<usize> = (0..b * p).map(|_| rng.random_range(0..n)).collect();
        let map = RoutingMap {
            batch: b,
            positions: p,
            n_ids: n,
            indices: indices.clone(),
        };
        let (values, shape) = if per_position {
            (normals(&mut rng, b * n * p * c), vec![b, n, p, c])
        } else {
            (normals(&mut rng, b * n * c), vec![b, n, c])
        };
        let got = flat(&gather_features(&map, &tensor(values.clone(), &shape)).unwrap());
        let mut want = Vec::with_capacity(b * p * c);
        for bi in 0..b {
            for pi in 0..p {
                let k = indices[bi * p + pi];
                for ci in 0..c {
                    want.push(if per_position {
                        values[((bi * n + k) * p + pi) * c + ci]
                    } else {
                        values[(bi * n + k) * c + ci]
                    });
                }
            }
        }
        let exact = got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        tally.record(if exact { 0.0 } else { 1.0 }, 0.0, || {
            format!("instance {i}: shape {shape:?}")
        });
    }
    tally
}

/// Linear-interpolation weight of input sample `j` for output sample `i`
/// along an axis of `input` samples resized to `out`, half-pixel centers.
fn hat_weight(i: usize, j: usize, out: usize, input: usize) -> f64 {
    let src = ((i as f64 + 0.5) * input as f64 / out as f64 - 0.5).max(0.0);
    (1.0 - (src - j as f64).abs()).max(0.0)
}

/// Every identity channel and the background are one-hot encoded,
/// resampled by summing hat-kernel weights over all pixels, and the
/// largest channel wins with identities before background on ties.
pub fn check_downsample(instances: usize, seed: u64) -> Tally {
    let mut tally = Tally::new("downsample_masks");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let n = rng.random_range(1..=3usize);
        let (t, h, w) = (
            rng.random_range(1..=5),
            rng.random_range(1..=9),
            rng.random_range(1..=9),
        );
        let (gt, gh, gw) = (
            rng.random_range(1..=t),
            rng.random_range(1..=h),
            rng.random_range(1..=w),
        );
        let labels = Array4::from_shape_fn((1, t, h, w), |_| rng.random_range(-1..n as i8));
        let mask = MaskVolume {
            labels: labels.clone(),
            n_ids: n,
            resolution: Resolution::Pixel,
        };
        let got = downsample_masks(&mask, (gh, gw, gt)).unwrap();
        let mut mismatches = 0usize;
        for ot in 0..gt {
            for oy in 0..gh {
                for ox in 0..gw {
                    let mut score = vec![0.0f64; n + 1];
                    for st in 0..t {
                        let wt = hat_weight(ot, st, gt, t);
                        for sy in 0..h {
                            let wy = hat_weight(oy, sy, gh, h);
                            for sx in 0..w {
                                let wx = hat_weight(ox, sx, gw, w);
                                let l = labels[[0, st, sy, sx]];
                                let ch = if l == BACKGROUND { n } else { l as usize };
                                score[ch] += wt * wy * wx;
                            }
                        }
                    }
                    let best = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    // Summation order differs from the library, so channels
                    // within rounding of the maximum count as tied.
                    let tied: Vec<usize> = (0..=n).filter(|&k| best - score[k] <= 1e-12).collect();
                    let lib = got.labels[[ot, oy, ox]];
                    let lib_ch = if lib == BACKGROUND { n } else { lib as usize };
                    let exact_winner = tied[0];
                    let ok_label = if tied.len() == 1 {
                        lib_ch == exact_winner
                    } else {
                        tied.contains(&lib_ch)
                    };
                    let is_id = lib_ch < n;
                    let ok_valid = got.valid[[ot, oy, ox]] == if is_id { 1.0 } else { 0.0 };
                    let ok_onehot = (0..n).all(|k| got.one_hot[[k, ot, oy, ox]] == if k == lib_ch { 1.0 } else { 0.0 });
                    if !(ok_label && ok_valid && ok_onehot) {
                        mismatches += 1;
                    }
                }
            }
        }
        tally.record(mismatches as f64, 0.0, || {
            format!("instance {i}: {n} ids, {t}x{h}x{w} -> {gt}x{gh}x{gw}")
        });
    }
    tally
}

/// Multi-head cross-attention with explicit loops.
pub fn check_cross_attention(instances: usize, seed: u64) -> Tally {
    let mut tally = Tally::new("cross_attention");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (b, pq, pk) = (
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        );
        let (dq, dkv) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (heads, hw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let width = heads * hw;
        let xq = normals(&mut rng, b * pq * dq);
        let xkv = normals(&mut rng, b * pk * dkv);
        let wq = normals(&mut rng, dq * width);
        let wk = normals(&mut rng, dkv * width);
        let wv = normals(&mut rng, dkv * width);
        let block = CrossAttentionBlock {
            wq: tensor(wq.clone(), &[dq, width]),
            wk: tensor(wk.clone(), &[dkv, width]),
            wv: tensor(wv.clone(), &[dkv, width]),
            heads,
        };
        let got = flat(
            &cross_attention(
                &tensor(xq.clone(), &[b, pq, dq]),
                &tensor(xkv.clone(), &[b, pk, dkv]),
                &block,
            )
            .unwrap(),
        );
        let proj = |x: &[f64], rows: usize, d: usize, wm: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; rows * width];
            for r in 0..rows {
                for o in 0..width {
                    out[r * width + o] = (0..d).map(|k| x[r * d + k] * wm[k * width + o]).sum();
                }
            }
            out
        };
        let scale = 1.0 / (hw as f64).sqrt();
        let mut want = vec![0.0; b * pq * width];
        for bi in 0..b {
            let q = proj(&xq[bi * pq * dq..(bi + 1) * pq * dq], pq, dq, &wq);
            let k = proj(&xkv[bi * pk * dkv..(bi + 1) * pk * dkv], pk, dkv, &wk);
            let v = proj(&xkv[bi * pk * dkv..(bi + 1) * pk * dkv], pk, dkv, &wv);
            for hd in 0..heads {
                for qi in 0..pq {
                    let scores: Vec<f64> = (0..pk)
                        .map(|ki| {
                            (0..hw)
                                .map(|d| q[qi * width + hd * hw + d] * k[ki * width + hd * hw + d])
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..hw {
                        want[(bi * pq + qi) * width + hd * hw + d] =
                            (0..pk).map(|ki| e[ki] / z * v[ki * width + hd * hw + d]).sum();
                    }
                }
            }
        }
        tally.record(max_abs_diff(&got, &want), FLOAT_TOL, || {
            format!("instance {i}: b{b} pq{pq} pk{pk} heads{heads}x{hw}")
        });
    }
    tally
}

/// Forward noising with the cumulative product taken from scratch.
pub fn check_add_noise(instances: usize, seed: u64) -> Tally {
    let mut tally = Tally::new("add_noise");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let steps = rng.random_range(2..=60usize);
        let beta_start = rng.random_range(1e-5..1e-3);
        let beta_end = rng.random_range(beta_start..0.05);
        let sched = NoiseSchedule::linear(steps, beta_start, beta_end).unwrap();
        let b = rng.random_range(1..=4usize);
        let rank = rng.random_range(1..=4usize);
        let mut shape = vec![b];
        shape.extend((1..rank).map(|_| rng.random_range(1..=4usize)));
        let per: usize = shape[1..].iter().product();
        let x0 = normals(&mut rng, b * per);
        let eps = normals(&mut rng, b * per);
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..steps)).collect();
        let got = flat(&add_noise(&tensor(x0.clone(), &shape), &tensor(eps.clone(), &shape), &ts, &sched).unwrap());
        let mut want = Vec::with_capacity(b * per);
        for (bi, &t) in ts.iter().enumerate() {
            let abar: f64 = (0..=t)
                .map(|s| 1.0 - (beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64))
                .product();
            for j in 0..per {
                want.push(abar.sqrt() * x0[bi * per + j] + (1.0 - abar).sqrt() * eps[bi * per + j]);
            }
        }
        tally.record(max_abs_diff(&got, &want), FLOAT_TOL, || {
            format!("instance {i}: shape {shape:?} ts {ts:?}")
        });
    }
    tally
}

fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64
            + if a == b { FRECHET_EPS } else { 0.0 }
    });
    (mean, cov)
}

/// Principal square root by the Denman-Beavers iteration; valid for
/// matrices whose eigenvalues are real and positive, as for a product of
/// two SPD matrices.
fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = a.clone();
    let mut z = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * y.norm() {
            break;
        }
    }
    y
}

/// `|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a S_b)^1/2)`, using the
/// non-symmetric product instead of the symmetrized form.
pub fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, sa) = covariance(a);
    let (mb, sb) = covariance(b);
    let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let cross = sqrtm_denman_beavers(&(&sa * &sb)).trace();
    (diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0)
}

pub fn check_frechet(instances: usize, seed: u64) -> Tally {
    let mut tally = Tally::new("frechet_distance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let d = rng.random_range(1..=4usize);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            let n = rng.random_range(d + 2..=12);
            let shift: Vec<f64> = normals(rng, d);
            let scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|j| shift[j] + scale[j] * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        };
        let a = sample(&mut rng);
        let b = sample(&mut rng);
        let got = frechet_distance(&a, &b).unwrap();
        let want = frechet_oracle(&a, &b);
        tally.record((got - want).abs(), FLOAT_TOL, || {
            format!("instance {i}: d{d} got {got} want {want}")
        });
    }
    tally
}

/// All five oracle suites at the acceptance instance count.
pub fn all(instances: usize, seed: u64) -> Vec<Tally> {
    vec![
        check_gather(instances, seed),
        check_downsample(instances, seed + 1),
        check_cross_attention(instances, seed + 2),
        check_add_noise(instances, seed + 3),
        check_frechet(instances, seed + 4),
    ]
}
