//! Routing invariants: hard assignment, background masking, and the
//! lambda = 0 reduction.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use multiid::router::{assign_ids, routing_probs};
use multiid::supervision::{routing_loss, routing_objective, LossVariant};

/// Lowest index among the maxima.
fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Positions whose hard assignment differs from the argmax of the routing
/// probabilities. A tenth of the rows carry an exact tie for the maximum.
pub fn argmax_mismatches(positions: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let mut logits: Vec<f64> = (0..positions * n).map(|_| rng.sample(StandardNormal)).collect();
    for row in logits.chunks_mut(n) {
        if rng.random_bool(0.1) {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let k = rng.random_range(0..n);
            row[k] = top;
        }
    }
    let t = Tensor::from_vec(logits.clone(), (1, positions, n), &Device::Cpu).unwrap();
    let map = assign_ids(&t).unwrap();
    let probs: Vec<f64> = routing_probs(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let logit_mismatch = logits
        .chunks(n)
        .enumerate()
        .filter(|(p, row)| first_argmax(row) != map.indices[*p])
        .count();
    let prob_mismatch = probs
        .chunks(n)
        .enumerate()
        .filter(|(p, row)| first_argmax(row) != map.indices[*p])
        .count();
    logit_mismatch + prob_mismatch
}

/// Number of gradient entries at background positions that are not exactly
/// zero, over both supervised loss variants and several random draws.
pub fn background_gradient_leaks(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaks = 0;
    for _ in 0..20 {
        let (b, p, n) = (2, 16, 3);
        let v: Vec<f64> = (0..b * p * n)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = Var::from_tensor(&Tensor::from_vec(v, (b, p, n), &Device::Cpu).unwrap()).unwrap();
        let mut oh = vec![0.0f64; b * p * n];
        let mut valid = vec![0.0f64; b * p];
        for i in 0..b * p {
            if rng.random_bool(0.5) {
                valid[i] = 1.0;
                oh[i * n + rng.random_range(0..n)] = 1.0;
            }
        }
        let one_hot = Tensor::from_vec(oh, (b, p, n), &Device::Cpu).unwrap();
        let valid_t = Tensor::from_vec(valid.clone(), (b, p), &Device::Cpu).unwrap();
        let l_diff = Tensor::new(0.5f64, &Device::Cpu).unwrap();
        let objectives = [
            routing_loss(logits.as_tensor(), &one_hot, &valid_t, &l_diff, 1.0)
                .unwrap()
                .total,
            routing_objective(LossVariant::Mse, logits.as_tensor(), &one_hot, &valid_t)
                .unwrap()
                .unwrap(),
        ];
        for obj in objectives {
            let grads = obj.backward().unwrap();
            let g: Vec<f64> = grads
                .get(logits.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            for (i, ok) in valid.iter().enumerate() {
                if *ok == 0.0 {
                    leaks += g[i * n..(i + 1) * n].iter().filter(|x| **x != 0.0).count();
                }
            }
        }
    }
    leaks
}

/// Draws where `L_route` with `lambda = 0` is not bitwise `L_diff`, at f32
/// and f64.
pub fn lambda_zero_mismatches(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for draw in 0..200 {
        let dtype = if draw % 2 == 0 { DType::F32 } else { DType::F64 };
        let (b, p, n) = (2, 6, 2);
        let v: Vec<f64> = (0..b * p * n)
            .map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = Tensor::from_vec(v, (b, p, n), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        let mut oh = vec![0.0f64; b * p * n];
        for i in 0..b * p {
            oh[i * n + rng.random_range(0..n)] = 1.0;
        }
        let one_hot = Tensor::from_vec(oh, (b, p, n), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        let valid = Tensor::ones((b, p), dtype, &Device::Cpu).unwrap();
        let raw: f64 = rng.random_range(0.0..4.0);
        let l_diff = Tensor::new(raw, &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        let total = routing_loss(&logits, &one_hot, &valid, &l_diff, 0.0).unwrap().total;
        let same = match dtype {
            DType::F32 => total.to_scalar::<f32>().unwrap().to_bits() == l_diff.to_scalar::<f32>().unwrap().to_bits(),
            _ => total.to_scalar::<f64>().unwrap().to_bits() == l_diff.to_scalar::<f64>().unwrap().to_bits(),
        };
        if !same {
            bad += 1;
        }
    }
    bad
}
