//! Autodiff gradients against central finite differences at f64.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use multiid::diffusion::diffusion_loss;
use multiid::nn::ParamStore;
use multiid::projector::{Projector, QFormerConfig};
use multiid::router::{route_logits, RouterNetwork};
use multiid::supervision::routing_loss;

/// Relative error bound for every suite.
pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `loss` with respect to every element of `var`.
fn numeric_grad(var: &Var, loss: &dyn Fn() -> f64) -> Vec<f64> {
    let base = var.as_tensor().copy().unwrap();
    let shape = base.dims().to_vec();
    let x0 = values(&base);
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let eval_at = |delta: f64| {
            let mut x = x0.clone();
            x[i] += delta;
            var.set(&Tensor::from_vec(x, shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            loss()
        };
        let plus = eval_at(STEP);
        let minus = eval_at(-STEP);
        out.push((plus - minus) / (2.0 * STEP));
    }
    var.set(&base).unwrap();
    out
}

/// Worst relative error over the listed variables.
fn check(vars: &[(&str, &Var)], loss_tensor: &dyn Fn() -> Tensor) -> (f64, String) {
    let grads = loss_tensor().backward().unwrap();
    let loss = || loss_tensor().to_scalar::<f64>().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let analytic = grads
            .get(var.as_tensor())
            .map(values)
            .unwrap_or_else(|| vec![0.0; var.as_tensor().elem_count()]);
        let numeric = numeric_grad(var, &loss);
        let err = relative_error(&analytic, &numeric);
        if err >= worst.0 {
            worst = (err, (*name).to_string());
        }
    }
    worst
}

/// Weighted sum used to reduce a tensor output to a scalar.
fn probe(t: &Tensor, weights: &Tensor) -> Tensor {
    (t * weights).unwrap().sum_all().unwrap()
}

/// Routing loss against its logits and the diffusion-loss input.
pub fn routing_loss_suite(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, p, n) = (2, 5, 3);
    let logits = Var::from_tensor(&normal_tensor(&mut rng, &[b, p, n])).unwrap();
    let mut oh = vec![0.0f64; b * p * n];
    let mut valid = vec![0.0f64; b * p];
    for i in 0..b * p {
        if rng.random_bool(0.7) {
            valid[i] = 1.0;
            oh[i * n + rng.random_range(0..n)] = 1.0;
        }
    }
    valid[0] = 1.0;
    oh[0] = 1.0;
    let one_hot = Tensor::from_vec(oh, (b, p, n), &Device::Cpu).unwrap();
    let valid = Tensor::from_vec(valid, (b, p), &Device::Cpu).unwrap();
    let l_diff = Var::from_tensor(&Tensor::new(0.7f64, &Device::Cpu).unwrap()).unwrap();
    check(&[("logits", &logits), ("l_diff", &l_diff)], &|| {
        routing_loss(logits.as_tensor(), &one_hot, &valid, l_diff.as_tensor(), 0.8)
            .unwrap()
            .total
    })
}

/// Mean squared noise-prediction error against the prediction.
pub fn diffusion_loss_suite(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = Var::from_tensor(&normal_tensor(&mut rng, &[2, 3, 2, 2])).unwrap();
    let eps = normal_tensor(&mut rng, &[2, 3, 2, 2]);
    check(&[("pred", &pred)], &|| diffusion_loss(pred.as_tensor(), &eps).unwrap())
}

fn tiny_qformer() -> QFormerConfig {
    QFormerConfig {
        num_latents: 2,
        channel_width: 4,
        num_blocks: 2,
        num_injection_layers: 2,
        heads: 2,
        feature_width: 3,
        num_scales: 2,
    }
}

/// Projector latents, per-layer identity context and routing tokens against
/// every projector parameter and the encoder features.
pub fn projector_suite(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_qformer();
    let mut store = ParamStore::new(DType::F64, seed);
    let projector = Projector::new(&mut store, cfg).unwrap();
    let b = 2;
    let scale0 = Var::from_tensor(&normal_tensor(&mut rng, &[b, 1, cfg.feature_width])).unwrap();
    let scale1 = Var::from_tensor(&normal_tensor(&mut rng, &[b, 2, cfg.feature_width])).unwrap();
    let semantic = Var::from_tensor(&normal_tensor(&mut rng, &[b, 2, cfg.feature_width])).unwrap();
    let visual = normal_tensor(&mut rng, &[b, 3, cfg.channel_width]);
    let w_lat = normal_tensor(&mut rng, &[b, cfg.num_latents, cfg.channel_width]);
    let w_ctx = normal_tensor(&mut rng, &[b, 3, cfg.channel_width]);
    let w_tok = normal_tensor(&mut rng, &[b, cfg.channel_width]);
    let loss = || {
        let p = projector
            .project(
                &[scale0.as_tensor().clone(), scale1.as_tensor().clone()],
                semantic.as_tensor(),
                0,
            )
            .unwrap();
        let mut total = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        for layer in 0..cfg.num_injection_layers {
            let z = &p.per_layer[layer];
            let ctx = projector.context(layer, &visual, z).unwrap();
            let tok = projector.routing_token(&p, layer).unwrap();
            total = (total + probe(z, &w_lat) + probe(&ctx, &w_ctx) + probe(&tok, &w_tok)).unwrap();
        }
        total
    };
    let mut vars: Vec<(&str, &Var)> = store.iter().map(|(n, v)| (n.as_str(), v)).collect();
    vars.extend([("scale0", &scale0), ("scale1", &scale1), ("semantic", &semantic)]);
    check(&vars, &loss)
}

/// Router logits against the router MLPs and both token inputs.
pub fn router_suite(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, p, n, c) = (2, 4, 3, 5);
    let mut store = ParamStore::new(DType::F64, seed);
    let net = RouterNetwork::new(&mut store, c, 6, 1.0).unwrap();
    let h = Var::from_tensor(&normal_tensor(&mut rng, &[b, p, c])).unwrap();
    let tokens = Var::from_tensor(&normal_tensor(&mut rng, &[b, n, c])).unwrap();
    let w = normal_tensor(&mut rng, &[b, p, n]);
    let mut vars: Vec<(&str, &Var)> = store.iter().map(|(n, v)| (n.as_str(), v)).collect();
    vars.extend([("h", &h), ("tokens", &tokens)]);
    check(&vars, &|| {
        probe(&route_logits(h.as_tensor(), tokens.as_tensor(), &net).unwrap(), &w)
    })
}

/// Every suite as `(name, worst relative error, worst variable)`.
pub fn all(seed: u64) -> Vec<(&'static str, f64, String)> {
    let run = |name, (err, var): (f64, String)| (name, err, var);
    vec![
        run("routing_loss", routing_loss_suite(seed)),
        run("diffusion_loss", diffusion_loss_suite(seed + 1)),
        run("projector", projector_suite(seed + 2)),
        run("router", router_suite(seed + 3)),
    ]
}
