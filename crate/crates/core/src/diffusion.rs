//! Noise schedule, forward noising, the noise-prediction objective, and a
//! deterministic DDIM sampler with classifier-free guidance.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling steps.
    pub steps: usize,
    pub guidance: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 50,
            guidance: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in `t` from `beta_start` to `beta_end`.
    pub fn linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: {num_train_steps} steps, betas {beta_start}..{beta_end}"
            )));
        }
        let denom = (num_train_steps.max(2) - 1) as f64;
        let betas: Vec<f64> = (0..num_train_steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / denom)
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_train_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, len: self.len() })
    }

    /// Evenly spaced sampling timesteps, descending: `[(n-1)k, ..., k, 0]`
    /// with `k = train_steps / steps`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(format!(
                "{steps} sampling steps for a {}-step schedule",
                self.len()
            )));
        }
        let k = self.len() / steps;
        Ok((0..steps).rev().map(|i| i * k).collect())
    }
}

/// `x_t = sqrt(a) x0 + sqrt(1 - a) eps` with `a = alpha_bar[t]` chosen per
/// batch element (leading axis of `x0`).
pub fn add_noise(x0: &Tensor, eps: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs noise {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch {b}", ts.len())));
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = b;
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &t in ts {
        let a = sched.alpha_bar(t)?;
        sa.push(a.sqrt());
        sn.push((1.0 - a).sqrt());
    }
    let dev = x0.device();
    let sa = Tensor::from_vec(sa, shape.clone(), dev)?.to_dtype(x0.dtype())?;
    let sn = Tensor::from_vec(sn, shape, dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if pred.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs noise {:?}",
            pred.dims(),
            eps.dims()
        )));
    }
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// `eps_u + g (eps_c - eps_u)`, returning the exact operand at `g = 0` or `g = 1`.
pub fn guided_noise(eps_uncond: &Tensor, eps_cond: &Tensor, guidance: f64) -> Result<Tensor> {
    if guidance == 1.0 {
        return Ok(eps_cond.clone());
    }
    if guidance == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(guidance, 0.0)?)?)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
pub fn ddim_step(x: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?;
    let a_prev = match t_prev {
        Some(tp) => sched.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = ((x - eps.affine((1.0 - a).sqrt(), 0.0)?)? / a.sqrt())?;
    Ok((x0.affine(a_prev.sqrt(), 0.0)? + eps.affine((1.0 - a_prev).sqrt(), 0.0)?)?)
}

/// Standard-normal tensor of `shape` from a seeded generator, independent of
/// any global RNG state.
pub fn seeded_normal(shape: &[usize], seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

/// Which prediction the sampler asks the model for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Runs the DDIM loop from `x_start` at the first of `timesteps` down to a
/// clean sample. `model(x, t, branch)` predicts noise; with `guidance`
/// other than 1 both branches are evaluated per step.
pub fn sample_from<F>(
    mut model: F,
    x_start: Tensor,
    timesteps: &[usize],
    guidance: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, Branch) -> Result<Tensor>,
{
    let mut x = x_start;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps_c = model(&x, t, Branch::Conditional)?;
        let eps = if guidance == 1.0 {
            eps_c
        } else {
            let eps_u = model(&x, t, Branch::Unconditional)?;
            guided_noise(&eps_u, &eps_c, guidance)?
        };
        x = ddim_step(&x, &eps, t, timesteps.get(i + 1).copied(), sched)?;
    }
    Ok(x)
}

/// Samples from pure noise of `shape` drawn with `seed`.
pub fn sample<F>(
    model: F,
    shape: &[usize],
    steps: usize,
    guidance: f64,
    seed: u64,
    sched: &NoiseSchedule,
    device: &Device,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, Branch) -> Result<Tensor>,
{
    let ts = sched.sampling_timesteps(steps)?;
    let x = seeded_normal(shape, seed, device)?;
    sample_from(model, x, &ts, guidance, sched)
}
