//! Video diffusion transformer over patchified latents.
//!
//! Blocks use adaptive layer norm with zero-initialized gates driven by the
//! timestep and text embeddings. After each block's self-attention the
//! token stream passes through an optional injection hook, which is where
//! identity features are routed in.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraLinear};
use crate::error::{Error, Result};
use crate::nn::{layer_norm, Init, Linear, Mlp, ParamStore};
use crate::projector::attend;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch size `(t, h, w)`.
    pub patch: (usize, usize, usize),
    pub latent_channels: usize,
    /// Latent grid `(t, h, w)`.
    pub latent_grid: (usize, usize, usize),
    /// Whether a global-composite latent is channel-concatenated to the input.
    pub global_channels: bool,
    pub text_width: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: (1, 2, 2),
            latent_channels: 12,
            latent_grid: (8, 8, 8),
            global_channels: true,
            text_width: 32,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.latent_grid;
        let (pt, ph, pw) = self.patch;
        if self.depth == 0 || self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("invalid transformer shape {self:?}")));
        }
        if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Config(format!(
                "latent grid {:?} not divisible by patch {:?}",
                self.latent_grid, self.patch
            )));
        }
        Ok(())
    }

    /// Token grid `(t, h, w)`.
    pub fn token_grid(&self) -> (usize, usize, usize) {
        let (t, h, w) = self.latent_grid;
        (t / self.patch.0, h / self.patch.1, w / self.patch.2)
    }

    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.token_grid();
        t * h * w
    }

    pub fn input_channels(&self) -> usize {
        if self.global_channels {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }

    fn patch_volume(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2
    }
}

/// `(B, C, T, H, W) -> (B, P, C*pt*ph*pw)`, positions `(t, h, w)` row-major.
pub fn patchify(x: &Tensor, patch: (usize, usize, usize)) -> Result<Tensor> {
    let (b, c, t, h, w) = x.dims5()?;
    let (pt, ph, pw) = patch;
    if t % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} not divisible by patch {patch:?}",
            x.dims()
        )));
    }
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    Ok(x.reshape(vec![b, c, gt, pt, gh, ph, gw, pw])?
        .permute(vec![0, 2, 4, 6, 1, 3, 5, 7])?
        .contiguous()?
        .reshape((b, gt * gh * gw, c * pt * ph * pw))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Tensor,
    c: usize,
    grid: (usize, usize, usize),
    patch: (usize, usize, usize),
) -> Result<Tensor> {
    let b = tokens.dim(0)?;
    let (gt, gh, gw) = grid;
    let (pt, ph, pw) = patch;
    Ok(tokens
        .reshape(vec![b, gt, gh, gw, c, pt, ph, pw])?
        .permute(vec![0, 4, 1, 5, 2, 6, 3, 7])?
        .contiguous()?
        .reshape((b, c, gt * pt, gh * ph, gw * pw))?)
}

/// Sinusoidal features of integer timesteps, `(B, width)`.
pub fn timestep_features(ts: &[usize], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = width / 2;
    let mut v = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        for i in 0..width {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            v.push(if i < half { a.cos() } else { a.sin() });
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), width), device)?.to_dtype(dtype)?)
}

/// Called after every block's self-attention with the layer index and the
/// token stream `(B, P, C)`; returns the stream to continue with.
pub trait InjectionHook {
    fn inject(&mut self, layer: usize, h: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let hw = q.dim(2)? / self.heads;
        let (out, _) = attend(&q, &k, &v, self.heads, 1.0 / (hw as f64).sqrt())?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: Attention,
    pub mlp: Mlp,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub cfg: DitConfig,
    pub patch_embed: Linear,
    pub pos_emb: Tensor,
    pub time_mlp: Mlp,
    pub text_proj: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_ada: Linear,
    pub final_proj: Linear,
}

impl Dit {
    /// Builds the backbone plus one adapter per attention projection for
    /// each stage name in `lora_stages` (e.g. `["stage1"]`), stacked in order.
    pub fn new(store: &mut ParamStore, cfg: DitConfig, lora_stages: &[&str]) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let patch_in = cfg.input_channels() * cfg.patch_volume();
        let patch_embed = Linear::new(store, "backbone.patch_embed", patch_in, d)?;
        let pos_emb = store.param("backbone.pos_emb", &[cfg.num_tokens(), d], Init::Normal(0.02))?;
        let time_mlp = Mlp::new(store, "backbone.time_mlp", d, d, d)?;
        let text_proj = Linear::new(store, "backbone.text_proj", cfg.text_width, d)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let prefix = format!("backbone.block{i}");
            let ada = Linear::zeros(store, &format!("{prefix}.ada"), d, 6 * d)?;
            let mut proj = |name: &str| -> Result<LoraLinear> {
                let base = Linear::new(store, &format!("{prefix}.attn.{name}"), d, d)?;
                let adapters = lora_stages
                    .iter()
                    .map(|stage| {
                        LoraAdapter::new(
                            store,
                            &format!("lora.{stage}.block{i}.attn.{name}"),
                            d,
                            d,
                            cfg.lora_rank,
                            cfg.lora_alpha,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LoraLinear { base, adapters })
            };
            let attn = Attention {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
                o: proj("o")?,
                heads: cfg.heads,
            };
            let mlp = Mlp::new(store, &format!("{prefix}.mlp"), d, d * cfg.mlp_ratio, d)?;
            blocks.push(DitBlock { ada, attn, mlp });
        }
        let final_ada = Linear::zeros(store, "backbone.final_ada", d, 2 * d)?;
        let out = cfg.latent_channels * cfg.patch_volume();
        let final_proj = Linear::zeros(store, "backbone.final", d, out)?;
        Ok(Self {
            cfg,
            patch_embed,
            pos_emb,
            time_mlp,
            text_proj,
            blocks,
            final_ada,
            final_proj,
        })
    }

    /// Predicted noise for `(B, C, T, H, W)` noisy latents. `global` is the
    /// `(B, C, T, H, W)` conditioning latent, required exactly when the
    /// backbone was built with global channels; `text` is `(B, text_width)`.
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        text: &Tensor,
        global: Option<&Tensor>,
        mut hook: Option<&mut dyn InjectionHook>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, c, t, h, w) = x.dims5()?;
        if c != cfg.latent_channels || (t, h, w) != cfg.latent_grid || ts.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} with {} timesteps; backbone expects {} channels on {:?}",
                x.dims(),
                ts.len(),
                cfg.latent_channels,
                cfg.latent_grid
            )));
        }
        let input = match (cfg.global_channels, global) {
            (true, Some(g)) => {
                if g.dims() != x.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "global latent {:?} vs noisy latent {:?}",
                        g.dims(),
                        x.dims()
                    )));
                }
                Tensor::cat(&[x, g], 1)?
            }
            (false, None) => x.clone(),
            (true, None) => {
                return Err(Error::ShapeMismatch(
                    "backbone has global channels but no global latent was given".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::ShapeMismatch(
                    "backbone has no global channels but a global latent was given".into(),
                ))
            }
        };
        let tokens = patchify(&input, cfg.patch)?;
        let mut hs = self.patch_embed.forward(&tokens)?.broadcast_add(&self.pos_emb)?;

        let tf = timestep_features(ts, cfg.width, x.dtype(), x.device())?;
        let cond = (self.time_mlp.forward(&tf)? + self.text_proj.forward(text)?)?
            .silu()?
            .unsqueeze(1)?;

        let d = cfg.width;
        for (i, block) in self.blocks.iter().enumerate() {
            let m = block.ada.forward(&cond)?;
            let part = |k: usize| m.narrow(2, k * d, d);
            let (sh1, sc1, g1, sh2, sc2, g2) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?, part(5)?);
            let a = block.attn.forward(&modulate(&layer_norm(&hs, 1e-6)?, &sh1, &sc1)?)?;
            hs = (hs + a.broadcast_mul(&g1)?)?;
            if let Some(hook) = hook.as_deref_mut() {
                hs = hook.inject(i, &hs)?;
            }
            let f = block.mlp.forward(&modulate(&layer_norm(&hs, 1e-6)?, &sh2, &sc2)?)?;
            hs = (hs + f.broadcast_mul(&g2)?)?;
        }
        let m = self.final_ada.forward(&cond)?;
        let (shift, scale) = (m.narrow(2, 0, d)?, m.narrow(2, d, d)?);
        let out = self
            .final_proj
            .forward(&modulate(&layer_norm(&hs, 1e-6)?, &shift, &scale)?)?;
        unpatchify(&out, cfg.latent_channels, cfg.token_grid(), cfg.patch)
    }
}
