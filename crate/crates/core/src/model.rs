//! The full conditioned denoiser: backbone, projector and router wired
//! together through the backbone's injection hook.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{CodecConfig, Dit, DitConfig, InjectionHook};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::projector::{ProjectedIdentity, Projector, QFormerConfig};
use crate::router::{assign_ids, gather_weighted, inject_residual, route_logits, RouterNetwork, RoutingMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dit: DitConfig,
    pub projector: QFormerConfig,
    pub codec: CodecConfig,
    pub router_hidden: usize,
    pub alpha_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dit: DitConfig::default(),
            projector: QFormerConfig::default(),
            codec: CodecConfig::default(),
            router_hidden: 64,
            alpha_m: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        self.projector.validate()?;
        if self.projector.channel_width != self.dit.width {
            return Err(Error::Config(format!(
                "projector width {} != backbone width {}",
                self.projector.channel_width, self.dit.width
            )));
        }
        if self.projector.num_injection_layers != self.dit.depth {
            return Err(Error::Config(format!(
                "{} injection layers for a {}-block backbone",
                self.projector.num_injection_layers, self.dit.depth
            )));
        }
        if self.router_hidden == 0 || !self.alpha_m.is_finite() {
            return Err(Error::Config("router hidden width or alpha_m invalid".into()));
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of identity sets: each recognition scale is
/// `(B, N, tokens_s, F)` and the semantic features `(B, N, tokens, F)`.
#[derive(Debug, Clone)]
pub struct IdentityFeatures {
    pub scales: Vec<Tensor>,
    pub semantic: Tensor,
}

/// How each position picks its identity.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Router argmax everywhere.
    Router,
    /// Fixed `(B, P, N)` selection weights; all-zero rows inject nothing.
    Teacher(&'a Tensor),
}

/// Projected identities for the injection layers, each `(B, N, L, C)`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityInput<'a> {
    pub latents: &'a [Tensor],
    pub routing: Routing<'a>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    /// Router logits `(B, P, N)` per injection layer (router routing only).
    pub logits: Vec<Tensor>,
    pub maps: Vec<RoutingMap>,
    pub injected_layers: Vec<usize>,
}

struct Injector<'a> {
    projector: &'a Projector,
    router: &'a RouterNetwork,
    input: IdentityInput<'a>,
    logits: Vec<Tensor>,
    maps: Vec<RoutingMap>,
    layers: Vec<usize>,
}

impl InjectionHook for Injector<'_> {
    fn inject(&mut self, layer: usize, h: &Tensor) -> Result<Tensor> {
        let z = self.input.latents.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            count: self.input.latents.len(),
        })?;
        let (b, n, l, c) = z.dims4()?;
        let (_, p, _) = h.dims3()?;
        let queries = h.unsqueeze(1)?.broadcast_as((b, n, p, c))?.reshape((b * n, p, c))?;
        let ctx = self
            .projector
            .context(layer, &queries, &z.reshape((b * n, l, c))?)?
            .reshape((b, n, p, c))?;
        let weights = match self.input.routing {
            Routing::Teacher(w) => w.clone(),
            Routing::Router => {
                let tokens = self.projector.aggregator.aggregate(z)?;
                let logits = route_logits(h, &tokens, self.router)?;
                let map = assign_ids(&logits)?;
                let w = map.one_hot(h.dtype(), h.device())?;
                self.logits.push(logits);
                self.maps.push(map);
                w
            }
        };
        self.layers.push(layer);
        inject_residual(h, &gather_weighted(&weights, &ctx)?, self.router.alpha_m)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dit: Dit,
    pub projector: Projector,
    pub router: RouterNetwork,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, lora_stages: &[&str]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dit: Dit::new(store, cfg.dit, lora_stages)?,
            projector: Projector::new(store, cfg.projector)?,
            router: RouterNetwork::new(store, cfg.dit.width, cfg.router_hidden, cfg.alpha_m)?,
        })
    }

    /// Per-layer `(B, N, L, C)` latents for a batch of identity sets.
    pub fn project(&self, feats: &IdentityFeatures) -> Result<Vec<Tensor>> {
        let (b, n, ts, fw) = feats.semantic.dims4()?;
        let flat = |x: &Tensor| -> Result<Tensor> {
            let (xb, xn, xt, xf) = x.dims4()?;
            if (xb, xn, xf) != (b, n, fw) {
                return Err(Error::ShapeMismatch(format!(
                    "identity features {:?} vs semantic {:?}",
                    x.dims(),
                    feats.semantic.dims()
                )));
            }
            Ok(x.reshape((b * n, xt, xf))?)
        };
        let scales = feats.scales.iter().map(flat).collect::<Result<Vec<_>>>()?;
        let semantic = feats.semantic.reshape((b * n, ts, fw))?;
        let projected = self.projector.project(&scales, &semantic, 0)?;
        projected
            .per_layer
            .iter()
            .map(|z| {
                let (_, l, c) = z.dims3()?;
                Ok(z.reshape((b, n, l, c))?)
            })
            .collect()
    }

    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        text: &Tensor,
        global: Option<&Tensor>,
        identities: Option<IdentityInput<'_>>,
    ) -> Result<ForwardOutput> {
        match identities {
            None => Ok(ForwardOutput {
                eps: self.dit.forward(x, ts, text, global, None)?,
                logits: vec![],
                maps: vec![],
                injected_layers: vec![],
            }),
            Some(input) => {
                let mut hook = Injector {
                    projector: &self.projector,
                    router: &self.router,
                    input,
                    logits: vec![],
                    maps: vec![],
                    layers: vec![],
                };
                let eps = self.dit.forward(x, ts, text, global, Some(&mut hook))?;
                Ok(ForwardOutput {
                    eps,
                    logits: hook.logits,
                    maps: hook.maps,
                    injected_layers: hook.layers,
                })
            }
        }
    }
}

/// Stacks per-identity projections, each `(B, L, C)` per layer, into the
/// `(B, N, L, C)` per-layer layout [`Model::forward`] consumes.
pub fn stack_identities(ids: &[ProjectedIdentity]) -> Result<Vec<Tensor>> {
    let first = ids.first().ok_or(Error::EmptyInput("identities"))?;
    (0..first.per_layer.len())
        .map(|l| {
            let parts: Vec<&Tensor> = ids.iter().map(|p| &p.per_layer[l]).collect();
            Ok(Tensor::stack(&parts, 1)?)
        })
        .collect()
}

/// Trainable variables by name for the given groups.
pub fn vars_in_groups<'a>(store: &'a ParamStore, groups: &[&str]) -> Vec<(&'a String, &'a Var)> {
    store
        .iter()
        .filter(|(name, _)| groups.contains(&crate::nn::group_of(name)))
        .collect()
}
