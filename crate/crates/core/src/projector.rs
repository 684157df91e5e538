//! Multi-scale Q-former projector.
//!
//! Each identity's local features are projected to the backbone width, a set
//! of learnable latents cross-attends into them (one key/value sequence per
//! recognition scale, coarse scales serving the early injection layers), and
//! at injection layer `i` the backbone's visual tokens query those latents
//! through that layer's own `W_q`, `W_k`, `W_v`. A single learned weight
//! vector folds the latents into the identity's routing token.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub num_latents: usize,
    pub channel_width: usize,
    /// Latent-to-feature cross-attention blocks.
    pub num_blocks: usize,
    pub num_injection_layers: usize,
    pub heads: usize,
    /// Width of the raw encoder features.
    pub feature_width: usize,
    /// Number of recognition scales.
    pub num_scales: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_latents: 4,
            channel_width: 64,
            num_blocks: 2,
            num_injection_layers: 8,
            heads: 1,
            feature_width: 16,
            num_scales: 2,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.num_latents,
            self.channel_width,
            self.num_blocks,
            self.num_injection_layers,
            self.heads,
            self.feature_width,
            self.num_scales,
        ];
        if fields.contains(&0) || !self.channel_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("invalid projector config {self:?}")));
        }
        Ok(())
    }

    /// Recognition scale feeding injection layer `layer`: layers are split
    /// evenly across scales, coarse first.
    pub fn scale_of_layer(&self, layer: usize) -> usize {
        (layer * self.num_scales / self.num_injection_layers).min(self.num_scales - 1)
    }
}

/// `W_q`, `W_k`, `W_v` applied on the right: `Q = X W_q`.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub heads: usize,
}

impl CrossAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            wq: store.param(&format!("{name}.Wq"), &[d_query, width], Init::FanIn(d_query))?,
            wk: store.param(&format!("{name}.Wk"), &[d_kv, width], Init::FanIn(d_kv))?,
            wv: store.param(&format!("{name}.Wv"), &[d_kv, width], Init::FanIn(d_kv))?,
            heads,
        })
    }

    pub fn head_width(&self) -> usize {
        self.wq.dim(1).unwrap_or(0) / self.heads.max(1)
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_width() as f64).sqrt()
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, p, d) = x.dims3()?;
    Ok(x.reshape((b, p, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Scaled dot-product attention over `(B, P, d)` tensors. Returns the output
/// `(B, Pq, dv)` and the attention weights `(B, heads, Pq, Pk)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Result<(Tensor, Tensor)> {
    let (b, pq, _) = q.dims3()?;
    let dv = v.dim(2)?;
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let scores = (qh.matmul(&kh.t()?)? * scale)?;
    let weights = softmax_last(&scores)?;
    let out = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, pq, dv))?;
    Ok((out, weights))
}

fn as_batched(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dims = x.dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::ShapeMismatch(format!("token matrix expected, got {dims:?}")));
    }
    let (p, c) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let lead = dims[..dims.len() - 2].to_vec();
    let b = lead.iter().product::<usize>();
    Ok((x.reshape((b, p, c))?, lead))
}

/// `softmax(X_q W_q (X_kv W_k)^T * scale) X_kv W_v` over token matrices
/// with identical leading (batch) dimensions.
pub fn cross_attention_with_weights(
    queries: &Tensor,
    keys_values: &Tensor,
    block: &CrossAttentionBlock,
) -> Result<(Tensor, Tensor)> {
    let (q, lead) = as_batched(queries)?;
    let (kv, lead_kv) = as_batched(keys_values)?;
    if lead != lead_kv {
        return Err(Error::ShapeMismatch(format!(
            "query batch {lead:?} vs key/value batch {lead_kv:?}"
        )));
    }
    if q.dim(2)? != block.wq.dim(0)? || kv.dim(2)? != block.wk.dim(0)? {
        return Err(Error::ShapeMismatch(format!(
            "query width {} / key width {} vs projections {:?} / {:?}",
            q.dim(2)?,
            kv.dim(2)?,
            block.wq.dims(),
            block.wk.dims()
        )));
    }
    let qp = q.broadcast_matmul(&block.wq)?;
    let kp = kv.broadcast_matmul(&block.wk)?;
    let vp = kv.broadcast_matmul(&block.wv)?;
    let (out, w) = attend(&qp, &kp, &vp, block.heads, block.scale())?;
    let mut shape = lead.clone();
    shape.extend_from_slice(&out.dims()[1..]);
    Ok((out.reshape(shape)?, w))
}

pub fn cross_attention(queries: &Tensor, keys_values: &Tensor, block: &CrossAttentionBlock) -> Result<Tensor> {
    Ok(cross_attention_with_weights(queries, keys_values, block)?.0)
}

/// Folds the Q-former latents into one routing token.
#[derive(Debug, Clone)]
pub struct RoutingTokenAggregator {
    /// `(num_latents,)`.
    pub w_aggr: Tensor,
}

impl RoutingTokenAggregator {
    /// `(..., L, C) -> (..., C)`.
    pub fn aggregate(&self, latents: &Tensor) -> Result<Tensor> {
        let l = self.w_aggr.dim(0)?;
        if latents.dim(D::Minus2)? != l {
            return Err(Error::ShapeMismatch(format!(
                "{} latents, aggregator over {l}",
                latents.dim(D::Minus2)?
            )));
        }
        let w = self.w_aggr.reshape((1, l))?;
        Ok(w.broadcast_matmul(latents)?.squeeze(D::Minus2)?)
    }
}

/// Q-former outputs for one identity (or a batch of them), one entry per
/// injection layer, each `(..., num_latents, channel_width)`.
#[derive(Debug, Clone)]
pub struct ProjectedIdentity {
    pub per_layer: Vec<Tensor>,
    pub identity_index: usize,
}

pub fn aggregate_token(projected: &ProjectedIdentity, layer: usize, aggr: &RoutingTokenAggregator) -> Result<Tensor> {
    let z = projected.per_layer.get(layer).ok_or(Error::LayerOutOfRange {
        layer,
        count: projected.per_layer.len(),
    })?;
    aggr.aggregate(z)
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub cfg: QFormerConfig,
    /// Encoder-to-backbone projection per recognition scale.
    pub extractor_scales: Vec<Linear>,
    pub extractor_semantic: Linear,
    /// `(num_latents, channel_width)`.
    pub latents: Tensor,
    pub qformer: Vec<CrossAttentionBlock>,
    /// Per injection layer: visual tokens query the identity latents.
    pub blocks: Vec<CrossAttentionBlock>,
    pub aggregator: RoutingTokenAggregator,
}

impl Projector {
    pub fn new(store: &mut ParamStore, cfg: QFormerConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channel_width;
        let extractor_scales = (0..cfg.num_scales)
            .map(|s| Linear::new(store, &format!("projector.extractor.scale{s}"), cfg.feature_width, c))
            .collect::<Result<Vec<_>>>()?;
        let extractor_semantic = Linear::new(store, "projector.extractor.semantic", cfg.feature_width, c)?;
        let latents = store.param("projector.latents", &[cfg.num_latents, c], Init::Normal(1.0))?;
        let qformer = (0..cfg.num_blocks)
            .map(|b| CrossAttentionBlock::new(store, &format!("projector.qformer{b}"), c, c, c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..cfg.num_injection_layers)
            .map(|i| CrossAttentionBlock::new(store, &format!("projector.block{i}"), c, c, c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let w_aggr = store.param(
            "projector.W_aggr",
            &[cfg.num_latents],
            Init::Const(1.0 / cfg.num_latents as f64),
        )?;
        Ok(Self {
            cfg,
            extractor_scales,
            extractor_semantic,
            latents,
            qformer,
            blocks,
            aggregator: RoutingTokenAggregator { w_aggr },
        })
    }

    /// Key/value sequence per recognition scale: that scale's tokens followed
    /// by the semantic tokens, projected to the channel width. Inputs are
    /// `(B, tokens, feature_width)`.
    pub fn features(&self, scales: &[Tensor], semantic: &Tensor) -> Result<Vec<Tensor>> {
        if scales.len() != self.cfg.num_scales {
            return Err(Error::ShapeMismatch(format!(
                "{} recognition scales, projector built for {}",
                scales.len(),
                self.cfg.num_scales
            )));
        }
        let sem = self.extractor_semantic.forward(semantic)?;
        scales
            .iter()
            .zip(&self.extractor_scales)
            .map(|(x, proj)| Ok(Tensor::cat(&[&proj.forward(x)?, &sem], 1)?))
            .collect()
    }

    /// Q-former over one key/value sequence `(B, tokens, C)`: the latents
    /// attend into the features, later blocks refine residually.
    pub fn qformer_latents(&self, features: &Tensor) -> Result<Tensor> {
        let b = features.dim(0)?;
        let (l, c) = self.latents.dims2()?;
        let mut z = self.latents.unsqueeze(0)?.broadcast_as((b, l, c))?.contiguous()?;
        for (i, block) in self.qformer.iter().enumerate() {
            let update = cross_attention(&z, features, block)?;
            z = if i == 0 { update } else { (z + update)? };
        }
        Ok(z)
    }

    /// Latents for every injection layer.
    pub fn project(&self, scales: &[Tensor], semantic: &Tensor, identity_index: usize) -> Result<ProjectedIdentity> {
        let per_scale = self
            .features(scales, semantic)?
            .iter()
            .map(|f| self.qformer_latents(f))
            .collect::<Result<Vec<_>>>()?;
        let per_layer = (0..self.cfg.num_injection_layers)
            .map(|i| per_scale[self.cfg.scale_of_layer(i)].clone())
            .collect();
        Ok(ProjectedIdentity {
            per_layer,
            identity_index,
        })
    }

    /// Layer-`layer` identity context: visual tokens `(B, P, C)` query the
    /// identity latents `(B, L, C)`.
    pub fn context(&self, layer: usize, visual: &Tensor, latents: &Tensor) -> Result<Tensor> {
        let block = self.blocks.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            count: self.blocks.len(),
        })?;
        cross_attention(visual, latents, block)
    }

    pub fn routing_token(&self, projected: &ProjectedIdentity, layer: usize) -> Result<Tensor> {
        aggregate_token(projected, layer, &self.aggregator)
    }
}

/// Runs the projector for one identity against a known list of per-layer
/// visual tokens, returning the latents and each layer's identity context.
pub fn project_identity(
    projector: &Projector,
    scales: &[Tensor],
    semantic: &Tensor,
    visual_tokens_per_layer: &[Tensor],
    identity_index: usize,
) -> Result<(ProjectedIdentity, Vec<Tensor>)> {
    if visual_tokens_per_layer.len() != projector.cfg.num_injection_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} visual token sets for {} injection layers",
            visual_tokens_per_layer.len(),
            projector.cfg.num_injection_layers
        )));
    }
    let projected = projector.project(scales, semantic, identity_index)?;
    let contexts = visual_tokens_per_layer
        .iter()
        .enumerate()
        .map(|(i, h)| projector.context(i, h, &projected.per_layer[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((projected, contexts))
}
