//! Hard per-position identity routing.
//!
//! Every visual token is scored against every identity's routing token,
//! assigned to the argmax identity, and receives that identity's feature as
//! a scaled residual.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, Mlp, ParamStore};

#[derive(Debug, Clone)]
pub struct RouterNetwork {
    /// Over visual tokens.
    pub f: Mlp,
    /// Over aggregated identity tokens.
    pub g: Mlp,
    pub alpha_m: f64,
}

impl RouterNetwork {
    pub fn new(store: &mut ParamStore, width: usize, hidden: usize, alpha_m: f64) -> Result<Self> {
        if !alpha_m.is_finite() {
            return Err(Error::Config(format!("alpha_m must be finite, got {alpha_m}")));
        }
        Ok(Self {
            f: Mlp::new(store, "router.f", width, hidden, hidden)?,
            g: Mlp::new(store, "router.g", width, hidden, hidden)?,
            alpha_m,
        })
    }
}

/// `(B, P, C)` visual tokens against `(B, N, C)` identity tokens gives
/// `(B, P, N)` logits `f(H_p) . g(token_n)`. Both inputs are layer
/// normalized first, so the logit scale follows neither the residual
/// stream nor the projector's output scale.
pub fn route_logits(h: &Tensor, id_tokens: &Tensor, net: &RouterNetwork) -> Result<Tensor> {
    let (b, _, c) = h.dims3()?;
    let (bt, n, ct) = id_tokens.dims3()?;
    if b != bt || c != ct || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "visual tokens {:?} vs identity tokens {:?}",
            h.dims(),
            id_tokens.dims()
        )));
    }
    let fh = net.f.forward(&layer_norm(h, 1e-5)?)?;
    let gz = net.g.forward(&layer_norm(id_tokens, 1e-5)?)?;
    Ok(fh.matmul(&gz.transpose(1, 2)?.contiguous()?)?)
}

/// Argmax identity per position, `(B, P)` flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMap {
    pub batch: usize,
    pub positions: usize,
    pub n_ids: usize,
    pub indices: Vec<usize>,
}

impl RoutingMap {
    pub fn get(&self, b: usize, p: usize) -> usize {
        self.indices[b * self.positions + p]
    }

    /// One batch element's indices.
    pub fn row(&self, b: usize) -> &[usize] {
        &self.indices[b * self.positions..(b + 1) * self.positions]
    }

    /// `(B, P, N)` one-hot selection weights.
    pub fn one_hot(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let mut w = vec![0f32; self.indices.len() * self.n_ids];
        for (i, &k) in self.indices.iter().enumerate() {
            if k >= self.n_ids {
                return Err(Error::IndexOutOfRange {
                    index: k as i64,
                    count: self.n_ids,
                });
            }
            w[i * self.n_ids + k] = 1.0;
        }
        Ok(Tensor::from_vec(w, (self.batch, self.positions, self.n_ids), device)?.to_dtype(dtype)?)
    }
}

/// Argmax over the identity axis of `(B, P, N)` logits, lowest index on
/// ties. Softmax is monotone, so this equals the argmax of the routing
/// probabilities.
pub fn assign_ids(logits: &Tensor) -> Result<RoutingMap> {
    let (b, p, n) = logits.dims3()?;
    let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let indices = values
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for k in 1..n {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(RoutingMap {
        batch: b,
        positions: p,
        n_ids: n,
        indices,
    })
}

/// Selects per position from `(B, N, P, C)` per-identity features using
/// `(B, P, N)` selection weights. Rows of zeros select nothing.
pub fn gather_weighted(weights: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (b, n, p, c) = features.dims4()?;
    if weights.dims() != [b, p, n] {
        return Err(Error::ShapeMismatch(format!(
            "selection weights {:?} for features {:?}",
            weights.dims(),
            features.dims()
        )));
    }
    let f = features.permute((0, 2, 1, 3))?;
    let w = weights.unsqueeze(3)?.broadcast_as((b, p, n, c))?;
    Ok((f * w)?.sum(2)?)
}

/// `F-bar` at position `p` is the routed identity's feature. Features are
/// either one token per identity, `(B, N, C)`, or one per identity and
/// position, `(B, N, P, C)`. Returns `(B, P, C)`.
pub fn gather_features(map: &RoutingMap, features: &Tensor) -> Result<Tensor> {
    let features = match features.rank() {
        3 => {
            let (b, n, c) = features.dims3()?;
            features
                .unsqueeze(2)?
                .broadcast_as((b, n, map.positions, c))?
                .contiguous()?
        }
        4 => features.clone(),
        _ => return Err(Error::ShapeMismatch(format!("identity features {:?}", features.dims()))),
    };
    let (b, n, p, _) = features.dims4()?;
    if b != map.batch || p != map.positions || n != map.n_ids {
        return Err(Error::ShapeMismatch(format!(
            "map over {}x{} positions / {} ids, features {:?}",
            map.batch,
            map.positions,
            map.n_ids,
            features.dims()
        )));
    }
    let w = map.one_hot(features.dtype(), features.device())?;
    gather_weighted(&w, &features)
}

/// `H + alpha_m * F-bar`.
pub fn inject_residual(h: &Tensor, routed: &Tensor, alpha_m: f64) -> Result<Tensor> {
    if h.dims() != routed.dims() {
        return Err(Error::ShapeMismatch(format!(
            "visual tokens {:?} vs routed features {:?}",
            h.dims(),
            routed.dims()
        )));
    }
    if alpha_m == 0.0 {
        return Ok(h.clone());
    }
    Ok((h + routed.affine(alpha_m, 0.0)?)?)
}

/// Routing probabilities, `(B, P, N)`.
pub fn routing_probs(logits: &Tensor) -> Result<Tensor> {
    crate::nn::softmax_last(logits)
}

/// Maximum routing probability per position; a cheap confidence readout.
pub fn routing_confidence(logits: &Tensor) -> Result<Vec<f64>> {
    crate::nn::to_vec_f64(&routing_probs(logits)?.max(D::Minus1)?)
}
