//! Low-rank adapters on the backbone's attention projections.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

/// `W + scaling * B A`, with `A: (rank, in)` and `B: (out, rank)`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    /// Fresh adapter under `name`: `A` small random, `B` zero.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::RankInvalid {
                rank,
                rows: d_out,
                cols: d_in,
            });
        }
        Ok(Self {
            a: store.param(&format!("{name}.A"), &[rank, d_in], Init::FanIn(d_in))?,
            b: store.param(&format!("{name}.B"), &[d_out, rank], Init::Zeros)?,
            scaling: alpha / rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.dim(0).unwrap_or(0)
    }

    fn check(&self, base: &Tensor) -> Result<()> {
        let (out, inp) = base.dims2()?;
        let r = self.rank();
        if r == 0 || r > out.min(inp) || self.a.dims() != [r, inp] || self.b.dims() != [out, r] {
            return Err(Error::RankInvalid {
                rank: r,
                rows: out,
                cols: inp,
            });
        }
        Ok(())
    }

    /// The adapter's additive contribution `scaling * B (A x)` for row
    /// vectors `x (..., in)`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let ax = x.broadcast_matmul(&self.a.t()?)?;
        Ok(ax.broadcast_matmul(&self.b.t()?)?.affine(self.scaling, 0.0)?)
    }
}

/// `base x + scaling B (A x)` for row vectors `x (..., in)` and `base (out, in)`.
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check(base)?;
    Ok((x.broadcast_matmul(&base.t()?)? + adapter.delta(x)?)?)
}

/// `base + scaling B A`.
pub fn lora_merge(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base)?;
    Ok((base + adapter.b.matmul(&adapter.a)?.affine(adapter.scaling, 0.0)?)?)
}

/// A linear layer with any number of stacked adapters kept unmerged, so the
/// base weights stay bit-identical while adapters train.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraLinear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.base.forward(x)?;
        for a in &self.adapters {
            y = (y + a.delta(x)?)?;
        }
        Ok(y)
    }
}
