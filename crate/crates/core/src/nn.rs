//! Named trainable parameters and the handful of layers the model is built from.
//!
//! Every parameter lives in a [`ParamStore`] under a dotted name whose prefix
//! names its group (`backbone`, `projector`, `router`, `lora.stage1`,
//! `lora.stage2`). Modules are plain structs holding tensors that share
//! storage with the store's [`Var`]s, so gradients computed from a forward
//! pass can be looked up by name.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Parameter groups, in checkpoint order.
pub const GROUPS: [&str; 5] = ["backbone", "projector", "router", "lora.stage1", "lora.stage2"];

/// Group a dotted parameter name belongs to.
pub fn group_of(name: &str) -> &'static str {
    for g in GROUPS.iter().rev() {
        if name == *g || name.starts_with(&format!("{g}.")) {
            return g;
        }
    }
    "other"
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the named parameter, creating it with `init` if absent.
    ///
    /// Initial values are drawn from the store's own generator, so building
    /// the same modules in the same order always yields the same parameters.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{name}` has shape {:?}, module expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Inserts or overwrites a parameter with the given values.
    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) if v.dims() == value.dims() => v.set(&value)?,
            _ => {
                self.vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn group_names<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.vars.keys().filter(move |k| group_of(k) == group)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn remove_group(&mut self, group: &str) {
        self.vars.retain(|k, _| group_of(k) != group);
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in &self.vars {
            let bad = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .any(|x| !x.is_finite());
            if bad {
                return Err(Error::NonFiniteParams(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in))?;
        let bias = store.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in))?;
        Ok(Self { weight, bias: None })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[d_out, d_in], Init::Zeros)?;
        let bias = store.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Two-layer perceptron with a SiLU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Numerically stable softmax over the last axis. The subtracted row maximum
/// is detached; softmax is shift invariant so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer normalization over the last axis without learned affine terms.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Flattens any tensor to `Vec<f64>`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
