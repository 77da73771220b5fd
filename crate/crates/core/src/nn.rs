//! Parameter storage and the small set of differentiable layers the toy
//! network is assembled from. Activations are channels-last throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five parameter groups of the inflated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The per-frame image U-Net and its caption embedding table.
    Spatial,
    /// Temporal attention layers between spatial blocks.
    Temporal,
    /// Mapping network in front of the U-Net.
    Mapping,
    /// Frame-wise token generator and its cross-attention gates.
    TokenGen,
    /// Projection head on bottleneck features.
    Projection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Spatial,
        ParamGroup::Temporal,
        ParamGroup::Mapping,
        ParamGroup::TokenGen,
        ParamGroup::Projection,
    ];

    /// Groups updated while training the inflated model.
    pub const TRAINABLE: [ParamGroup; 4] = [
        ParamGroup::Temporal,
        ParamGroup::Mapping,
        ParamGroup::TokenGen,
        ParamGroup::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Spatial => "spatial",
            ParamGroup::Temporal => "temporal",
            ParamGroup::Mapping => "mapping",
            ParamGroup::TokenGen => "token_gen",
            ParamGroup::Projection => "projection",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A trainable tensor. When its group is frozen, [`Param::t`] hands out a
/// detached view so no gradient is ever computed for it.
#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

#[derive(Default)]
struct GroupEntry {
    frozen: Arc<AtomicBool>,
    params: BTreeMap<String, Var>,
}

/// Named parameters, organized by [`ParamGroup`].
#[derive(Default)]
pub struct ParamStore {
    groups: BTreeMap<ParamGroup, GroupEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        let mut groups = BTreeMap::new();
        for g in ParamGroup::ALL {
            groups.insert(g, GroupEntry::default());
        }
        Self { groups }
    }

    fn entry(&self, group: ParamGroup) -> &GroupEntry {
        self.groups.get(&group).expect("every group is created in ParamStore::new")
    }

    fn register(&mut self, group: ParamGroup, name: String, value: Tensor) -> Result<Param> {
        let entry = self.groups.get_mut(&group).expect("all groups exist");
        if entry.params.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {group}/{name}")));
        }
        let var = Var::from_tensor(&value)?;
        entry.params.insert(name, var.clone());
        Ok(Param {
            var,
            frozen: entry.frozen.clone(),
        })
    }

    pub fn set_frozen(&self, group: ParamGroup, frozen: bool) {
        self.entry(group).frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.entry(group).frozen.load(Ordering::Relaxed)
    }

    /// Parameters of one group in name order.
    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Var)> {
        self.entry(group).params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.entry(group).params.len()
    }

    pub fn get(&self, group: ParamGroup, name: &str) -> Option<&Var> {
        self.entry(group).params.get(name)
    }

    /// All unfrozen parameters of the listed groups, as `(qualified name, var)`.
    pub fn trainable(&self, groups: &[ParamGroup]) -> Vec<(String, Var)> {
        groups
            .iter()
            .filter(|g| !self.is_frozen(**g))
            .flat_map(|g| {
                self.group(*g)
                    .map(move |(n, v)| (format!("{g}/{n}"), v.clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Overwrites one group's values in place, checking names and shapes.
    pub fn assign_group(&self, group: ParamGroup, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let entry = self.entry(group);
        if entry.params.len() != values.len() {
            return Err(Error::ConfigMismatch(format!(
                "group {group} has {} tensors, source has {}",
                entry.params.len(),
                values.len()
            )));
        }
        for (name, var) in &entry.params {
            let src = values.get(name).ok_or_else(|| {
                Error::ConfigMismatch(format!("tensor {group}/{name} missing from source"))
            })?;
            if src.dims() != var.dims() || src.dtype() != var.dtype() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {group}/{name}: expected {:?} {:?}, got {:?} {:?}",
                    var.dims(),
                    var.dtype(),
                    src.dims(),
                    src.dtype()
                )));
            }
            var.set(src)?;
        }
        Ok(())
    }
}

/// Seeded parameter factory. Every value is drawn from the caller's ChaCha
/// stream, so construction order alone decides the initialization.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    group: ParamGroup,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self {
            store,
            rng,
            dtype,
            group: ParamGroup::Spatial,
            prefix: String::new(),
        }
    }

    pub fn group(&mut self, group: ParamGroup, prefix: &str) -> &mut Self {
        self.group = group;
        self.prefix = prefix.to_string();
        self
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            segment.to_string()
        } else {
            format!("{saved}.{segment}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Param> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let full = self.full_name(name);
        self.store.register(self.group, full, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.make(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.make(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        self.make(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.scoped(name, |ini| {
            let weight = ini.uniform("weight", &[fan_in, fan_out], bound)?;
            let bias = if bias {
                Some(ini.uniform("bias", &[fan_out], bound)?)
            } else {
                None
            };
            Ok(Linear { weight, bias })
        })
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.scoped(name, |ini| {
            let weight = ini.constant("weight", &[fan_in, fan_out], 0.0)?;
            let bias = Some(ini.constant("bias", &[fan_out], 0.0)?);
            Ok(Linear { weight, bias })
        })
    }

    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Conv2d> {
        let linear = self.linear(name, kernel * kernel * c_in, c_out, true)?;
        Ok(Conv2d { linear, kernel })
    }

    pub fn conv3d(&mut self, name: &str, c_in: usize, c_out: usize, zero: bool) -> Result<Conv3d> {
        let fan_in = 27 * c_in;
        let linear = if zero {
            self.zero_linear(name, fan_in, c_out)?
        } else {
            self.linear(name, fan_in, c_out, true)?
        };
        Ok(Conv3d { linear })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        self.scoped(name, |ini| {
            Ok(Norm {
                gamma: ini.constant("gamma", &[channels], 1.0)?,
                beta: ini.constant("beta", &[channels], 0.0)?,
            })
        })
    }
}

/// `x @ W + b` over the last axis. `W` is stored `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let w = self.weight.t();
        let mut y = x.reshape((rows, last))?.matmul(&w)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.t())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Same-padded, stride-1 2-D convolution on `(N, H, W, C)` via im2col.
#[derive(Clone)]
pub struct Conv2d {
    linear: Linear,
    kernel: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 1 {
            return self.linear.forward(x);
        }
        let (_, h, w, _) = x.dims4()?;
        let pad = self.kernel / 2;
        let xp = x.pad_with_zeros(1, pad, pad)?.pad_with_zeros(2, pad, pad)?;
        let mut cols = Vec::with_capacity(self.kernel * self.kernel);
        for dy in 0..self.kernel {
            for dx in 0..self.kernel {
                cols.push(xp.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        let col = Tensor::cat(&cols, 3)?;
        self.linear.forward(&col)
    }
}

/// Same-padded 3x3x3 convolution on `(N, F, H, W, C)` via im2col.
#[derive(Clone)]
pub struct Conv3d {
    linear: Linear,
}

impl Conv3d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f, h, w, _) = x.dims5()?;
        let xp = x
            .pad_with_zeros(1, 1, 1)?
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?;
        let mut cols = Vec::with_capacity(27);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    cols.push(xp.narrow(1, dz, f)?.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
        }
        let col = Tensor::cat(&cols, 4)?;
        self.linear.forward(&col)
    }
}

/// Affine parameters shared by layer and group normalization.
#[derive(Clone)]
pub struct Norm {
    gamma: Param,
    beta: Param,
}

const NORM_EPS: f64 = 1e-5;

impl Norm {
    /// Normalizes over the last axis.
    pub fn layer_norm(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma.t())?.broadcast_add(&self.beta.t())?)
    }

    /// Group normalization of a channels-last `(N, H, W, C)` tensor.
    pub fn group_norm(&self, x: &Tensor, groups: usize) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let g = x.reshape((n, h * w, groups, c / groups))?;
        let mean = g.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let normed = normed.reshape((n, h, w, c))?;
        Ok(normed.broadcast_mul(&self.gamma.t())?.broadcast_add(&self.beta.t())?)
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// `(N, S, heads*d) -> (N, heads, S, d)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, s, c) = x.dims3()?;
    Ok(x.reshape((n, s, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `(N, heads, S, d) -> (N, S, heads*d)`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, s, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, s, h * d))?)
}

/// Sinusoidal embedding table `(len, dim)` for positions `0..len`.
pub fn sinusoidal_table(positions: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            values.push(if i < half { (p * freq).sin() } else { (p * freq).cos() });
        }
    }
    Ok(Tensor::from_vec(values, (positions.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
