//! Parameter storage and the handful of layers the models are built from.
//!
//! Parameters are initialised from an explicit ChaCha stream rather than the
//! backend's global RNG so that two runs with the same seed build bit-identical
//! models.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::seed::Rng;
use crate::{Error, Result};

/// Named, ordered set of trainable tensors.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Variables whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, var)| (name.clone(), var.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.with_prefix("")
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Snapshot of every parameter as an (f32-convertible) tensor copy.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), var.as_tensor().detach()))
            .collect()
    }

    /// Overwrite parameters in place. Every stored parameter must be present
    /// with a matching shape.
    pub fn load(&self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = named
                .get(name)
                .ok_or_else(|| Error::ShapeError(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::ShapeError(format!(
                    "parameter `{name}`: expected {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copy the parameters under `src_prefix` of `other` into the parameters
    /// under `dst_prefix` of `self`.
    pub fn copy_prefix_from(&self, dst_prefix: &str, other: &ParamStore, src_prefix: &str) -> Result<()> {
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(dst_prefix)) {
            let src_name = format!("{src_prefix}{}", &name[dst_prefix.len()..]);
            let src = other
                .get(&src_name)
                .ok_or_else(|| Error::ShapeError(format!("missing source parameter `{src_name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::ShapeError(format!("cannot copy `{src_name}` into `{name}`")));
            }
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and little-endian f32 values.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Scoped constructor for parameters: `pb.sub("down1").sub("conv")`.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.from_values(name, shape, values)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.from_values(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n])
    }

    fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let dtype = self.store.dtype;
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }
}

/// Fully connected layer; the weight is stored as (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[in_dim, out_dim], bound)?,
            bias: Some(pb.uniform("bias", &[out_dim], bound)?),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[in_dim, out_dim], bound)?,
            bias: None,
        })
    }

    /// Zero-initialised; used for residual output projections.
    pub fn zeros(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[in_dim, out_dim], 0.0)?,
            bias: Some(pb.constant("bias", &[out_dim], 0.0)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight)?,
            _ => x.broadcast_matmul(&self.weight)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?,
            bias: pb.uniform("bias", &[out_ch], bound)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn zeros(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[out_ch, in_ch, kernel, kernel], 0.0)?,
            bias: pb.constant("bias", &[out_ch], 0.0)?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[channels], 1.0)?,
            bias: pb.constant("bias", &[channels], 0.0)?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((n, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Largest of 8, 4, 2, 1 that divides `channels` and leaves at least two
/// channels per group.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[dim], 1.0)?,
            bias: pb.constant("bias", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

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

/// Mean cross-entropy of row-wise logits against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), logits.device())?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Scaled dot-product attention. `bias`, when given, is added to the logits
/// (shape broadcastable to (B, Lq, Lk)).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / d.sqrt())?;
    let logits = match bias {
        Some(b) => logits.broadcast_add(b)?,
        None => logits,
    };
    Ok(softmax_last(&logits)?.matmul(v)?)
}

/// Nearest-neighbour 2x upsampling built from broadcast + reshape so the
/// backward pass stays a plain reduction.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Sinusoidal embedding of integer timesteps, shape (B, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t as f64 * freq).cos());
        }
        for _ in 2 * half..dim {
            values.push(0.0);
        }
    }
    Ok(Tensor::from_vec(values, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = seed::rng(3);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            Linear::new(&mut pb.sub("fc"), 4, 3).unwrap();
            Conv2d::new(&mut pb.sub("conv"), 3, 5, 3, 1).unwrap();
            store.content_hash().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [-5., 0., 5.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], vec![1., 1., 2., 2.]);
        assert_eq!(rows[3], vec![3., 3., 4., 4.]);
    }

    #[test]
    fn norm_groups_divides() {
        for c in [2, 4, 6, 8, 12, 16, 32, 64, 128] {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
        }
    }
}
