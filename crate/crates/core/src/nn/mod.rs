//! Layers and parameter storage shared by the pre-editor and the codec.

pub mod flops;
pub mod kernels;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};
use kernels::{ConvGeometry, DepthwiseConv3x3, Im2Col, Upsample2x};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv/linear layers.
    FanIn(usize),
    /// Scaled identity for a square matrix (last two dims).
    Identity(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter registry.
///
/// Cloning is cheap; [`ParamStore::pp`] returns a view that prefixes every
/// name, so a model tree maps onto dotted names like `codec.g_enc.0.conv.weight`.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self { prefix, ..self.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Creates (or returns the existing) parameter `name` with the given shape.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().expect("parameter store poisoned");
        if let Some(v) = inner.vars.get(&full) {
            if v.dims() != shape {
                return Err(Error::Dimension(format!(
                    "parameter {full} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let rng = &mut inner.rng;
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
                .collect::<Vec<f64>>(),
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            Init::Identity(v) => {
                let side = *shape.last().unwrap_or(&1);
                (0..n).map(|i| if i % side == (i / side) % side { v } else { 0.0 }).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// All variables whose name starts with `prefix` (empty prefix: all).
    pub fn vars(&self, prefix: &str) -> Vec<Var> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Name-sorted snapshot of every variable.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.vars(prefix).iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites an existing variable in place; shapes must agree.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        let var = inner
            .vars
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }
}

/// Reads a scalar tensor of any float dtype as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// `softplus(x) = max(x, 0) + ln(1 + exp(-|x|))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// `(B, 4C, H, W) -> (B, C, 2H, 2W)`.
pub fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!("pixel shuffle needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    // (b, c, 2, 2, h, w) -> (b, c, h, 2, w, 2); the two permutes stay within
    // candle's rank-6 limit for `permute`.
    let t = x.reshape((b * c, 2, 2, h, w))?.permute((0, 3, 1, 4, 2))?;
    Ok(t.contiguous()?.reshape((b, c, 2 * h, 2 * w))?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

pub fn max_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d(2)?)
}

/// 2D convolution with square kernels, lowered to im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &ParamStore,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.get(&[out_channels, in_channels, kernel, kernel], "weight", Init::FanIn(fan_in))?;
        let bias = store.get(&[out_channels], "bias", Init::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let g = ConvGeometry {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let (ho, wo) = (g.out_height(), g.out_width());
        let k = c * self.kernel * self.kernel;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.contiguous()?.reshape((b, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col(g))?
        };
        // candle's batched matmul mishandles stride-0 batch operands, so the
        // weight is materialized per batch entry.
        let wm = self
            .weight
            .reshape((1, self.out_channels, k))?
            .broadcast_as((b, self.out_channels, k))?
            .contiguous()?;
        let mut y = wm.matmul(&cols)?.reshape((b, self.out_channels, ho, wo))?;
        if let Some(bias) = &self.bias {
            y = channel_shift(&y, bias)?;
        }
        flops::record((2 * k * self.out_channels * ho * wo * b) as u64);
        Ok(y)
    }
}

/// Depthwise 3x3 convolution (one filter per channel, stride 1).
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
    channels: usize,
}

impl DepthwiseConv {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        let weight = store.get(&[channels, 1, 3, 3], "weight", Init::FanIn(9))?;
        let bias = store.get(&[channels], "bias", Init::FanIn(9))?;
        Ok(Self { weight, bias, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!("depthwise conv expects {} channels, got {c}", self.channels)));
        }
        let y = x.contiguous()?.apply_op2(&self.weight, DepthwiseConv3x3)?;
        flops::record((2 * 9 * c * h * w * b) as u64);
        channel_shift(&y, &self.bias)
    }
}

/// Fully connected layer on the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(store: &ParamStore, in_features: usize, out_features: usize) -> Result<Self> {
        Self::with_init(store, in_features, out_features, Init::FanIn(in_features), Init::FanIn(in_features))
    }

    pub fn with_init(
        store: &ParamStore,
        in_features: usize,
        out_features: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = store.get(&[out_features, in_features], "weight", weight_init)?;
        let bias = store.get(&[out_features], "bias", bias_init)?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    /// `x (N, in) -> (N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        flops::record((2 * self.in_features * self.out_features * n) as u64);
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the channel axis at every spatial position.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&[channels], "gamma", Init::Const(1.0))?,
            beta: store.get(&[channels], "beta", Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = x.contiguous()?.apply_op1(kernels::ChannelNorm { eps: self.eps })?;
        channel_shift(&channel_scale(&normed, &self.gamma)?, &self.beta)
    }
}

/// `x * s` for a `(B, C, H, W)` map and `s` of shape `(C)` or `(B, C)`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&s.contiguous()?, kernels::PlaneScale)?)
}

/// `x + t` for a `(B, C, H, W)` map and `t` of shape `(C)` or `(B, C)`.
pub fn channel_shift(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&t.contiguous()?, kernels::PlaneShift)?)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(kernels::Gelu)?)
}

/// Clamps to `[0, 1]` in the forward pass; the backward pass is the
/// identity, so saturated pixels still receive gradient.
pub fn clamp_unit(x: &Tensor) -> Result<Tensor> {
    let clamped = x.clamp(0.0, 1.0)?;
    Ok((x + (clamped - x)?.detach())?)
}

/// Rescales the gradients of `vars` so their joint L2 norm is at most
/// `max_norm`, and returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn clamp_unit_clamps_values_but_passes_gradient() {
        let x = Var::from_vec(vec![-0.5f64, 0.25, 1.5, 0.0, 1.0], 5, &Device::Cpu).unwrap();
        let y = clamp_unit(x.as_tensor()).unwrap();
        assert_eq!(values(&y), vec![0.0, 0.25, 1.0, 0.0, 1.0]);
        let weights = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0, 5.0], &Device::Cpu).unwrap();
        let grads = (y * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(values(grads.get(x.as_tensor()).unwrap()), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn clip_grad_norm_rescales_only_above_the_limit() {
        let a = Var::from_vec(vec![1.0f64, 2.0], 2, &Device::Cpu).unwrap();
        let b = Var::from_vec(vec![3.0f64], 1, &Device::Cpu).unwrap();
        // d/da = 2a = (2, 4), d/db = 4b = 12: norm sqrt(4 + 16 + 144) = sqrt(164).
        let loss = |a: &Var, b: &Var| {
            (a.as_tensor().sqr().unwrap().sum_all().unwrap() + (b.as_tensor().sqr().unwrap() * 2.0).unwrap().sum_all().unwrap())
                .unwrap()
        };
        let vars = [a.clone(), b.clone()];
        let mut grads = loss(&a, &b).backward().unwrap();
        let norm = clip_grad_norm(&mut grads, &vars, 2.0).unwrap();
        assert!((norm - 164f64.sqrt()).abs() < 1e-12);
        let s = 2.0 / 164f64.sqrt();
        let ga = values(grads.get(a.as_tensor()).unwrap());
        let gb = values(grads.get(b.as_tensor()).unwrap());
        for (got, want) in ga.iter().chain(&gb).zip([2.0 * s, 4.0 * s, 12.0 * s]) {
            assert!((got - want).abs() < 1e-12);
        }

        let mut grads = loss(&a, &b).backward().unwrap();
        assert!((clip_grad_norm(&mut grads, &vars, 100.0).unwrap() - 164f64.sqrt()).abs() < 1e-12);
        assert_eq!(values(grads.get(b.as_tensor()).unwrap()), vec![12.0]);
    }

    #[test]
    fn clip_grad_norm_rejects_non_finite_gradients() {
        let a = Var::from_vec(vec![0.0f64], 1, &Device::Cpu).unwrap();
        let mut grads = a.as_tensor().sqrt().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(matches!(clip_grad_norm(&mut grads, &[a], 1.0), Err(Error::Numeric(_))));
    }
}
