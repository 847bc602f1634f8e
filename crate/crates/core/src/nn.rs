//! Parameter registry and the small set of layers shared by the language
//! stand-in, the vision encoder and the token decoder.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Embedding, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors.
///
/// Every parameter is initialised from its own RNG stream derived from the
/// store seed and the parameter name, so initial values do not depend on
/// construction order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Initial value distribution.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
    Normal(f64),
    Const(f64),
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
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

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Registers a new parameter and returns a tensor sharing its storage.
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name:?} registered twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let w = self.tensor(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in))?;
        let b = self.tensor(&format!("{name}.bias"), &[d_out], Init::FanIn(d_in))?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Conv2d> {
        let fan_in = c_in * k * k;
        let w = self.tensor(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::FanIn(fan_in))?;
        let b = self.tensor(&format!("{name}.bias"), &[c_out], Init::FanIn(fan_in))?;
        let cfg = Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    /// Kernel = stride = `k`, no padding.
    pub fn conv_transpose2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<ConvTranspose2d> {
        let fan_in = c_out * k * k;
        let w = self.tensor(&format!("{name}.weight"), &[c_in, c_out, k, k], Init::FanIn(fan_in))?;
        let b = self.tensor(&format!("{name}.bias"), &[c_out], Init::FanIn(fan_in))?;
        let cfg = ConvTranspose2dConfig {
            stride: k,
            ..Default::default()
        };
        Ok(ConvTranspose2d::new(w, Some(b), cfg))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.tensor(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            bias: self.tensor(&format!("{name}.bias"), &[dim], Init::Const(0.0))?,
        })
    }

    pub fn embedding(&mut self, name: &str, n: usize, dim: usize, std: f64) -> Result<Embedding> {
        let t = self.tensor(&format!("{name}.weight"), &[n, dim], Init::Normal(std))?;
        Ok(Embedding::new(t, dim))
    }

    /// Copies of the current values keyed by name. Copies, because
    /// optimizer updates overwrite variable storage in place.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameter values in place; every parameter must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Layer normalisation over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Softmax with the max shift detached.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Log-softmax over `dim` with the max shift detached.
pub fn log_softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: p.linear(&format!("{name}.q"), dim, dim)?,
            k: p.linear(&format!("{name}.k"), dim, dim)?,
            v: p.linear(&format!("{name}.v"), dim, dim)?,
            out: p.linear(&format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// `query`: (B, nq, d); `key`, `value`: (B, nk, d). `mask` is added to the
    /// (nq, nk) score matrix when given.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        self.out.forward(&ctx)
    }
}

/// Two-layer GELU feedforward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(p: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: p.linear(&format!("{name}.fc1"), d_in, hidden)?,
            fc2: p.linear(&format!("{name}.fc2"), hidden, d_out)?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Row-stochastic `out × inp` matrix of 1-D bilinear interpolation weights
/// using half-pixel centres (`align_corners = false`) with edge clamping.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Tanh-approximated GELU built from primitive ops. The fused candle op
/// differentiates with constants rounded to six digits, which is visible in
/// float64 gradient checks.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = ((x + (x.powf(3.0)? * 0.044_715)?)? * K)?;
    ((inner.tanh()? + 1.0)? * 0.5)?.mul(x)
}

/// Bilinear resize of a (B, C, h, w) tensor to (B, C, out_h, out_w), written as
/// two matrix products so that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let aw_t = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let cols = flat.broadcast_matmul(&aw_t)?; // (bc, h, out_w)
    let rows = ah.broadcast_matmul(&cols)?; // (bc, out_h, out_w)
    rows.reshape((b, c, out_h, out_w))
}

/// 2×2 max pooling with stride 2 on a (B, C, h, w) tensor.
pub fn max_pool_2x2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)
}

/// Fixed 2-D sinusoidal encoding of an `h × w` grid, shape (h·w, dim), row-major.
/// The first half of the channels encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0.0f64; h * w * dim];
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            let py = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            let px = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            for i in 0..half {
                let (vy, vx) = (py / freq(i), px / freq(i));
                row[i] = if i % 2 == 0 { vy.sin() } else { vy.cos() };
                row[half + i] = if i % 2 == 0 { vx.sin() } else { vx.cos() };
            }
        }
    }
    Tensor::from_vec(data, (h * w, dim), device)?.to_dtype(dtype)
}

/// Upper-triangular additive mask for causal self-attention, shape (n, n).
pub fn causal_mask(n: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let data: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| if j > i { -1e9 } else { 0.0 })).collect();
    Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)
}
