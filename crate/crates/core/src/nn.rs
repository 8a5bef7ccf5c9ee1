//! Small neural-network toolkit on top of `candle`: seeded parameter creation,
//! the handful of layers the models need, and parameter bookkeeping
//! (fingerprints, snapshots).
//!
//! Parameter initialization never goes through candle's global RNG, so every
//! model is a deterministic function of its seed.

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn tensor_from_f64(data: Vec<f64>, dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_from_f32(data: Vec<f32>, dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattens a tensor of any rank into `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}

/// Creates named parameters inside a [`VarMap`] from a private seeded RNG.
pub struct ParamStore {
    map: VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            map: VarMap::new(),
            rng: rng_from_seed(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        let t = tensor_from_f64(data, dims, self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let data = self.map.data();
        let mut guard = data.lock().expect("varmap lock poisoned");
        if guard.insert(name.to_string(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, data, dims)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.insert(name, vec![value; n], dims)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        self.constant(name, dims, 0.0)
    }

    pub fn into_varmap(self) -> VarMap {
        self.map
    }
}

/// Anything that owns trainable parameters.
pub trait Parameterized {
    fn varmap(&self) -> &VarMap;

    fn fingerprint(&self) -> Result<String> {
        fingerprint(self.varmap())
    }

    fn parameter_count(&self) -> usize {
        sorted_vars(self.varmap())
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

pub fn sorted_vars(map: &VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().expect("varmap lock poisoned");
    let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// SHA-256 over parameter names, shapes and values, in name order.
pub fn fingerprint(map: &VarMap) -> Result<String> {
    let mut h = Sha256::new();
    for (name, var) in sorted_vars(map) {
        h.update(name.as_bytes());
        for d in var.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in to_f64_vec(var.as_tensor())? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub type Snapshot = Vec<(String, Tensor)>;

pub fn snapshot(map: &VarMap) -> Result<Snapshot> {
    sorted_vars(map)
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
        .collect()
}

pub fn restore(map: &VarMap, snap: &Snapshot) -> Result<()> {
    let data = map.data().lock().expect("varmap lock poisoned");
    for (name, t) in snap {
        let var = data
            .get(name)
            .ok_or_else(|| Error::Contract(format!("snapshot parameter `{name}` missing")))?;
        var.set(t)?;
    }
    Ok(())
}

/// Sets every parameter to zero. Used for hand-computable test fixtures.
pub fn zero_all(map: &VarMap) -> Result<()> {
    for (_, var) in sorted_vars(map) {
        var.set(&var.as_tensor().zeros_like()?)?;
    }
    Ok(())
}

pub fn set_param(map: &VarMap, name: &str, value: &Tensor) -> Result<()> {
    let data = map.data().lock().expect("varmap lock poisoned");
    let var = data
        .get(name)
        .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
    var.set(&value.to_dtype(var.dtype())?)?;
    Ok(())
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Validation(format!(
            "mse shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform fan-in initialization, zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let b = ps.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

fn same_padding(kernel: usize, dilation: usize) -> Result<usize> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel size {kernel} must be odd for length-preserving convolution"
        )));
    }
    Ok(dilation * (kernel - 1) / 2)
}

/// Stride-1 convolution `(B, Cin, L) * (Cout, Cin, K) -> (B, Cout, L + 2p - d(K-1))`
/// built from shifted slices and one matmul. candle's native `conv1d` returns
/// wrong kernel gradients on CPU, so every convolution goes through here.
pub fn conv1d_unfold(x: &Tensor, weight: &Tensor, padding: usize, dilation: usize) -> Result<Tensor> {
    let (b, cin, len) = x.dims3()?;
    let (cout, wcin, k) = weight.dims3()?;
    if wcin != cin {
        return Err(Error::Validation(format!("convolution expects {wcin} input channels, got {cin}")));
    }
    let padded = if padding > 0 { x.pad_with_zeros(2, padding, padding)? } else { x.clone() };
    let span = dilation * (k - 1);
    if len + 2 * padding <= span {
        return Err(Error::Validation(format!("input length {len} shorter than the dilated kernel")));
    }
    let out_len = len + 2 * padding - span;
    let taps: Vec<Tensor> = (0..k)
        .map(|j| padded.narrow(2, j * dilation, out_len))
        .collect::<candle_core::Result<_>>()?;
    let cols = Tensor::stack(&taps, 2)?.reshape((b, cin * k, out_len))?;
    let w = weight.reshape((1, cout, cin * k))?;
    Ok(w.broadcast_matmul(&cols)?)
}

/// Length-preserving 1-D convolution over `(batch, channels, length)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    dilation: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let padding = same_padding(kernel, dilation)?;
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel], bound)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[out_ch])?;
        Ok(Self {
            weight,
            bias,
            padding,
            dilation,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv1d_unfold(x, &self.weight, self.padding, self.dilation)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Stride-1 transposed convolution computed as a convolution with the
/// flipped, in/out-swapped kernel. `weight` uses the transposed layout
/// `(in, out, kernel)`.
pub fn conv_transpose_same(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let kernel = weight.dims()[2];
    let padding = same_padding(kernel, 1)?;
    let rev: Vec<u32> = (0..kernel as u32).rev().collect();
    let idx = Tensor::new(rev.as_slice(), weight.device())?;
    let flipped = weight
        .contiguous()?
        .index_select(&idx, 2)?
        .transpose(0, 1)?
        .contiguous()?;
    conv1d_unfold(x, &flipped, padding, 1)
}

/// Length-preserving transposed convolution layer.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        same_padding(kernel, 1)?;
        let bound = 1.0 / ((out_ch * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[in_ch, out_ch, kernel], bound)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[out_ch])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose_same(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.zeros(&format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product self-attention over `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// Returns the attended output and the `(batch, heads, tokens, tokens)`
    /// attention weights.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        Ok((self.out.forward(&ctx)?, attn))
    }
}

/// Averaging matrix `(len_in, len_out)` reproducing adaptive average pooling
/// bins: output bin `i` covers `[floor(i*Lin/Lout), ceil((i+1)*Lin/Lout))`.
pub fn adaptive_pool_matrix(len_in: usize, len_out: usize, dtype: DType) -> Result<Tensor> {
    if len_in == 0 || len_out == 0 {
        return Err(Error::Config("adaptive pooling needs non-empty sizes".into()));
    }
    let mut m = vec![0.0f64; len_in * len_out];
    for i in 0..len_out {
        let start = i * len_in / len_out;
        let end = ((i + 1) * len_in).div_ceil(len_out);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[j * len_out + i] = w;
        }
    }
    tensor_from_f64(m, &[len_in, len_out], dtype)
}

/// Sinusoidal embedding of integer diffusion steps, shape `(batch, width)`.
pub fn sinusoidal_embedding(steps: &[usize], width: usize, dtype: DType) -> Result<Tensor> {
    let half = width / 2;
    let mut out = Vec::with_capacity(steps.len() * width);
    for &t in steps {
        let mut row = vec![0.0f64; width];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (t as f64 * freq).sin();
            row[half + i] = (t as f64 * freq).cos();
        }
        out.extend(row);
    }
    tensor_from_f64(out, &[steps.len(), width], dtype)
}

pub fn check_finite(t: &Tensor, layer: usize, name: &str) -> Result<()> {
    if all_finite(t)? {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            name: name.to_string(),
        })
    }
}
