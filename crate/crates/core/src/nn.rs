//! Parameter storage and the transformer building blocks shared by the
//! motion encoder, text encoder and motion decoder.

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Additive logit applied to masked attention keys. Large enough that
/// `exp` underflows to exactly zero in both f32 and f64.
pub const MASKED_LOGIT: f64 = -1e9;

/// Named trainable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i].1)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, var: Var) -> Result<Tensor> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = var.as_tensor().clone();
        self.index.insert(name.clone(), self.vars.len());
        self.vars.push((name, var));
        Ok(t)
    }

    /// Parameters restricted to names starting with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Copies values from `other`, matched by name and shape.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Seeded initializer that registers parameters into a [`ParamStore`].
/// Values are drawn in f32 regardless of the store precision, so an f64
/// model built from the same seed holds exactly the same weights.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the parameter prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'a>) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn register(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, self.store.device())?.to_dtype(self.store.dtype())?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(format!("{}{name}", self.prefix), var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.register(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Per-forward settings: dropout and its random stream.
pub struct Ctx {
    dropout: f32,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    /// Deterministic inference mode.
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f32, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        let (p, Some(rng)) = (self.dropout, self.rng.as_ref()) else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Fails with a diagnostic when `t` holds NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("non-finite values in {what}")));
    }
    Ok(())
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f64; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Uniform fan-in initialization, zero bias.
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Result<Self> {
        init.scoped(name, |init| {
            let bound = 1.0 / (input as f32).sqrt();
            Ok(Self {
                weight: init.uniform("weight", &[input, output], bound)?,
                bias: init.constant("bias", &[output], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let input = *dims.last().expect("linear input has a feature axis");
        let rows = x.elem_count() / input;
        let y = x
            .reshape((rows, input))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out = dims.to_vec();
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                gamma: init.constant("gamma", &[dim], 1.0)?,
                beta: init.constant("beta", &[dim], 0.0)?,
                eps: 1e-5,
            })
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

/// Two affine maps with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                fc1: Linear::new(init, "fc1", input, hidden)?,
                fc2: Linear::new(init, "fc2", hidden, output)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Exact GELU, `x * Phi(x)`, built from `erf` so that its derivative is
/// exact as well (the fused kernel's backward is only accurate to ~1e-7).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let phi = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok((phi * x)?.affine(0.5, 0.0)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        init.scoped(name, |init| {
            Ok(Self {
                q: Linear::new(init, "q", dim, dim)?,
                k: Linear::new(init, "k", dim, dim)?,
                v: Linear::new(init, "v", dim, dim)?,
                out: Linear::new(init, "out", dim, dim)?,
                heads,
            })
        })
    }

    /// `x`: `[N, L, D]`; `key_mask`: optional `[N, L]` with 1 for valid keys.
    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        let (n, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((n, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        if let Some(mask) = key_mask {
            let bias = ((mask - 1.0)? * -MASKED_LOGIT)?.reshape((n, 1, 1, l))?;
            scores = scores.broadcast_add(&bias)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, l, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl TransformerLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_width: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                ln1: LayerNorm::new(init, "ln1", dim)?,
                attn: MultiHeadAttention::new(init, "attn", dim, heads)?,
                ln2: LayerNorm::new(init, "ln2", dim)?,
                ffn: Mlp::new(init, "ffn", dim, ffn_width, dim)?,
            })
        })
    }

    /// `x`: `[N, L, D]`. Masked positions are excluded as attention keys and
    /// zeroed in the output.
    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let h = self.attn.forward(&self.ln1.forward(x)?, key_mask)?;
        let x = (x + ctx.dropout(&h)?)?;
        let h = self.ffn.forward(&self.ln2.forward(&x)?)?;
        let mut x = (x + ctx.dropout(&h)?)?;
        if let Some(mask) = key_mask {
            x = x.broadcast_mul(&mask.unsqueeze(2)?)?;
        }
        ensure_finite(&x, "transformer layer output")?;
        Ok(x)
    }
}
