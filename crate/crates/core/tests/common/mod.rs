//! Plain-loop f64 reference implementations used as test oracles.

#![allow(dead_code)]

pub mod metric;

use candle_core::{Tensor, Var};
use motext::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    flat(store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).as_tensor())
}

fn set(var: &Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, var.shape(), var.device()).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

/// Overwrites every parameter whose name starts with `prefix` with uniform
/// values in `[-scale, scale]`, so that biases and norms are non-trivial too.
pub fn randomize(store: &ParamStore, prefix: &str, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in store.with_prefix(prefix) {
        let data = (0..v.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
        set(&v, data);
    }
}

pub fn zero(store: &ParamStore, prefix: &str) {
    for (_, v) in store.with_prefix(prefix) {
        set(&v, vec![0.0; v.elem_count()]);
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, &v)| v * w[i * out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let g = param(store, &format!("{prefix}.gamma"));
    let b = param(store, &format!("{prefix}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) / sd * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn mlp(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let h: Rows = linear(store, &format!("{prefix}.fc1"), x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &format!("{prefix}.fc2"), &h)
}

/// Multi-head self-attention over one sequence; `valid[j]` false drops key `j`.
pub fn attention(store: &ParamStore, prefix: &str, x: &Rows, heads: usize, valid: &[bool]) -> Rows {
    let q = linear(store, &format!("{prefix}.q"), x);
    let k = linear(store, &format!("{prefix}.k"), x);
    let v = linear(store, &format!("{prefix}.v"), x);
    let (l, d) = (x.len(), x[0].len());
    let hd = d / heads;
    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let logits: Vec<Option<f64>> = (0..l)
                .map(|j| {
                    valid[j].then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                })
                .collect();
            let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..l).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(store, &format!("{prefix}.out"), &ctx)
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Pre-norm block; with a mask, invalid positions are zeroed on output.
pub fn transformer_layer(store: &ParamStore, prefix: &str, x: &Rows, heads: usize, valid: Option<&[bool]>) -> Rows {
    let all = vec![true; x.len()];
    let keys = valid.unwrap_or(&all);
    let h = attention(store, &format!("{prefix}.attn"), &layer_norm(store, &format!("{prefix}.ln1"), x), heads, keys);
    let x = add(x, &h);
    let h = mlp(store, &format!("{prefix}.ffn"), &layer_norm(store, &format!("{prefix}.ln2"), &x));
    let mut x = add(&x, &h);
    if let Some(valid) = valid {
        for (row, &ok) in x.iter_mut().zip(valid) {
            if !ok {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    x
}

/// Splits a flat `[n, l, d]` buffer into `n` sequences.
pub fn sequences(data: &[f64], n: usize, l: usize, d: usize) -> Vec<Rows> {
    (0..n)
        .map(|s| (0..l).map(|i| data[(s * l + i) * d..(s * l + i + 1) * d].to_vec()).collect())
        .collect()
}

pub fn unflatten(seqs: &[Rows]) -> Vec<f64> {
    seqs.iter().flatten().flatten().copied().collect()
}
