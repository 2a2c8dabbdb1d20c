//! Layers shared by the tokenizer, conditioners and transformers.

use mvq_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(ps, name, d_in, d_out, (1.0 / d_in as f64).sqrt(), rng)
    }

    pub fn with_std(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng));
        let bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng),
        );
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: ps.add(format!("{name}.table"), Tensor::randn(&[rows, dim], 0.02, rng)),
            rows,
            dim,
        }
    }

    /// `[indices.len(), dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, indices: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        Ok(g.gather_rows(t, indices)?)
    }
}

/// Edge-replicating padding along the time axis of `[B, T, C]`.
pub fn pad_replicate(g: &mut Graph<'_>, x: Var, left: usize, right: usize) -> Result<Var> {
    if left == 0 && right == 0 {
        return Ok(x);
    }
    let t = g.shape(x)[1];
    let mut parts = Vec::with_capacity(left + right + 1);
    if left > 0 {
        let first = g.slice(x, 1, 0, 1)?;
        parts.extend(std::iter::repeat(first).take(left));
    }
    parts.push(x);
    if right > 0 {
        let last = g.slice(x, 1, t - 1, 1)?;
        parts.extend(std::iter::repeat(last).take(right));
    }
    Ok(g.concat(&parts, 1)?)
}

/// 1-D convolution over `[B, T, C_in]` with replicate padding, so a
/// constant input maps to a constant output.
#[derive(Debug, Clone)]
pub struct Conv1d {
    proj: Linear,
    kernel: usize,
    stride: usize,
    pad: (usize, usize),
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(ps, name, kernel * c_in, c_out, rng),
            kernel,
            stride,
            pad,
        }
    }

    /// Kernel 3, stride 1, length-preserving.
    pub fn same(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, c_in, c_out, 3, 1, (1, 1), rng)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let padded = pad_replicate(g, x, self.pad.0, self.pad.1)?;
        let cols = g.unfold1d(padded, self.kernel, self.stride, 0, 0)?;
        self.proj.forward(g, cols)
    }
}

/// `x + conv(relu(conv(relu(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv1d::same(ps, &format!("{name}.a"), width, width, rng),
            b: Conv1d::same(ps, &format!("{name}.b"), width, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = g.relu(x);
        let h = self.a.forward(g, h)?;
        let h = g.relu(h);
        let h = self.b.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Additive key mask for attention: `0` where the key is valid, a large
/// negative number elsewhere. Shape `[B, heads, T, T]`.
pub fn key_mask(valid: &[Vec<bool>], heads: usize) -> Tensor {
    let b = valid.len();
    let t = valid[0].len();
    let mut data = Vec::with_capacity(b * heads * t * t);
    for row in valid {
        for _ in 0..heads * t {
            data.extend(row.iter().map(|&ok| if ok { 0.0 } else { -1e9 }));
        }
    }
    Tensor::new(vec![b, heads, t, t], data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0, "model dim must be divisible by heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    fn split(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        Ok(g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Bidirectional self-attention over `[B, T, D]`; `mask` is the additive
    /// key mask from [`key_mask`].
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Var>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let (q, k, v) = (self.split(g, q)?, self.split(g, k)?, self.split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax_lastdim(scores);
        let out = g.batch_matmul(attn, v, false)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, t, d])?;
        self.o.forward(g, out)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, ffn, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ffn, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}
