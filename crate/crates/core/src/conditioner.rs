//! Compression of variable-length feature sequences into one condition
//! vector, plus the pooling, convolutional and special-token baselines.

use std::fmt;
use std::str::FromStr;

use mvq_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::data::{FeatureSequence, FEATURE_DIM};
use crate::nn::{sinusoidal_positions, Conv1d, Linear, TransformerBlock};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressorKind {
    MemRetr,
    AvgPool(usize),
    Conv1d,
    Transformer,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 6] = [
        CompressorKind::AvgPool(8),
        CompressorKind::AvgPool(32),
        CompressorKind::AvgPool(64),
        CompressorKind::Conv1d,
        CompressorKind::Transformer,
        CompressorKind::MemRetr,
    ];

    /// Row label in the ablation table.
    pub fn label(self) -> String {
        match self {
            CompressorKind::MemRetr => "Mem-Retr".into(),
            CompressorKind::AvgPool(l) => format!("AvgPool-{l}"),
            CompressorKind::Conv1d => "Conv1d".into(),
            CompressorKind::Transformer => "Transformer".into(),
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorKind::MemRetr => f.write_str("mem_retr"),
            CompressorKind::AvgPool(l) => write!(f, "avgpool{l}"),
            CompressorKind::Conv1d => f.write_str("conv1d"),
            CompressorKind::Transformer => f.write_str("transformer"),
        }
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mem_retr" => CompressorKind::MemRetr,
            "avgpool8" => CompressorKind::AvgPool(8),
            "avgpool32" => CompressorKind::AvgPool(32),
            "avgpool64" => CompressorKind::AvgPool(64),
            "conv1d" => CompressorKind::Conv1d,
            "transformer" => CompressorKind::Transformer,
            other => return Err(Error::Config(format!("unknown conditioner.kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionerConfig {
    pub kind: CompressorKind,
    pub memory_tokens: usize,
    pub memory_dim: usize,
    pub cond_dim: usize,
    pub drop_rate: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            kind: CompressorKind::MemRetr,
            memory_tokens: 64,
            memory_dim: 128,
            cond_dim: 128,
            drop_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub y: Vec<f64>,
    pub null_flag: bool,
}

/// Learnable memory tokens with their key and value maps.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    tokens: ParamId,
    key: Linear,
    value: Linear,
    query: Linear,
    heads: usize,
}

impl MemoryBank {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, m: usize, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            tokens: ps.add(format!("{name}.tokens"), Tensor::randn(&[m, d], 1.0, rng)),
            key: Linear::no_bias(ps, &format!("{name}.key"), d, d, rng),
            value: Linear::no_bias(ps, &format!("{name}.value"), d, d, rng),
            query: Linear::new(ps, &format!("{name}.query"), d_in, d, rng),
        }
    }

    /// Queries from `x` (`[rows, d_in]`) attending over the bank.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let tokens = g.param(self.tokens);
        let k = self.key.forward(g, tokens)?;
        let v = self.value.forward(g, tokens)?;
        let q = self.query.forward(g, x)?;
        if self.heads == 1 {
            return Ok(retrieval(g, q, k, v)?.0);
        }
        // each head takes its own weighted sum over a slice of the tokens
        let (rows, m, d) = (g.shape(q)[0], g.shape(k)[0], g.shape(k)[1]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |g: &mut Graph<'_>, x: Var, n: usize| -> Result<Var> {
            let x = g.reshape(x, &[n, h, dh])?;
            Ok(g.permute(x, &[1, 0, 2])?)
        };
        let (q, k, v) = (split(g, q, rows)?, split(g, k, m)?, split(g, v, m)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = g.softmax_lastdim(scores);
        let out = g.batch_matmul(w, v, false)?;
        let out = g.permute(out, &[1, 0, 2])?;
        Ok(g.reshape(out, &[rows, d])?)
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with `d` the key width; returns the output
/// and the attention weights.
pub fn retrieval(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (dq, dk) = (*g.shape(q).last().unwrap(), g.shape(k)[1]);
    if dq != dk || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::Config(format!(
            "retrieval dims: query {:?}, keys {:?}, values {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let kt = g.permute(k, &[1, 0])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let w = g.softmax_lastdim(scores);
    Ok((g.matmul(w, v)?, w))
}

/// Plain-tensor form: `q` is `[T, d]`, `k` is `[M, d]`, `v` is `[M, d_v]`.
pub fn memory_retrieval_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Config("memory retrieval expects matrices".into()));
    }
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, w) = retrieval(&mut g, q, k, v)?;
    Ok((g.value(out).clone(), g.value(w).clone()))
}

#[derive(Debug, Clone)]
enum Body {
    MemRetr {
        bank: MemoryBank,
        score: Linear,
    },
    AvgPool {
        bins: usize,
        proj: Linear,
    },
    Conv {
        convs: Vec<Conv1d>,
    },
    Transformer {
        input: Linear,
        special: ParamId,
        blocks: Vec<TransformerBlock>,
    },
}

/// Adaptive average pooling matrix `[bins, t]`: bin `i` averages frames
/// `floor(i t / bins) .. ceil((i + 1) t / bins)`.
pub fn adaptive_pool_matrix(t: usize, bins: usize) -> Vec<f64> {
    let mut m = vec![0.0; bins * t];
    for i in 0..bins {
        let lo = i * t / bins;
        let hi = ((i + 1) * t).div_ceil(bins).max(lo + 1).min(t);
        let lo = lo.min(hi - 1);
        for j in lo..hi {
            m[i * t + j] = 1.0 / (hi - lo) as f64;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    pub config: ConditionerConfig,
    body: Body,
    head: Linear,
    null: ParamId,
}

const MEMORY_HEADS: usize = 4;

/// Widths that do not split evenly fall back to a single head.
fn memory_heads(d: usize) -> usize {
    if d % MEMORY_HEADS == 0 {
        MEMORY_HEADS
    } else {
        1
    }
}
const CONV_LAYERS: usize = 3;
const TRANSFORMER_LAYERS: usize = 2;
const TRANSFORMER_HEADS: usize = 4;

impl Conditioner {
    pub fn new(ps: &mut ParamStore, name: &str, config: ConditionerConfig, rng: &mut impl Rng) -> Self {
        let dm = config.memory_dim;
        let (body, head_in) = match config.kind {
            CompressorKind::MemRetr => (
                Body::MemRetr {
                    bank: MemoryBank::new(ps, &format!("{name}.mem"), FEATURE_DIM, config.memory_tokens, dm, memory_heads(dm), rng),
                    score: Linear::new(ps, &format!("{name}.frame_score"), dm, 1, rng),
                },
                dm,
            ),
            CompressorKind::AvgPool(bins) => (
                Body::AvgPool {
                    bins,
                    proj: Linear::new(ps, &format!("{name}.pool_proj"), bins * FEATURE_DIM, dm, rng),
                },
                dm,
            ),
            CompressorKind::Conv1d => (
                Body::Conv {
                    convs: (0..CONV_LAYERS)
                        .map(|l| {
                            let c_in = if l == 0 { FEATURE_DIM } else { dm };
                            Conv1d::new(ps, &format!("{name}.conv{l}"), c_in, dm, 4, 2, (1, 1), rng)
                        })
                        .collect(),
                },
                dm,
            ),
            CompressorKind::Transformer => (
                Body::Transformer {
                    input: Linear::new(ps, &format!("{name}.input"), FEATURE_DIM, dm, rng),
                    special: ps.add(format!("{name}.special"), Tensor::randn(&[1, dm], 0.02, rng)),
                    blocks: (0..TRANSFORMER_LAYERS)
                        .map(|l| TransformerBlock::new(ps, &format!("{name}.block{l}"), dm, TRANSFORMER_HEADS, 2 * dm, rng))
                        .collect(),
                },
                dm,
            ),
        };
        let head = Linear::new(ps, &format!("{name}.head"), head_in, config.cond_dim, rng);
        let null = ps.add(format!("{name}.null"), Tensor::randn(&[config.cond_dim], 0.02, rng));
        Self {
            config,
            body,
            head,
            null,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    /// `[B, d_y]` condition rows for a batch of feature sequences.
    pub fn forward(&self, g: &mut Graph<'_>, feats: &[&FeatureSequence]) -> Result<Var> {
        if feats.is_empty() {
            return Err(Error::EmptyInput("feature batch"));
        }
        if feats.iter().any(|f| f.is_empty()) {
            return Err(Error::EmptyInput("feature sequence with T = 0"));
        }
        let pooled = match &self.body {
            Body::MemRetr { bank, score } => self.mem_retr(g, bank, score, feats)?,
            Body::AvgPool { bins, proj } => {
                let rows = feats
                    .iter()
                    .map(|f| {
                        let t = f.len();
                        let pool = g.constant(Tensor::new(vec![*bins, t], adaptive_pool_matrix(t, *bins))?);
                        let x = g.constant(Tensor::new(vec![t, FEATURE_DIM], f.frames.clone())?);
                        let p = g.matmul(pool, x)?;
                        Ok(g.reshape(p, &[1, bins * FEATURE_DIM])?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let flat = g.concat(&rows, 0)?;
                proj.forward(g, flat)?
            }
            Body::Conv { convs } => {
                let rows = feats
                    .iter()
                    .map(|f| {
                        let mut h = g.constant(Tensor::new(vec![1, f.len(), FEATURE_DIM], f.frames.clone())?);
                        for conv in convs {
                            h = conv.forward(g, h)?;
                            h = g.relu(h);
                        }
                        let m = g.mean_axis(h, 1)?;
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&rows, 0)?
            }
            Body::Transformer {
                input,
                special,
                blocks,
            } => {
                let dm = self.config.memory_dim;
                let rows = feats
                    .iter()
                    .map(|f| {
                        let t = f.len();
                        let x = g.constant(Tensor::new(vec![t, FEATURE_DIM], f.frames.clone())?);
                        let h = input.forward(g, x)?;
                        let pe = g.constant(sinusoidal_positions(t, dm));
                        let h = g.add(h, pe)?;
                        let s = g.param(*special);
                        let h = g.concat(&[s, h], 0)?;
                        let mut h = g.reshape(h, &[1, t + 1, dm])?;
                        for b in blocks {
                            h = b.forward(g, h, None)?;
                        }
                        let first = g.slice(h, 1, 0, 1)?;
                        Ok(g.reshape(first, &[1, dm])?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&rows, 0)?
            }
        };
        self.head.forward(g, pooled)
    }

    /// All frames of the batch are stacked along one axis since retrieval
    /// treats rows independently. Pooling is a learned softmax over each
    /// sequence's frames.
    fn mem_retr(&self, g: &mut Graph<'_>, bank: &MemoryBank, score: &Linear, feats: &[&FeatureSequence]) -> Result<Var> {
        let total: usize = feats.iter().map(|f| f.len()).sum();
        let stacked: Vec<f64> = feats.iter().flat_map(|f| f.frames.iter().copied()).collect();
        let x = g.constant(Tensor::new(vec![total, FEATURE_DIM], stacked)?);
        let h = bank.forward(g, x)?;
        let scores = score.forward(g, h)?;
        let mut offset = 0;
        let mut rows = Vec::with_capacity(feats.len());
        for f in feats {
            let t = f.len();
            let s = g.slice(scores, 0, offset, t)?;
            let s = g.reshape(s, &[1, t])?;
            let w = g.softmax_lastdim(s);
            let frames = g.slice(h, 0, offset, t)?;
            rows.push(g.matmul(w, frames)?);
            offset += t;
        }
        Ok(g.concat(&rows, 0)?)
    }

    /// Null rows replace the condition wherever `dropped` is set.
    pub fn apply_drop(&self, g: &mut Graph<'_>, y: Var, dropped: &[bool]) -> Result<Var> {
        let d = self.config.cond_dim;
        if !dropped.iter().any(|&x| x) {
            return Ok(y);
        }
        let keep = Tensor::from_fn(&[dropped.len(), d], |i| if dropped[i / d] { 0.0 } else { 1.0 });
        let drop = Tensor::from_fn(&[dropped.len(), d], |i| if dropped[i / d] { 1.0 } else { 0.0 });
        let (keep, drop) = (g.constant(keep), g.constant(drop));
        let kept = g.mul(y, keep)?;
        let null = g.param(self.null);
        let nulls = g.mul(drop, null)?;
        Ok(g.add(kept, nulls)?)
    }

    /// `[B, d_y]` rows of the learned null embedding.
    pub fn null_rows(&self, g: &mut Graph<'_>, batch: usize) -> Result<Var> {
        let ones = g.constant(Tensor::full(&[batch, self.config.cond_dim], 1.0));
        let null = g.param(self.null);
        Ok(g.mul(ones, null)?)
    }

    pub fn null_condition(&self, ps: &ParamStore) -> ConditionVector {
        ConditionVector {
            y: ps.get(self.null).data().to_vec(),
            null_flag: true,
        }
    }

    pub fn compress(&self, ps: &ParamStore, f: &FeatureSequence) -> Result<ConditionVector> {
        let mut g = Graph::with_params(ps);
        let y = self.forward(&mut g, &[f])?;
        Ok(ConditionVector {
            y: g.value(y).data().to_vec(),
            null_flag: false,
        })
    }
}

/// Per-sample condition drop decisions with probability `p`.
pub fn drop_mask(batch: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..batch).map(|_| rng.gen::<f64>() < p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kinds_parse_round_trip() {
        for k in CompressorKind::ALL {
            assert_eq!(k.to_string().parse::<CompressorKind>().unwrap(), k);
        }
        assert!("avgpool16".parse::<CompressorKind>().is_err());
    }

    #[test]
    fn pool_matrix_rows_are_averages() {
        for (t, bins) in [(40, 8), (41, 8), (10, 32), (400, 64)] {
            let m = adaptive_pool_matrix(t, bins);
            for i in 0..bins {
                let s: f64 = m[i * t..(i + 1) * t].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "t={t} bins={bins} row {i}");
            }
        }
    }

    #[test]
    fn eq1_worked_example() {
        let q = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let k = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let (out, _) = memory_retrieval_attention(&q, &k, &v).unwrap();
        let oracle = 2.0 * 1f64.exp() / (1f64.exp() + (-1f64).exp());
        assert!((out.item() - oracle).abs() < 1e-12);
        assert!((out.item() - 1.76159).abs() < 1e-5);
    }

    #[test]
    fn drop_probability_one_replaces_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(drop_mask(64, 1.0, &mut rng).iter().all(|&d| d));
        assert!(drop_mask(64, 0.0, &mut rng).iter().all(|&d| !d));
    }
}
