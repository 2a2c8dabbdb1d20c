//! Bidirectional token transformers: the masked model over base-layer
//! tokens and the residual model over layers `1..=V`. Both prepend the
//! condition vector as one extra sequence slot.

use std::f64::consts::FRAC_PI_2;

use mvq_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::conditioner::{drop_mask, Conditioner, ConditionerConfig};
use crate::data::FeatureSequence;
use crate::nn::{key_mask, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::rvq::TokenGrid;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Token slots, not counting the condition slot.
    pub max_positions: usize,
    pub drop_rate: f64,
    pub grad_clip: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            model_dim: 128,
            ffn_dim: 256,
            max_positions: 64,
            drop_rate: 0.2,
            grad_clip: 1.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate {} outside [0, 1]", self.drop_rate)));
        }
        Ok(())
    }
}

/// Fraction of positions masked for a training sequence, `cos(pi u / 2)`.
pub fn mask_fraction(u: f64) -> f64 {
    (FRAC_PI_2 * u).cos()
}

/// Training mask for `u`: `round(cos(pi u / 2) n)` positions, at least one.
pub fn sample_mask_at(n: usize, u: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((mask_fraction(u) * n as f64).round() as usize).clamp(1, n);
    let mut mask = vec![false; n];
    for i in sample_indices(rng, n, count) {
        mask[i] = true;
    }
    mask
}

pub fn sample_mask(n: usize, rng: &mut impl Rng) -> Vec<bool> {
    let u = rng.gen::<f64>();
    sample_mask_at(n, u, rng)
}

/// Positional table, condition projection, blocks and final norm shared by
/// both models.
#[derive(Debug, Clone)]
struct Trunk {
    pos: Embedding,
    cond_proj: Linear,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    cfg: TransformerConfig,
}

impl Trunk {
    fn new(ps: &mut ParamStore, cfg: &TransformerConfig, cond_dim: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            pos: Embedding::new(ps, "pos", cfg.max_positions + 1, d, rng),
            cond_proj: Linear::new(ps, "cond_proj", cond_dim, d, rng),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(ps, &format!("block{l}"), d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            ln_f: LayerNorm::new(ps, "ln_f", d),
            cfg: cfg.clone(),
        }
    }

    /// `x` is `[B, n, D]` token inputs, `y` is `[B, d_y]`; returns the
    /// `[B, n, D]` hidden states of the token slots.
    fn forward(&self, g: &mut Graph<'_>, x: Var, y: Var, valid: &[Vec<bool>]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        if n > self.cfg.max_positions {
            return Err(Error::Length {
                requested: n,
                max: self.cfg.max_positions,
            });
        }
        let slots: Vec<usize> = (0..=n).collect();
        let pos = self.pos.forward(g, &slots)?;
        let pos_cond = g.slice(pos, 0, 0, 1)?;
        let pos_cond = g.reshape(pos_cond, &[d])?;
        let pos_tok = g.slice(pos, 0, 1, n)?;
        let x = g.add(x, pos_tok)?;
        let c = self.cond_proj.forward(g, y)?;
        let c = g.add(c, pos_cond)?;
        let c = g.reshape(c, &[b, 1, d])?;
        let mut h = g.concat(&[c, x], 1)?;
        let mask = if valid.iter().all(|r| r.iter().all(|&v| v)) {
            None
        } else {
            let rows: Vec<Vec<bool>> = valid
                .iter()
                .map(|r| std::iter::once(true).chain(r.iter().copied()).collect())
                .collect();
            Some(g.constant(key_mask(&rows, self.cfg.heads)))
        };
        for block in &self.blocks {
            h = block.forward(g, h, mask)?;
        }
        let h = self.ln_f.forward(g, h)?;
        Ok(g.slice(h, 1, 1, n)?)
    }
}

fn pad_rows(rows: &[&[usize]], pad: usize) -> (Vec<usize>, Vec<Vec<bool>>, usize) {
    let n = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * n);
    let mut valid = Vec::with_capacity(rows.len());
    for r in rows {
        flat.extend_from_slice(r);
        flat.extend(std::iter::repeat(pad).take(n - r.len()));
        valid.push((0..n).map(|i| i < r.len()).collect());
    }
    (flat, valid, n)
}

#[derive(Debug, Clone)]
pub struct MaskedTransformer {
    pub config: TransformerConfig,
    pub params: ParamStore,
    pub conditioner: Conditioner,
    pub codebook_size: usize,
    tokens: Embedding,
    trunk: Trunk,
    head: Linear,
}

impl MaskedTransformer {
    pub fn new(
        config: TransformerConfig,
        cond: ConditionerConfig,
        codebook_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let conditioner = Conditioner::new(&mut ps, "cond", cond, rng);
        let tokens = Embedding::new(&mut ps, "tok", codebook_size + 2, config.model_dim, rng);
        let trunk = Trunk::new(&mut ps, &config, conditioner.cond_dim(), rng);
        let head = Linear::with_std(&mut ps, "head", config.model_dim, codebook_size, 0.02, rng);
        Ok(Self {
            config,
            params: ps,
            conditioner,
            codebook_size,
            tokens,
            trunk,
            head,
        })
    }

    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    pub fn pad_id(&self) -> usize {
        self.codebook_size + 1
    }

    /// `[B, n, k]` logits for token rows (codes, MASK or PAD) under `y`.
    pub fn logits(&self, g: &mut Graph<'_>, rows: &[&[usize]], y: Var) -> Result<Var> {
        let vocab = self.codebook_size + 2;
        for r in rows {
            if let Some((pos, &index)) = r.iter().enumerate().find(|(_, &t)| t >= vocab) {
                return Err(Error::CorruptToken {
                    layer: 0,
                    pos,
                    index,
                    k: vocab,
                });
            }
        }
        let (flat, valid, n) = pad_rows(rows, self.pad_id());
        let b = rows.len();
        let emb = self.tokens.forward(g, &flat)?;
        let x = g.reshape(emb, &[b, n, self.config.model_dim])?;
        let h = self.trunk.forward(g, x, y, &valid)?;
        self.head.forward(g, h)
    }

    /// Conditional and unconditional logits (`n x k` each) for one row.
    pub fn logits_pair(&self, row: &[usize], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::with_params(&self.params);
        let cond = g.constant(Tensor::new(vec![1, y.len()], y.to_vec())?);
        let null = self.conditioner.null_rows(&mut g, 1)?;
        let ys = g.concat(&[cond, null], 0)?;
        let out = self.logits(&mut g, &[row, row], ys)?;
        let data = g.value(out).data();
        let half = data.len() / 2;
        Ok((data[..half].to_vec(), data[half..].to_vec()))
    }

    /// Builds the masked inputs and the cross-entropy targets for a batch.
    pub fn masked_inputs(&self, base: &[&[usize]], masks: &[Vec<bool>]) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
        let n = base.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(base.len());
        let mut targets = Vec::with_capacity(base.len() * n);
        for (row, mask) in base.iter().zip(masks) {
            inputs.push(
                row.iter()
                    .zip(mask)
                    .map(|(&t, &m)| if m { self.mask_id() } else { t })
                    .collect(),
            );
            targets.extend(row.iter().zip(mask).map(|(&t, &m)| m.then_some(t)));
            targets.extend(std::iter::repeat(None).take(n - row.len()));
        }
        (inputs, targets)
    }

    /// Cross-entropy over masked positions for a prepared batch.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        feats: &[&FeatureSequence],
        inputs: &[Vec<usize>],
        targets: &[Option<usize>],
        dropped: &[bool],
    ) -> Result<Var> {
        let y = self.conditioner.forward(g, feats)?;
        let y = self.conditioner.apply_drop(g, y, dropped)?;
        let rows: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.logits(g, &rows, y)?;
        let total = targets.len();
        let flat = g.reshape(logits, &[total, self.codebook_size])?;
        Ok(g.cross_entropy(flat, targets)?)
    }

    /// One Adam update on masked-token cross-entropy.
    pub fn train_step(
        &mut self,
        batch: &[(&FeatureSequence, &[usize])],
        opt: &mut Adam,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let feats: Vec<&FeatureSequence> = batch.iter().map(|b| b.0).collect();
        let base: Vec<&[usize]> = batch.iter().map(|b| b.1).collect();
        let masks: Vec<Vec<bool>> = base.iter().map(|r| sample_mask(r.len(), rng)).collect();
        let (inputs, targets) = self.masked_inputs(&base, &masks);
        let dropped = drop_mask(batch.len(), self.config.drop_rate, rng);
        let (value, grads) = {
            let mut g = Graph::with_params(&self.params);
            let loss = self.loss(&mut g, &feats, &inputs, &targets, &dropped)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("masked loss {value}"),
                });
            }
            let mut grads = g.backward(loss)?.param_grads(&self.params);
            if self.config.grad_clip > 0.0 {
                grads.clip_global_norm(self.config.grad_clip);
            }
            (value, grads)
        };
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualTransformer {
    pub config: TransformerConfig,
    pub params: ParamStore,
    pub conditioner: Conditioner,
    pub codebook_size: usize,
    /// Residual layer count V.
    pub depth: usize,
    layer_tokens: Vec<Embedding>,
    indicator: Embedding,
    trunk: Trunk,
    heads: Vec<Linear>,
}

impl ResidualTransformer {
    pub fn new(
        config: TransformerConfig,
        cond: ConditionerConfig,
        codebook_size: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let d = config.model_dim;
        let conditioner = Conditioner::new(&mut ps, "cond", cond, rng);
        let layer_tokens = (0..depth)
            .map(|j| Embedding::new(&mut ps, &format!("tok{j}"), codebook_size, d, rng))
            .collect();
        let indicator = Embedding::new(&mut ps, "layer", depth + 1, d, rng);
        let trunk = Trunk::new(&mut ps, &config, conditioner.cond_dim(), rng);
        let heads = (1..=depth)
            .map(|j| Linear::with_std(&mut ps, &format!("head{j}"), d, codebook_size, 0.02, rng))
            .collect();
        Ok(Self {
            config,
            params: ps,
            conditioner,
            codebook_size,
            depth,
            layer_tokens,
            indicator,
            trunk,
            heads,
        })
    }

    fn check_layer(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.depth {
            return Err(Error::OutOfRange {
                field: "residual layer",
                value: format!("{j} not in [1, {}]", self.depth),
            });
        }
        Ok(())
    }

    /// `[B, n, k]` logits for layer `j` given each sample's rows `0..j`.
    /// Rows at or beyond `j` are never read.
    pub fn logits(&self, g: &mut Graph<'_>, grids: &[&TokenGrid], j: usize, y: Var) -> Result<Var> {
        self.check_layer(j)?;
        let d = self.config.model_dim;
        let b = grids.len();
        let n = grids.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut sum: Option<Var> = None;
        for layer in 0..j {
            let mut idx = Vec::with_capacity(b * n);
            for grid in grids {
                let row = grid.rows.get(layer).ok_or_else(|| Error::ComponentMissing(format!("token row {layer}")))?;
                if let Some((pos, &index)) = row.iter().enumerate().find(|(_, &t)| t >= self.codebook_size) {
                    return Err(Error::CorruptToken {
                        layer,
                        pos,
                        index,
                        k: self.codebook_size,
                    });
                }
                idx.extend_from_slice(row);
                idx.extend(std::iter::repeat(0).take(n - row.len()));
            }
            let e = self.layer_tokens[layer].forward(g, &idx)?;
            sum = Some(match sum {
                None => e,
                Some(s) => g.add(s, e)?,
            });
        }
        let sum = sum.expect("j >= 1");
        let x = g.reshape(sum, &[b, n, d])?;
        let ind = self.indicator.forward(g, &[j])?;
        let ind = g.reshape(ind, &[d])?;
        let x = g.add(x, ind)?;
        let valid: Vec<Vec<bool>> = grids.iter().map(|t| (0..n).map(|i| i < t.len()).collect()).collect();
        let h = self.trunk.forward(g, x, y, &valid)?;
        self.heads[j - 1].forward(g, h)
    }

    pub fn logits_pair(&self, grid: &TokenGrid, j: usize, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::with_params(&self.params);
        let cond = g.constant(Tensor::new(vec![1, y.len()], y.to_vec())?);
        let null = self.conditioner.null_rows(&mut g, 1)?;
        let ys = g.concat(&[cond, null], 0)?;
        let out = self.logits(&mut g, &[grid, grid], j, ys)?;
        let data = g.value(out).data();
        let half = data.len() / 2;
        Ok((data[..half].to_vec(), data[half..].to_vec()))
    }

    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        feats: &[&FeatureSequence],
        grids: &[&TokenGrid],
        j: usize,
        dropped: &[bool],
    ) -> Result<Var> {
        let y = self.conditioner.forward(g, feats)?;
        let y = self.conditioner.apply_drop(g, y, dropped)?;
        let logits = self.logits(g, grids, j, y)?;
        let n = grids.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(grids.len() * n);
        for grid in grids {
            targets.extend(grid.rows[j].iter().map(|&t| Some(t)));
            targets.extend(std::iter::repeat(None).take(n - grid.len()));
        }
        let flat = g.reshape(logits, &[targets.len(), self.codebook_size])?;
        Ok(g.cross_entropy(flat, &targets)?)
    }

    /// One update for layer `j`.
    pub fn train_step_at(
        &mut self,
        batch: &[(&FeatureSequence, &TokenGrid)],
        j: usize,
        opt: &mut Adam,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        self.check_layer(j)?;
        let feats: Vec<&FeatureSequence> = batch.iter().map(|b| b.0).collect();
        let grids: Vec<&TokenGrid> = batch.iter().map(|b| b.1).collect();
        let dropped = drop_mask(batch.len(), self.config.drop_rate, rng);
        let (value, grads) = {
            let mut g = Graph::with_params(&self.params);
            let loss = self.loss(&mut g, &feats, &grids, j, &dropped)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("residual loss {value} at layer {j}"),
                });
            }
            let mut grads = g.backward(loss)?.param_grads(&self.params);
            if self.config.grad_clip > 0.0 {
                grads.clip_global_norm(self.config.grad_clip);
            }
            (value, grads)
        };
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// One update with `j ~ Uniform{1..V}`; returns `(j, loss)`.
    pub fn train_step(
        &mut self,
        batch: &[(&FeatureSequence, &TokenGrid)],
        opt: &mut Adam,
        rng: &mut impl Rng,
    ) -> Result<(usize, f64)> {
        if self.depth == 0 {
            return Err(Error::Config("residual transformer with V = 0 has nothing to train".into()));
        }
        let j = rng.gen_range(1..=self.depth);
        Ok((j, self.train_step_at(batch, j, opt, rng)?))
    }
}
