//! Recognize-then-generate baseline: a transformer recognizer maps features
//! to discrete instruction tokens, and a text conditioner embeds those
//! tokens into the conditions the shared generators expect.

use mvq_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::data::{FeatureSequence, InstructionSpec, Primitive, FEATURE_DIM, SPEED_RANGE};
use crate::nn::{sinusoidal_positions, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::pipeline::Conditions;
use crate::{Error, Result};

pub const SPEED_BINS: usize = 8;
const CLASSES: usize = 10;
const REPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionTokens {
    pub class: usize,
    pub speed_bin: usize,
    pub reps: usize,
}

impl InstructionTokens {
    pub fn from_spec(spec: &InstructionSpec) -> Self {
        let (lo, hi) = SPEED_RANGE;
        let bin = ((spec.speed - lo) / (hi - lo) * SPEED_BINS as f64).floor() as usize;
        Self {
            class: spec.class.index(),
            speed_bin: bin.min(SPEED_BINS - 1),
            reps: spec.repetitions as usize - 1,
        }
    }

    pub fn class(&self) -> Primitive {
        Primitive::from_index(self.class).expect("class token in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub text_dim: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 4,
            text_dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Recognizer {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    class: Linear,
    speed: Linear,
    reps: Linear,
}

#[derive(Debug, Clone)]
struct TextConditioner {
    class: Embedding,
    speed: Embedding,
    reps: Embedding,
    hidden: Linear,
    masked: Linear,
    residual: Linear,
}

#[derive(Debug, Clone)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub params: ParamStore,
    recognizer: Recognizer,
    text: TextConditioner,
}

impl Cascade {
    /// `masked_dim` and `residual_dim` are the condition widths of the two
    /// generators the text conditioner feeds.
    pub fn new(config: CascadeConfig, masked_dim: usize, residual_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = config.model_dim;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("recognizer dim {d} not divisible by {} heads", config.heads)));
        }
        let mut ps = ParamStore::new();
        let recognizer = Recognizer {
            input: Linear::new(&mut ps, "rec.input", FEATURE_DIM, d, rng),
            blocks: (0..config.layers)
                .map(|l| TransformerBlock::new(&mut ps, &format!("rec.block{l}"), d, config.heads, 2 * d, rng))
                .collect(),
            ln: LayerNorm::new(&mut ps, "rec.ln", d),
            class: Linear::new(&mut ps, "rec.class", d, CLASSES, rng),
            speed: Linear::new(&mut ps, "rec.speed", d, SPEED_BINS, rng),
            reps: Linear::new(&mut ps, "rec.reps", d, REPS, rng),
        };
        let h = config.text_dim;
        let text = TextConditioner {
            class: Embedding::new(&mut ps, "text.class", CLASSES, h, rng),
            speed: Embedding::new(&mut ps, "text.speed", SPEED_BINS, h, rng),
            reps: Embedding::new(&mut ps, "text.reps", REPS, h, rng),
            hidden: Linear::new(&mut ps, "text.hidden", h, h, rng),
            masked: Linear::new(&mut ps, "text.masked", h, masked_dim, rng),
            residual: Linear::new(&mut ps, "text.residual", h, residual_dim, rng),
        };
        Ok(Self {
            config,
            params: ps,
            recognizer,
            text,
        })
    }

    /// `[B, 10 + 8 + 3]` logits (class, speed bin, repetitions).
    fn recognizer_logits(&self, g: &mut Graph<'_>, feats: &[&FeatureSequence]) -> Result<(Var, Var, Var)> {
        let r = &self.recognizer;
        let d = self.config.model_dim;
        let mut pooled = Vec::with_capacity(feats.len());
        for f in feats {
            if f.is_empty() {
                return Err(Error::EmptyInput("feature sequence with T = 0"));
            }
            let t = f.len();
            let x = g.constant(Tensor::new(vec![1, t, FEATURE_DIM], f.frames.clone())?);
            let h = r.input.forward(g, x)?;
            let pe = g.constant(sinusoidal_positions(t, d));
            let mut h = g.add(h, pe)?;
            for b in &r.blocks {
                h = b.forward(g, h, None)?;
            }
            let h = r.ln.forward(g, h)?;
            pooled.push(g.mean_axis(h, 1)?);
        }
        let h = g.concat(&pooled, 0)?;
        Ok((r.class.forward(g, h)?, r.speed.forward(g, h)?, r.reps.forward(g, h)?))
    }

    pub fn recognize(&self, f: &FeatureSequence) -> Result<InstructionTokens> {
        let mut g = Graph::with_params(&self.params);
        let (c, s, r) = self.recognizer_logits(&mut g, &[f])?;
        let top = |v: Var| crate::pipeline::argmax(g.value(v).data());
        Ok(InstructionTokens {
            class: top(c),
            speed_bin: top(s),
            reps: top(r),
        })
    }

    fn text_forward(&self, g: &mut Graph<'_>, tokens: &[InstructionTokens]) -> Result<(Var, Var)> {
        let t = &self.text;
        let pick = |f: fn(&InstructionTokens) -> usize| tokens.iter().map(f).collect::<Vec<_>>();
        let c = t.class.forward(g, &pick(|x| x.class))?;
        let s = t.speed.forward(g, &pick(|x| x.speed_bin))?;
        let r = t.reps.forward(g, &pick(|x| x.reps))?;
        let h = g.add(c, s)?;
        let h = g.add(h, r)?;
        let h = t.hidden.forward(g, h)?;
        let h = g.gelu(h);
        Ok((t.masked.forward(g, h)?, t.residual.forward(g, h)?))
    }

    pub fn embed(&self, tokens: &InstructionTokens) -> Result<Conditions> {
        if tokens.class >= CLASSES || tokens.speed_bin >= SPEED_BINS || tokens.reps >= REPS {
            return Err(Error::OutOfRange {
                field: "instruction token",
                value: format!("{tokens:?}"),
            });
        }
        let mut g = Graph::with_params(&self.params);
        let (m, r) = self.text_forward(&mut g, std::slice::from_ref(tokens))?;
        Ok(Conditions {
            masked: g.value(m).data().to_vec(),
            residual: g.value(r).data().to_vec(),
        })
    }

    /// Cross-entropy over the three instruction heads.
    pub fn recognizer_step(
        &mut self,
        batch: &[(&FeatureSequence, InstructionTokens)],
        opt: &mut Adam,
    ) -> Result<f64> {
        let feats: Vec<&FeatureSequence> = batch.iter().map(|b| b.0).collect();
        let (value, grads) = {
            let mut g = Graph::with_params(&self.params);
            let (c, s, r) = self.recognizer_logits(&mut g, &feats)?;
            let lc = g.cross_entropy(c, &batch.iter().map(|b| Some(b.1.class)).collect::<Vec<_>>())?;
            let ls = g.cross_entropy(s, &batch.iter().map(|b| Some(b.1.speed_bin)).collect::<Vec<_>>())?;
            let lr = g.cross_entropy(r, &batch.iter().map(|b| Some(b.1.reps)).collect::<Vec<_>>())?;
            let loss = g.add(lc, ls)?;
            let loss = g.add(loss, lr)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("recognizer loss {value}"),
                });
            }
            let mut grads = g.backward(loss)?.param_grads(&self.params);
            grads.clip_global_norm(1.0);
            (value, grads)
        };
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Mean squared error against the end-to-end conditions for the same
    /// instructions.
    pub fn text_step(&mut self, batch: &[(InstructionTokens, &Conditions)], opt: &mut Adam) -> Result<f64> {
        let tokens: Vec<InstructionTokens> = batch.iter().map(|b| b.0).collect();
        let (value, grads) = {
            let mut g = Graph::with_params(&self.params);
            let (m, r) = self.text_forward(&mut g, &tokens)?;
            let mut loss = None;
            for (pred, target) in [
                (m, batch.iter().flat_map(|b| b.1.masked.iter().copied()).collect::<Vec<_>>()),
                (r, batch.iter().flat_map(|b| b.1.residual.iter().copied()).collect::<Vec<_>>()),
            ] {
                let target = g.constant(Tensor::new(g.shape(pred).to_vec(), target)?);
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                let term = g.mean(sq);
                loss = Some(match loss {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            let loss = loss.expect("two terms");
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("text conditioner loss {value}"),
                });
            }
            (value, g.backward(loss)?.param_grads(&self.params))
        };
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }
}
