//! Two-stage inference: iterative base-layer decoding with confidence
//! re-masking, then layer-by-layer residual decoding, both guided.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::cascade::Cascade;
use crate::data::{FeatureSequence, MotionSequence};
use crate::rvq::{TokenGrid, Tokenizer};
use crate::transformer::{MaskedTransformer, ResidualTransformer};
use crate::{Error, Result};

/// `cos(pi x / 2)` on `[0, 1]`, with both endpoints exact.
pub fn cosine_mask_ratio(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(x));
    }
    Ok(if x == 1.0 { 0.0 } else { (FRAC_PI_2 * x).cos() })
}

/// Positions re-masked after iteration `l` of `iterations`:
/// `ceil(gamma(l / L) n)`. A tolerance absorbs rounding noise when the
/// product is mathematically an integer.
pub fn remask_count(n: usize, l: usize, iterations: usize) -> usize {
    let ratio = cosine_mask_ratio(l as f64 / iterations as f64).expect("l <= L");
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// `(1 + s) w_c - s w_u`, elementwise.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], s: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Config(format!(
            "guidance logits differ in length: {} vs {}",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(cond.iter().zip(uncond).map(|(c, u)| (1.0 + s) * c - s * u).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSchedule {
    pub iterations: usize,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        Self { iterations: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfgParams {
    pub masked: f64,
    pub residual: f64,
}

impl Default for CfgParams {
    fn default() -> Self {
        Self {
            masked: 4.0,
            residual: 5.0,
        }
    }
}

impl CfgParams {
    pub fn unguided() -> Self {
        Self {
            masked: 0.0,
            residual: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked < 0.0 || self.residual < 0.0 {
            return Err(Error::Config("guidance scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Categorical { temperature: f64 },
    Greedy,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Categorical { temperature: 1.0 }
    }
}

/// Per-iteration record of base decoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub remasked: Vec<usize>,
    /// Token row after each iteration (MASK where re-masked).
    pub rows: Vec<Vec<usize>>,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn pick(logits: &[f64], sampling: Sampling, rng: &mut impl Rng) -> (usize, f64) {
    match sampling {
        Sampling::Greedy => {
            let p = softmax(logits, 1.0);
            let i = argmax(&p);
            (i, p[i])
        }
        Sampling::Categorical { temperature } => {
            let p = softmax(logits, temperature);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return (i, pi);
                }
            }
            let last = p.len() - 1;
            (last, p[last])
        }
    }
}

/// Source of conditional/unconditional logits for base decoding.
pub trait BaseLogits {
    fn vocab(&self) -> usize;
    fn mask_id(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn logits_pair(&self, row: &[usize], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl BaseLogits for MaskedTransformer {
    fn vocab(&self) -> usize {
        self.codebook_size
    }

    fn mask_id(&self) -> usize {
        MaskedTransformer::mask_id(self)
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn logits_pair(&self, row: &[usize], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        MaskedTransformer::logits_pair(self, row, y)
    }
}

/// Starts from an all-MASK row; each iteration samples every masked
/// position, keeps earlier tokens with infinite confidence and re-masks the
/// `ceil(gamma(l / L) n)` least confident positions.
pub fn decode_base(
    model: &impl BaseLogits,
    y: &[f64],
    n: usize,
    sched: DecodeSchedule,
    cfg: CfgParams,
    sampling: Sampling,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, DecodeTrace)> {
    if n == 0 {
        return Err(Error::EmptyInput("token length"));
    }
    if n > model.max_positions() {
        return Err(Error::Length {
            requested: n,
            max: model.max_positions(),
        });
    }
    if sched.iterations == 0 {
        return Err(Error::Config("decode iterations must be positive".into()));
    }
    let (k, mask) = (model.vocab(), model.mask_id());
    let mut row = vec![mask; n];
    let mut trace = DecodeTrace::default();
    for l in 1..=sched.iterations {
        let (wc, wu) = model.logits_pair(&row, y)?;
        let guided = cfg_combine(&wc, &wu, cfg.masked)?;
        let mut confidence = vec![f64::INFINITY; n];
        for p in 0..n {
            if row[p] == mask {
                let (t, c) = pick(&guided[p * k..(p + 1) * k], sampling, rng);
                row[p] = t;
                confidence[p] = c;
            }
        }
        let count = remask_count(n, l, sched.iterations);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
        for &p in &order[..count] {
            row[p] = mask;
        }
        trace.remasked.push(count);
        trace.rows.push(row.clone());
    }
    Ok((row, trace))
}

/// Fills rows `1..=V` by guided argmax given the base row.
pub fn decode_residuals(model: &ResidualTransformer, base: &[usize], y: &[f64], cfg: CfgParams) -> Result<TokenGrid> {
    if base.is_empty() {
        return Err(Error::ComponentMissing("base token row".into()));
    }
    let k = model.codebook_size;
    let mut grid = TokenGrid {
        rows: vec![base.to_vec()],
    };
    for j in 1..=model.depth {
        let (wc, wu) = model.logits_pair(&grid, j, y)?;
        let guided = cfg_combine(&wc, &wu, cfg.residual)?;
        let row = guided.chunks_exact(k).map(argmax).collect();
        grid.rows.push(row);
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub schedule: DecodeSchedule,
    pub cfg: CfgParams,
    pub sampling: Sampling,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            schedule: DecodeSchedule::default(),
            cfg: CfgParams::default(),
            sampling: Sampling::default(),
        }
    }
}

/// The trained components; any may be absent until loaded.
#[derive(Debug, Clone, Default)]
pub struct System {
    pub tokenizer: Option<Tokenizer>,
    pub masked: Option<MaskedTransformer>,
    pub residual: Option<ResidualTransformer>,
    pub cascade: Option<Cascade>,
}

/// Conditions for the two transformers.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub masked: Vec<f64>,
    pub residual: Vec<f64>,
}

impl System {
    fn parts(&self) -> Result<(&Tokenizer, &MaskedTransformer, &ResidualTransformer)> {
        let missing = |name: &str| Error::ComponentMissing(name.to_string());
        Ok((
            self.tokenizer.as_ref().ok_or_else(|| missing("rvq"))?,
            self.masked.as_ref().ok_or_else(|| missing("masked"))?,
            self.residual.as_ref().ok_or_else(|| missing("residual"))?,
        ))
    }

    pub fn conditions(&self, f: &FeatureSequence) -> Result<Conditions> {
        let (_, masked, residual) = self.parts()?;
        Ok(Conditions {
            masked: masked.conditioner.compress(&masked.params, f)?.y,
            residual: residual.conditioner.compress(&residual.params, f)?.y,
        })
    }

    /// Decodes `n` tokens under the given conditions into `n * ratio` frames.
    pub fn generate_from(
        &self,
        cond: &Conditions,
        n: usize,
        opts: &GenerateOptions,
        rng: &mut impl Rng,
    ) -> Result<(MotionSequence, TokenGrid)> {
        let (tokenizer, masked, residual) = self.parts()?;
        opts.cfg.validate()?;
        let (base, _) = decode_base(masked, &cond.masked, n, opts.schedule, opts.cfg, opts.sampling, rng)?;
        let grid = decode_residuals(residual, &base, &cond.residual, opts.cfg)?;
        Ok((tokenizer.decode(&grid)?, grid))
    }

    pub fn generate(
        &self,
        f: &FeatureSequence,
        n: usize,
        opts: &GenerateOptions,
        rng: &mut impl Rng,
    ) -> Result<MotionSequence> {
        let cond = self.conditions(f)?;
        Ok(self.generate_from(&cond, n, opts, rng)?.0)
    }

    /// Recognize instruction tokens, embed them, then decode identically.
    pub fn generate_cascaded(
        &self,
        f: &FeatureSequence,
        n: usize,
        opts: &GenerateOptions,
        rng: &mut impl Rng,
    ) -> Result<MotionSequence> {
        self.parts()?;
        let cascade = self
            .cascade
            .as_ref()
            .ok_or_else(|| Error::ComponentMissing("recognizer".into()))?;
        let tokens = cascade.recognize(f)?;
        let cond = cascade.embed(&tokens)?;
        Ok(self.generate_from(&cond, n, opts, rng)?.0)
    }

    pub fn ratio(&self) -> Result<usize> {
        Ok(self.parts()?.0.ratio())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_mask_ratio(0.0).unwrap(), 1.0);
        assert_eq!(cosine_mask_ratio(1.0).unwrap(), 0.0);
        assert!(matches!(cosine_mask_ratio(1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn remask_counts_for_ten_tokens() {
        let counts: Vec<usize> = (1..=5).map(|l| remask_count(10, l, 5)).collect();
        assert_eq!(counts, vec![10, 9, 6, 4, 0]);
        // cos(pi/3) = 0.5 exactly in reals
        assert_eq!(remask_count(10, 2, 3), 5);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
