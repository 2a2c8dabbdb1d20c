//! Staged training: tokenizer first, then the two token transformers on
//! frozen token grids, plus the evaluator and the cascade baseline.

use mvq_core::cascade::{Cascade, CascadeConfig, InstructionTokens};
use mvq_core::data::{Dataset, FeatureSequence, MotionSequence};
use mvq_core::eval::Evaluator;
use mvq_core::pipeline::Conditions;
use mvq_core::rvq::{component_rng, Normalizer, TokenGrid, Tokenizer};
use mvq_core::transformer::{MaskedTransformer, ResidualTransformer};
use mvq_tensor::{Adam, AdamConfig, LrSchedule};
use rand::seq::index::sample;
use rand::Rng;

use crate::config::Config;
use crate::Result;

/// Rng stream tags, one per stage.
pub mod tags {
    pub const RVQ: u64 = 1;
    pub const MASKED: u64 = 2;
    pub const RESIDUAL: u64 = 3;
    pub const EVALUATOR: u64 = 4;
    pub const RECOGNIZER: u64 = 5;
    pub const TEXT: u64 = 6;
    pub const GENERATE: u64 = 7;
    pub const METRICS: u64 = 8;
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: T,
    pub steps: u64,
    /// Training loss after each step.
    pub curve: Vec<f64>,
}

fn adam(lr: f64, warmup: u64) -> Adam {
    Adam::new(AdamConfig {
        schedule: LrSchedule::new(lr, warmup),
        ..AdamConfig::default()
    })
}

fn batch_indices(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    sample(rng, n, batch.min(n)).into_vec()
}

pub fn train_tokenizer(cfg: &Config, train: &Dataset, steps: usize) -> Result<Trained<Tokenizer>> {
    let mut rng = component_rng(cfg.data.seed, tags::RVQ);
    let mut tok = Tokenizer::new(cfg.rvq_config(), &mut rng)?;
    let motions: Vec<&MotionSequence> = train.samples.iter().map(|s| &s.motion).collect();
    tok.normalizer = Normalizer::fit(motions.iter().copied());
    let r = &cfg.rvq;
    let mut opt = adam(r.lr, r.warmup);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let windows = tok.sample_windows(&motions, r.batch, r.window, &mut rng)?;
        curve.push(tok.train_step(&windows, r.batch, &mut opt, &mut rng)?.total);
    }
    if steps == 0 {
        // seed the codebooks so an untrained checkpoint still tokenizes
        let windows = tok.sample_windows(&motions, r.batch, r.window, &mut rng)?;
        tok.seed_codebooks(&windows, r.batch, &mut rng)?;
    }
    Ok(Trained {
        model: tok,
        steps: steps as u64,
        curve,
    })
}

pub fn tokenize_all(tok: &Tokenizer, ds: &Dataset) -> Result<Vec<TokenGrid>> {
    Ok(ds
        .samples
        .iter()
        .map(|s| tok.tokenize(&s.motion))
        .collect::<mvq_core::Result<_>>()?)
}

pub fn train_masked(cfg: &Config, train: &Dataset, grids: &[TokenGrid], steps: usize) -> Result<Trained<MaskedTransformer>> {
    let mut rng = component_rng(cfg.data.seed, tags::MASKED);
    let s = &cfg.masked;
    let mut model = MaskedTransformer::new(
        cfg.transformer_config(s),
        cfg.conditioner_config()?,
        cfg.rvq.codebook_size,
        &mut rng,
    )?;
    let mut opt = adam(s.lr, s.warmup);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = batch_indices(&mut rng, train.len(), s.batch);
        let batch: Vec<(&FeatureSequence, &[usize])> = idx
            .iter()
            .map(|&i| (&train.samples[i].features, grids[i].rows[0].as_slice()))
            .collect();
        curve.push(model.train_step(&batch, &mut opt, &mut rng)?);
    }
    Ok(Trained {
        model,
        steps: steps as u64,
        curve,
    })
}

pub fn train_residual(
    cfg: &Config,
    train: &Dataset,
    grids: &[TokenGrid],
    steps: usize,
) -> Result<Trained<ResidualTransformer>> {
    let mut rng = component_rng(cfg.data.seed, tags::RESIDUAL);
    let s = &cfg.residual;
    let mut model = ResidualTransformer::new(
        cfg.transformer_config(s),
        cfg.conditioner_config()?,
        cfg.rvq.codebook_size,
        cfg.rvq.layers,
        &mut rng,
    )?;
    let mut opt = adam(s.lr, s.warmup);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = batch_indices(&mut rng, train.len(), s.batch);
        let batch: Vec<(&FeatureSequence, &TokenGrid)> =
            idx.iter().map(|&i| (&train.samples[i].features, &grids[i])).collect();
        curve.push(model.train_step(&batch, &mut opt, &mut rng)?.1);
    }
    Ok(Trained {
        model,
        steps: steps as u64,
        curve,
    })
}

pub fn train_evaluator(cfg: &Config, train: &Dataset, steps: usize) -> Result<Trained<Evaluator>> {
    let mut rng = component_rng(cfg.data.seed, tags::EVALUATOR);
    let mut model = Evaluator::new(cfg.evaluator_config(), &mut rng);
    model.normalizer = Normalizer::fit(train.samples.iter().map(|s| &s.motion));
    let e = &cfg.eval;
    let mut opt = adam(e.lr, e.warmup);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = batch_indices(&mut rng, train.len(), e.batch);
        let batch: Vec<(&FeatureSequence, &MotionSequence)> = idx
            .iter()
            .map(|&i| (&train.samples[i].features, &train.samples[i].motion))
            .collect();
        curve.push(model.train_step(&batch, &mut opt)?);
    }
    Ok(Trained {
        model,
        steps: steps as u64,
        curve,
    })
}

/// End-to-end conditions the text conditioner is distilled onto.
pub fn target_conditions(masked: &MaskedTransformer, residual: &ResidualTransformer, f: &FeatureSequence) -> Result<Conditions> {
    Ok(Conditions {
        masked: masked.conditioner.compress(&masked.params, f)?.y,
        residual: residual.conditioner.compress(&residual.params, f)?.y,
    })
}

/// Recognizer on (features, instruction tokens), then the text
/// conditioner on the frozen end-to-end conditions. The curve holds the
/// recognizer losses followed by the distillation losses.
pub fn train_cascade(
    cfg: &Config,
    train: &Dataset,
    masked: &MaskedTransformer,
    residual: &ResidualTransformer,
    recognizer_steps: usize,
    text_steps: usize,
) -> Result<Trained<Cascade>> {
    let mut rng = component_rng(cfg.data.seed, tags::RECOGNIZER);
    let d = cfg.conditioner.cond_dim;
    let mut model = Cascade::new(CascadeConfig::default(), d, d, &mut rng)?;
    let batch_size = cfg.eval.batch;
    let tokens: Vec<InstructionTokens> = train.samples.iter().map(|s| InstructionTokens::from_spec(&s.spec)).collect();
    let mut opt = adam(cfg.eval.lr, cfg.eval.warmup);
    let mut curve = Vec::with_capacity(recognizer_steps + text_steps);
    for _ in 0..recognizer_steps {
        let idx = batch_indices(&mut rng, train.len(), batch_size);
        let batch: Vec<(&FeatureSequence, InstructionTokens)> =
            idx.iter().map(|&i| (&train.samples[i].features, tokens[i])).collect();
        curve.push(model.recognizer_step(&batch, &mut opt)?);
    }
    let mut rng = component_rng(cfg.data.seed, tags::TEXT);
    let mut targets: Vec<Option<Conditions>> = vec![None; train.len()];
    let mut opt = adam(cfg.eval.lr, cfg.eval.warmup);
    for _ in 0..text_steps {
        let idx = batch_indices(&mut rng, train.len(), batch_size);
        for &i in &idx {
            if targets[i].is_none() {
                targets[i] = Some(target_conditions(masked, residual, &train.samples[i].features)?);
            }
        }
        let batch: Vec<(InstructionTokens, &Conditions)> = idx
            .iter()
            .map(|&i| (tokens[i], targets[i].as_ref().expect("filled above")))
            .collect();
        curve.push(model.text_step(&batch, &mut opt)?);
    }
    Ok(Trained {
        model,
        steps: (recognizer_steps + text_steps) as u64,
        curve,
    })
}
