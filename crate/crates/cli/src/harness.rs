//! Generation over test sets, oracle accuracy, the metric battery and the
//! ablation loop, shared by the binary and the acceptance suite.

use mvq_core::conditioner::CompressorKind;
use mvq_core::data::{oracle_classify, Dataset, MotionSequence, Sample};
use mvq_core::eval::{
    diversity, frechet_distance, mm_dist, multimodality, r_precision, AblationRow, Evaluator, MetricReport,
};
use mvq_core::pipeline::{GenerateOptions, Sampling, System};
use mvq_core::rvq::{component_rng, TokenGrid, Tokenizer};
use mvq_core::Error;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::train::{self, tags};
use crate::Result;

/// Token count covering `frames` at the tokenizer's ratio, capped at the
/// model's position budget.
pub fn token_length(frames: usize, ratio: usize, max: usize) -> usize {
    frames.div_ceil(ratio).clamp(1, max)
}

/// Per-sample rng so results do not depend on evaluation order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    component_rng(seed.wrapping_add(index as u64), tags::GENERATE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    End2End,
    Cascaded,
}

pub fn generate_one(
    system: &System,
    sample: &Sample,
    opts: &GenerateOptions,
    route: Route,
    rng: &mut ChaCha8Rng,
) -> Result<MotionSequence> {
    let ratio = system.ratio()?;
    let max = system.masked.as_ref().map_or(usize::MAX, |m| m.config.max_positions);
    let n = token_length(sample.motion.len(), ratio, max);
    Ok(match route {
        Route::End2End => system.generate(&sample.features, n, opts, rng)?,
        Route::Cascaded => system.generate_cascaded(&sample.features, n, opts, rng)?,
    })
}

/// Generates one motion for each of the first `count` samples.
pub fn generate_set(
    system: &System,
    samples: &[Sample],
    count: usize,
    opts: &GenerateOptions,
    route: Route,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    samples
        .iter()
        .take(count)
        .enumerate()
        .map(|(i, s)| generate_one(system, s, opts, route, &mut sample_rng(seed, i)))
        .collect()
}

/// Fraction of motions the rule-based oracle assigns to the requested class.
pub fn oracle_accuracy(motions: &[MotionSequence], samples: &[Sample]) -> f64 {
    let hits = motions
        .iter()
        .zip(samples)
        .filter(|(m, s)| oracle_classify(m).is(s.spec.class))
        .count();
    hits as f64 / motions.len().max(1) as f64
}

/// What the metric battery compares against the test conditions.
pub enum Candidate<'a> {
    Generated(&'a System, GenerateOptions),
    GroundTruth,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricPlan {
    pub samples: usize,
    pub r_pool: usize,
    pub diversity_pairs: usize,
    pub mm_conditions: usize,
    pub mm_repeats: usize,
}

impl MetricPlan {
    pub fn from_config(cfg: &Config) -> Self {
        let e = &cfg.eval;
        Self {
            samples: e.samples.max(2 * e.diversity_pairs),
            r_pool: e.r_pool,
            diversity_pairs: e.diversity_pairs,
            mm_conditions: e.mm_conditions,
            mm_repeats: e.mm_repeats,
        }
    }
}

/// Full metric battery for one repeat.
pub fn metric_report(
    evaluator: &Evaluator,
    candidate: &Candidate<'_>,
    test: &Dataset,
    plan: MetricPlan,
    seed: u64,
    digest: &str,
) -> Result<MetricReport> {
    let count = plan.samples.min(test.len());
    let samples = &test.samples[..count];
    let motions: Vec<MotionSequence> = match candidate {
        Candidate::Generated(system, opts) => generate_set(system, samples, count, opts, Route::End2End, seed)?,
        Candidate::GroundTruth => samples.iter().map(|s| s.motion.clone()).collect(),
    };
    let gen_feats = evaluator.motion_features(&motions.iter().collect::<Vec<_>>())?;
    let gt_feats = evaluator.motion_features(&samples.iter().map(|s| &s.motion).collect::<Vec<_>>())?;
    let cond_feats = evaluator.condition_features(&samples.iter().map(|s| &s.features).collect::<Vec<_>>())?;
    let mut rng = component_rng(seed, tags::METRICS);
    let fid = frechet_distance(&gt_feats, &gen_feats)?;
    let [r_top1, r_top2, r_top3] = r_precision(&cond_feats, &gen_feats, plan.r_pool, &mut rng)?;
    let mm = mm_dist(&cond_feats, &gen_feats)?;
    let div = diversity(&gen_feats, plan.diversity_pairs, &mut rng)?;
    let mmod = match candidate {
        Candidate::Generated(system, opts) => {
            if opts.sampling == Sampling::Greedy {
                return Err(Error::Metric("multimodality is undefined under greedy decoding".into()).into());
            }
            let mut groups = Vec::with_capacity(plan.mm_conditions);
            for (i, s) in samples.iter().take(plan.mm_conditions).enumerate() {
                let mut rng = sample_rng(seed ^ 0x5eed_0000, i);
                let reps = (0..plan.mm_repeats)
                    .map(|_| generate_one(system, s, opts, Route::End2End, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                groups.push(evaluator.motion_features(&reps.iter().collect::<Vec<_>>())?);
            }
            multimodality(&groups)?
        }
        // one ground-truth motion per condition
        Candidate::GroundTruth => 0.0,
    };
    Ok(MetricReport {
        fid,
        r_top1,
        r_top2,
        r_top3,
        mm_dist: mm,
        diversity: div,
        multimodality: mmod,
        sample_count: count,
        seed,
        config_digest: digest.to_string(),
    })
}

/// Mean and 95% normal-approximation half-width over repeats.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Tokenizer and grids shared by every ablation row.
pub struct SharedTokens<'a> {
    pub tokenizer: &'a Tokenizer,
    pub grids: &'a [TokenGrid],
}

/// Trains one masked/residual pair per compressor kind under the same seed
/// and budget, then scores each with the same evaluator.
pub fn run_ablation(
    cfg: &Config,
    kinds: &[CompressorKind],
    train_set: &Dataset,
    test: &Dataset,
    shared: &SharedTokens<'_>,
    evaluator: &Evaluator,
    mut progress: impl FnMut(CompressorKind, &MetricReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(kinds.len());
    let plan = MetricPlan {
        samples: cfg.eval.samples,
        ..MetricPlan::from_config(cfg)
    };
    for &kind in kinds {
        let mut c = cfg.clone();
        c.conditioner.kind = kind.to_string();
        let masked = train::train_masked(&c, train_set, shared.grids, cfg.eval.ablation_masked_steps)?.model;
        let residual = train::train_residual(&c, train_set, shared.grids, cfg.eval.ablation_residual_steps)?.model;
        let system = System {
            tokenizer: Some(shared.tokenizer.clone()),
            masked: Some(masked),
            residual: Some(residual),
            cascade: None,
        };
        let opts = cfg.generate_options(false);
        let report = ablation_report(evaluator, &system, opts, test, plan, cfg.data.seed, &c.digest())?;
        progress(kind, &report);
        rows.push(AblationRow { kind, report });
    }
    Ok(rows)
}

/// The table columns only need FID, R-precision and MM Dist, so diversity
/// is computed over what the sample count allows and multimodality skipped.
fn ablation_report(
    evaluator: &Evaluator,
    system: &System,
    opts: GenerateOptions,
    test: &Dataset,
    plan: MetricPlan,
    seed: u64,
    digest: &str,
) -> Result<MetricReport> {
    let plan = MetricPlan {
        diversity_pairs: plan.diversity_pairs.min(plan.samples.min(test.len()) / 2),
        mm_conditions: 0,
        ..plan
    };
    let count = plan.samples.min(test.len());
    let samples = &test.samples[..count];
    let motions = generate_set(system, samples, count, &opts, Route::End2End, seed)?;
    let gen_feats = evaluator.motion_features(&motions.iter().collect::<Vec<_>>())?;
    let gt_feats = evaluator.motion_features(&samples.iter().map(|s| &s.motion).collect::<Vec<_>>())?;
    let cond_feats = evaluator.condition_features(&samples.iter().map(|s| &s.features).collect::<Vec<_>>())?;
    let mut rng = component_rng(seed, tags::METRICS);
    let [r_top1, r_top2, r_top3] = r_precision(&cond_feats, &gen_feats, plan.r_pool, &mut rng)?;
    Ok(MetricReport {
        fid: frechet_distance(&gt_feats, &gen_feats)?,
        r_top1,
        r_top2,
        r_top3,
        mm_dist: mm_dist(&cond_feats, &gen_feats)?,
        diversity: diversity(&gen_feats, plan.diversity_pairs.max(1), &mut rng)?,
        multimodality: 0.0,
        sample_count: count,
        seed,
        config_digest: digest.to_string(),
    })
}
