use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::{f32_exact, FeatureSequence, InstructionSpec};

pub const FEATURE_DIM: usize = 32;
pub const SEMANTIC_DIM: usize = 24;
pub const SPEAKER_DIM: usize = 8;
pub const NOISE_STD: f64 = 0.1;

pub const MIN_FEATURE_LEN: usize = 40;
pub const MAX_FEATURE_LEN: usize = 400;

const CLASS_CODE_DIM: usize = 16;
const PARAPHRASES: usize = 3;
const CODE_SEED: u64 = 0x5EED_C0DE;

struct Codebooks {
    class: Vec<[f64; CLASS_CODE_DIM]>,
    paraphrase: Vec<[f64; CLASS_CODE_DIM]>,
}

/// Fixed per-class codes and paraphrase offsets, identical in every process.
fn codebooks() -> &'static Codebooks {
    static BOOKS: OnceLock<Codebooks> = OnceLock::new();
    BOOKS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |scale: f64| {
            let mut v = [0.0; CLASS_CODE_DIM];
            v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= scale * (CLASS_CODE_DIM as f64).sqrt() / norm);
            v
        };
        let class = (0..10).map(|_| draw(1.0)).collect();
        let paraphrase = (0..10 * PARAPHRASES).map(|_| draw(0.35)).collect();
        Codebooks { class, paraphrase }
    })
}

fn speed_basis(speed: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate() {
        let center = 0.5 + 0.5 * c as f64;
        *o = (-(speed - center).powi(2) / (2.0 * 0.25 * 0.25)).exp();
    }
    out
}

/// Feature sequence for `spec`. Length, paraphrase, utterance window and
/// semantic noise come from `spec.phrasing_seed`; the speaker channels come
/// only from `speaker_seed`.
pub fn synth_features(spec: &InstructionSpec, speaker_seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.phrasing_seed);
    let reps = spec.repetitions as f64;

    let base = 22.0 * (reps + 1.5) / spec.speed.sqrt();
    let stretch = LogNormal::new(0.0, 0.55).unwrap().sample(&mut rng);
    let t_len = ((base * stretch).round() as usize).clamp(MIN_FEATURE_LEN, MAX_FEATURE_LEN);

    let books = codebooks();
    let variant = rng.gen_range(0..PARAPHRASES);
    let class = spec.class.index();
    let mut code = books.class[class];
    for (c, p) in code.iter_mut().zip(&books.paraphrase[class * PARAPHRASES + variant]) {
        *c += p;
    }
    let speed = speed_basis(spec.speed);

    // The instruction is "spoken" inside [start, end]; outside it the
    // semantic channels carry only noise.
    let start: f64 = rng.gen_range(0.0..0.3);
    let end = (start + rng.gen_range(0.4..0.7f64)).min(1.0);

    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut speaker = [0.0; SPEAKER_DIM];
    let mut srng = ChaCha8Rng::seed_from_u64(speaker_seed);
    let snorm = Normal::new(0.0, 1.0).unwrap();
    speaker.iter_mut().for_each(|s| *s = f32_exact(snorm.sample(&mut srng)));

    let mut frames = Vec::with_capacity(t_len * super::FEATURE_DIM);
    for t in 0..t_len {
        let tau = t as f64 / (t_len - 1) as f64;
        let (env, local) = if tau >= start && tau <= end {
            let local = (tau - start) / (end - start);
            ((PI * local).sin().powi(2), local)
        } else {
            (0.0, 0.0)
        };
        let mut sem = [0.0; SEMANTIC_DIM];
        sem[..CLASS_CODE_DIM].copy_from_slice(&code);
        sem[16..20].copy_from_slice(&speed);
        sem[20 + (spec.repetitions as usize - 1)] = 1.0;
        sem[23] = (TAU * reps * local).sin();
        for s in sem.iter_mut() {
            *s = *s * env + noise.sample(&mut rng);
        }
        frames.extend(sem.iter().map(|&v| f32_exact(v)));
        frames.extend_from_slice(&speaker);
    }
    FeatureSequence { frames, speaker }
}
