//! Deterministic synthetic instruction/motion pairs.
//!
//! Every sample is a pure function of a per-sample seed. An
//! [`InstructionSpec`] fixes the noiseless motion; the paired
//! [`FeatureSequence`] is a long, noisy, time-stretched encoding of the same
//! instruction plus speaker channels that carry no motion information.

mod dataset;
mod features;
mod motion;
mod oracle;

pub use dataset::{build_dataset, derive_seed, read_dataset, write_dataset, Dataset, Sample, Split};
pub use features::{synth_features, FEATURE_DIM, NOISE_STD, SEMANTIC_DIM, SPEAKER_DIM};
pub use motion::{circle_heading_rate, motion_length, synth_motion, MOTION_DIM, FRAME_RATE};
pub use oracle::{oracle_classify, Classified};

use crate::error::{Error, Result};

pub const MIN_FRAMES: usize = 32;
pub const MAX_FRAMES: usize = 196;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    WalkForward,
    WalkBackward,
    RunCircle,
    Jump,
    Squat,
    Kick,
    TurnLeft,
    TurnRight,
    Wave,
    Sidestep,
}

impl Primitive {
    pub const ALL: [Primitive; 10] = [
        Primitive::WalkForward,
        Primitive::WalkBackward,
        Primitive::RunCircle,
        Primitive::Jump,
        Primitive::Squat,
        Primitive::Kick,
        Primitive::TurnLeft,
        Primitive::TurnRight,
        Primitive::Wave,
        Primitive::Sidestep,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::WalkForward => "walk-forward",
            Primitive::WalkBackward => "walk-backward",
            Primitive::RunCircle => "run-circle",
            Primitive::Jump => "jump",
            Primitive::Squat => "squat",
            Primitive::Kick => "kick",
            Primitive::TurnLeft => "turn-left",
            Primitive::TurnRight => "turn-right",
            Primitive::Wave => "wave",
            Primitive::Sidestep => "sidestep",
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const SPEED_RANGE: (f64, f64) = (0.5, 2.0);
pub const REPETITION_RANGE: (u32, u32) = (1, 3);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstructionSpec {
    pub class: Primitive,
    pub speed: f64,
    pub repetitions: u32,
    /// Selects paraphrase, utterance timing and length, and semantic noise.
    pub phrasing_seed: u64,
}

impl InstructionSpec {
    pub fn new(class: Primitive, speed: f64, repetitions: u32) -> Self {
        Self {
            class,
            speed,
            repetitions,
            phrasing_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(SPEED_RANGE.0..=SPEED_RANGE.1).contains(&self.speed) {
            return Err(Error::OutOfRange {
                field: "speed",
                value: self.speed.to_string(),
            });
        }
        if !(REPETITION_RANGE.0..=REPETITION_RANGE.1).contains(&self.repetitions) {
            return Err(Error::OutOfRange {
                field: "repetitions",
                value: self.repetitions.to_string(),
            });
        }
        Ok(())
    }
}

/// `T x FEATURE_DIM` frames; the last `SPEAKER_DIM` channels repeat
/// `speaker` on every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<f64>,
    pub speaker: [f64; SPEAKER_DIM],
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len() / FEATURE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }
}

/// Motion channels per frame, in order.
pub mod channel {
    pub const ROOT_X: usize = 0;
    pub const ROOT_Y: usize = 1;
    pub const HEADING_SIN: usize = 2;
    pub const HEADING_COS: usize = 3;
    pub const VERTICAL: usize = 4;
    pub const LIMB_SIN: usize = 5;
    pub const LIMB_COS: usize = 6;
    pub const SPEED: usize = 7;
}

/// `N x MOTION_DIM` frames at [`FRAME_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<f64>,
}

impl MotionSequence {
    pub fn new(frames: Vec<f64>) -> Result<Self> {
        if frames.len() % MOTION_DIM != 0 {
            return Err(crate::error::format_err(
                "motion",
                format!("{} values is not a multiple of {MOTION_DIM}", frames.len()),
            ));
        }
        Ok(Self { frames })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            frames: vec![0.0; n * MOTION_DIM],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len() / MOTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * MOTION_DIM..(t + 1) * MOTION_DIM]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.frames.chunks_exact(MOTION_DIM).map(move |f| f[c])
    }

    /// Pads by repeating the last frame until the length is a multiple of
    /// `ratio`; returns the number of pad frames added.
    pub fn pad_to_multiple(&mut self, ratio: usize) -> usize {
        let n = self.len();
        let pad = (ratio - n % ratio) % ratio;
        if n > 0 {
            let last = self.frame(n - 1).to_vec();
            for _ in 0..pad {
                self.frames.extend_from_slice(&last);
            }
        }
        pad
    }

    pub fn truncate(&mut self, n: usize) {
        self.frames.truncate(n * MOTION_DIM);
    }
}

/// Rounds through `f32` so values survive the on-disk format unchanged.
pub(crate) fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}
