use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    f32_exact, synth_features, synth_motion, FeatureSequence, InstructionSpec, MotionSequence, Primitive, FEATURE_DIM,
    MOTION_DIM, SPEAKER_DIM, SPEED_RANGE,
};
use crate::error::{format_err, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MVQD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: InstructionSpec,
    pub features: FeatureSequence,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// SplitMix64 finaliser over (seed, split, index): decorrelated per-sample
/// seeds, disjoint between splits.
pub fn derive_seed(seed: u64, split: Split, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(split.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_at(seed: u64, split: Split, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split, index));
    let spec = InstructionSpec {
        class: Primitive::ALL[rng.gen_range(0..Primitive::ALL.len())],
        speed: f32_exact(rng.gen_range(SPEED_RANGE.0..=SPEED_RANGE.1)),
        repetitions: rng.gen_range(1..=3),
        phrasing_seed: rng.next_u64(),
    };
    let speaker_seed = rng.next_u64();
    Ok(Sample {
        features: synth_features(&spec, speaker_seed),
        motion: synth_motion(&spec)?,
        spec,
    })
}

fn build_split(seed: u64, split: Split, count: usize) -> Result<Dataset> {
    let samples = (0..count as u64)
        .map(|i| sample_at(seed, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { seed, samples })
}

/// Train and test sets drawn from the same distribution with disjoint
/// per-sample seeds.
pub fn build_dataset(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(crate::Error::OutOfRange {
            field: "sample count",
            value: format!("train={n_train}, test={n_test}"),
        });
    }
    Ok((build_split(seed, Split::Train, n_train)?, build_split(seed, Split::Test, n_test)?))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn encode_record(s: &Sample) -> Vec<u8> {
    let mut b = Vec::new();
    b.push(s.spec.class.index() as u8);
    b.extend_from_slice(&(s.spec.speed as f32).to_le_bytes());
    b.push(s.spec.repetitions as u8);
    b.extend_from_slice(&s.spec.phrasing_seed.to_le_bytes());
    put_u32(&mut b, s.features.len() as u32);
    put_f32s(&mut b, &s.features.speaker);
    put_f32s(&mut b, &s.features.frames);
    put_u32(&mut b, s.motion.len() as u32);
    put_f32s(&mut b, &s.motion.frames);
    b
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    w.write_all(&(FEATURE_DIM as u32).to_le_bytes())?;
    w.write_all(&(MOTION_DIM as u32).to_le_bytes())?;
    w.write_all(&ds.seed.to_le_bytes())?;
    for s in &ds.samples {
        let rec = encode_record(s);
        w.write_all(&(rec.len() as u32).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(format_err("dataset record", "truncated"));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn decode_record(buf: &[u8]) -> Result<Sample> {
    let mut c = Cursor { buf, pos: 0 };
    let class = Primitive::from_index(c.u8()? as usize).ok_or_else(|| format_err("dataset record", "bad class"))?;
    let speed = f32::from_le_bytes(c.take(4)?.try_into().unwrap()) as f64;
    let repetitions = c.u8()? as u32;
    let phrasing_seed = c.u64()?;
    let t = c.u32()? as usize;
    let speaker: [f64; SPEAKER_DIM] = c.f32s(SPEAKER_DIM)?.try_into().unwrap();
    let frames = c.f32s(t * FEATURE_DIM)?;
    let n = c.u32()? as usize;
    let motion = c.f32s(n * MOTION_DIM)?;
    if c.pos != buf.len() {
        return Err(format_err("dataset record", "trailing bytes"));
    }
    Ok(Sample {
        spec: InstructionSpec {
            class,
            speed,
            repetitions,
            phrasing_seed,
        },
        features: FeatureSequence { frames, speaker },
        motion: MotionSequence { frames: motion },
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 4 + 4 + 8 + 4 + 4 + 8];
    r.read_exact(&mut header)?;
    let mut c = Cursor { buf: &header, pos: 0 };
    if c.take(4)? != DATASET_MAGIC {
        return Err(format_err("dataset", "bad magic"));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(format_err("dataset", format!("unsupported version {version}")));
    }
    let count = c.u64()? as usize;
    let (d_a, d) = (c.u32()? as usize, c.u32()? as usize);
    if d_a != FEATURE_DIM || d != MOTION_DIM {
        return Err(format_err("dataset", format!("dims {d_a}/{d}, expected {FEATURE_DIM}/{MOTION_DIM}")));
    }
    let seed = c.u64()?;
    let mut samples = Vec::with_capacity(count);
    let mut len = [0u8; 4];
    let mut rec = Vec::new();
    for _ in 0..count {
        r.read_exact(&mut len)?;
        rec.resize(u32::from_le_bytes(len) as usize, 0);
        r.read_exact(&mut rec)?;
        samples.push(decode_record(&rec)?);
    }
    Ok(Dataset { seed, samples })
}
