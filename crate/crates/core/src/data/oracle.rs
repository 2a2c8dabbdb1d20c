use std::f64::consts::{PI, TAU};

use super::{channel as ch, MotionSequence, Primitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classified {
    Class(Primitive),
    Unknown,
}

impl Classified {
    pub fn is(self, class: Primitive) -> bool {
        self == Classified::Class(class)
    }
}

const SMOOTH_RADIUS: usize = 2;
const END_FRAMES: usize = 5;
const CIRCLE_SWEEP: f64 = 5.5;
const TURN_SWEEP: f64 = 0.8;
const MIN_DISPLACEMENT: f64 = 0.5;
const VERTICAL_PEAK: f64 = 0.2;
const LIMB_BIAS: f64 = 0.3;

fn smooth(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(SMOOTH_RADIUS);
            let hi = (i + SMOOTH_RADIUS + 1).min(n);
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn end_delta(xs: &[f64]) -> f64 {
    let k = END_FRAMES.min(xs.len());
    let head = xs[..k].iter().sum::<f64>() / k as f64;
    let tail = xs[xs.len() - k..].iter().sum::<f64>() / k as f64;
    tail - head
}

fn heading_sweep(sin: &[f64], cos: &[f64]) -> f64 {
    let angles: Vec<f64> = sin.iter().zip(cos).map(|(s, c)| s.atan2(*c)).collect();
    let mut unwrapped = vec![angles[0]];
    for w in angles.windows(2) {
        let mut d = w[1] - w[0];
        while d > PI {
            d -= TAU;
        }
        while d < -PI {
            d += TAU;
        }
        unwrapped.push(unwrapped.last().unwrap() + d);
    }
    unwrapped[unwrapped.len() - 1] - unwrapped[0]
}

/// Rule-based classifier over trajectory statistics: heading sweep, root
/// displacement, vertical excursion and limb-phase bias, tested in that
/// order. Exact on noiseless generator output.
pub fn oracle_classify(m: &MotionSequence) -> Classified {
    if m.len() < 2 || m.frames.iter().all(|v| v.abs() < 1e-9) {
        return Classified::Unknown;
    }
    let chan = |c| smooth(&m.channel(c).collect::<Vec<_>>());
    let (hs, hc) = (chan(ch::HEADING_SIN), chan(ch::HEADING_COS));
    if hs.iter().zip(&hc).any(|(s, c)| s.hypot(*c) < 1e-6) {
        return Classified::Unknown;
    }
    let sweep = heading_sweep(&hs, &hc);
    if sweep.abs() > CIRCLE_SWEEP {
        return Classified::Class(Primitive::RunCircle);
    }
    if sweep > TURN_SWEEP {
        return Classified::Class(Primitive::TurnLeft);
    }
    if sweep < -TURN_SWEEP {
        return Classified::Class(Primitive::TurnRight);
    }

    let dx = end_delta(&chan(ch::ROOT_X));
    let dy = end_delta(&chan(ch::ROOT_Y));
    if dy.abs() >= dx.abs() && dy.abs() > MIN_DISPLACEMENT {
        return Classified::Class(if dy > 0.0 {
            Primitive::WalkForward
        } else {
            Primitive::WalkBackward
        });
    }
    if dx.abs() > MIN_DISPLACEMENT {
        return Classified::Class(Primitive::Sidestep);
    }

    let vertical = chan(ch::VERTICAL);
    let peak = vertical.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let trough = vertical.iter().copied().fold(f64::INFINITY, f64::min);
    if peak > VERTICAL_PEAK && peak >= -trough {
        return Classified::Class(Primitive::Jump);
    }
    if trough < -VERTICAL_PEAK {
        return Classified::Class(Primitive::Squat);
    }

    let (ls, lc) = (chan(ch::LIMB_SIN), chan(ch::LIMB_COS));
    let bias = ls
        .iter()
        .zip(&lc)
        .map(|(s, c)| s.atan2(*c).sin())
        .sum::<f64>()
        / ls.len() as f64;
    if bias > LIMB_BIAS {
        Classified::Class(Primitive::Kick)
    } else if bias < -LIMB_BIAS {
        Classified::Class(Primitive::Wave)
    } else {
        Classified::Unknown
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_motion, InstructionSpec, MOTION_DIM};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_on_clean_output_for_every_class() {
        for class in Primitive::ALL {
            for (speed, reps) in [(0.5, 1), (0.8, 3), (1.0, 2), (1.6, 1), (2.0, 3)] {
                let m = synth_motion(&InstructionSpec::new(class, speed, reps)).unwrap();
                assert_eq!(oracle_classify(&m), Classified::Class(class), "{class} {speed} {reps}");
            }
        }
    }

    #[test]
    fn all_zero_motion_is_unknown() {
        assert_eq!(oracle_classify(&MotionSequence::zeros(40)), Classified::Unknown);
    }

    #[test]
    fn robust_to_frame_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut correct = 0;
        for i in 0..1000 {
            let class = Primitive::ALL[i % 10];
            let speed = 0.5 + 1.5 * ((i * 7919) % 1000) as f64 / 999.0;
            let reps = 1 + (i / 10 % 3) as u32;
            let mut m = synth_motion(&InstructionSpec::new(class, speed, reps)).unwrap();
            m.frames.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            assert_eq!(m.frames.len() % MOTION_DIM, 0);
            if oracle_classify(&m).is(class) {
                correct += 1;
            }
        }
        assert!(correct >= 950, "accuracy {correct}/1000");
    }

    proptest! {
        #[test]
        fn matches_spec_class(ci in 0usize..10, speed in 0.5f64..=2.0, reps in 1u32..=3) {
            let class = Primitive::ALL[ci];
            let m = synth_motion(&InstructionSpec::new(class, speed, reps)).unwrap();
            prop_assert_eq!(oracle_classify(&m), Classified::Class(class));
        }

        #[test]
        fn trig_pairs_unit_norm(ci in 0usize..10, speed in 0.5f64..=2.0, reps in 1u32..=3) {
            let m = synth_motion(&InstructionSpec::new(Primitive::ALL[ci], speed, reps)).unwrap();
            for t in 0..m.len() {
                let f = m.frame(t);
                prop_assert!((f[ch::HEADING_SIN].hypot(f[ch::HEADING_COS]) - 1.0).abs() < 1e-6);
                prop_assert!((f[ch::LIMB_SIN].hypot(f[ch::LIMB_COS]) - 1.0).abs() < 1e-6);
            }
        }
    }
}
