use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::{channel as ch, f32_exact, InstructionSpec, MotionSequence, Primitive, MAX_FRAMES, MIN_FRAMES};
use crate::error::Result;

pub const MOTION_DIM: usize = 8;
pub const FRAME_RATE: f64 = 20.0;

/// Frames per repetition at unit speed.
const FRAMES_PER_REP: f64 = 48.0;
/// Root travel per frame at unit speed (1 m/s at 20 Hz).
const STEP: f64 = 0.05;

/// Frame count for an instruction: longer for slow and repeated motions,
/// clamped to `[MIN_FRAMES, MAX_FRAMES]` and rounded to a multiple of 4.
pub fn motion_length(spec: &InstructionSpec) -> usize {
    let raw = spec.repetitions as f64 * FRAMES_PER_REP / spec.speed;
    let clamped = raw.clamp(MIN_FRAMES as f64, MAX_FRAMES as f64);
    ((clamped / 4.0).round() as usize * 4).clamp(MIN_FRAMES, MAX_FRAMES)
}

/// d(heading)/du for run-circle over normalised time `u ∈ [0, 1]`.
pub fn circle_heading_rate(repetitions: u32, _u: f64) -> f64 {
    TAU * repetitions as f64
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

struct Pose {
    heading: f64,
    /// Root velocity per frame along heading-independent axes.
    velocity: (f64, f64),
    vertical: f64,
    limb: f64,
}

fn pose(class: Primitive, reps: f64, speed: f64, u: f64) -> Pose {
    let step = STEP * speed;
    let walk_limb = TAU * 2.0 * reps * u;
    let still = |heading, vertical, limb| Pose {
        heading,
        velocity: (0.0, 0.0),
        vertical,
        limb,
    };
    match class {
        Primitive::WalkForward | Primitive::WalkBackward => {
            let sign = if class == Primitive::WalkForward { 1.0 } else { -1.0 };
            Pose {
                heading: 0.0,
                velocity: (0.0, sign * step),
                vertical: 0.02 * (2.0 * walk_limb).sin(),
                limb: walk_limb,
            }
        }
        Primitive::Sidestep => Pose {
            heading: 0.0,
            velocity: (0.6 * step, 0.0),
            vertical: 0.02 * (2.0 * walk_limb).sin(),
            limb: walk_limb,
        },
        Primitive::RunCircle => {
            let heading = TAU * reps * u;
            let limb = TAU * 4.0 * reps * u;
            Pose {
                heading,
                velocity: (1.5 * step * heading.sin(), 1.5 * step * heading.cos()),
                vertical: 0.04 * (2.0 * limb).sin(),
                limb,
            }
        }
        Primitive::Jump => still(0.0, 0.4 * (PI * reps * u).sin().abs(), TAU * reps * u),
        Primitive::Squat => still(0.0, -0.4 * (PI * reps * u).sin().abs(), 0.0),
        Primitive::Kick => still(0.0, 0.0, FRAC_PI_2 * (PI * reps * u).sin().powi(2)),
        Primitive::Wave => still(0.0, 0.0, -FRAC_PI_2 * (PI * reps * u).sin().powi(2)),
        Primitive::TurnLeft => still(FRAC_PI_2 * reps * smoothstep(u), 0.0, TAU * reps * u),
        Primitive::TurnRight => still(-FRAC_PI_2 * reps * smoothstep(u), 0.0, TAU * reps * u),
    }
}

/// Noiseless motion for an instruction. The root starts at the origin
/// facing +y.
pub fn synth_motion(spec: &InstructionSpec) -> Result<MotionSequence> {
    spec.validate()?;
    let n = motion_length(spec);
    let reps = spec.repetitions as f64;
    let mut frames = Vec::with_capacity(n * MOTION_DIM);
    let (mut x, mut y) = (0.0, 0.0);
    for t in 0..n {
        let u = t as f64 / (n - 1) as f64;
        let p = pose(spec.class, reps, spec.speed, u);
        let mut f = [0.0; MOTION_DIM];
        f[ch::ROOT_X] = x;
        f[ch::ROOT_Y] = y;
        f[ch::HEADING_SIN] = p.heading.sin();
        f[ch::HEADING_COS] = p.heading.cos();
        f[ch::VERTICAL] = p.vertical;
        f[ch::LIMB_SIN] = p.limb.sin();
        f[ch::LIMB_COS] = p.limb.cos();
        f[ch::SPEED] = spec.speed;
        frames.extend(f.iter().map(|&v| f32_exact(v)));
        x += p.velocity.0;
        y += p.velocity.1;
    }
    Ok(MotionSequence { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn heading(m: &MotionSequence, t: usize) -> f64 {
        let f = m.frame(t);
        f[ch::HEADING_SIN].atan2(f[ch::HEADING_COS])
    }

    fn unwrapped_sweep(m: &MotionSequence) -> f64 {
        let mut total = 0.0;
        for t in 1..m.len() {
            let mut d = heading(m, t) - heading(m, t - 1);
            while d > PI {
                d -= TAU;
            }
            while d < -PI {
                d += TAU;
            }
            total += d;
        }
        total
    }

    #[test]
    fn walk_forward_advances_with_constant_heading() {
        let m = synth_motion(&InstructionSpec::new(Primitive::WalkForward, 1.0, 1)).unwrap();
        let ys: Vec<f64> = m.channel(ch::ROOT_Y).collect();
        assert!(ys.windows(2).all(|w| w[1] > w[0]));
        let h0 = heading(&m, 0);
        assert!((0..m.len()).all(|t| heading(&m, t) == h0));
    }

    #[test]
    fn turns_are_mirror_images() {
        let l = synth_motion(&InstructionSpec::new(Primitive::TurnLeft, 1.0, 1)).unwrap();
        let r = synth_motion(&InstructionSpec::new(Primitive::TurnRight, 1.0, 1)).unwrap();
        let h0 = heading(&l, 0);
        assert_eq!(h0, heading(&r, 0));
        let (hl, hr) = (heading(&l, l.len() - 1), heading(&r, r.len() - 1));
        assert!(hl > h0);
        assert!(((hl - h0) + (hr - h0)).abs() < 1e-6);
    }

    #[test]
    fn circle_sweep_matches_integrated_rate() {
        let spec = InstructionSpec::new(Primitive::RunCircle, 1.0, 2);
        // trapezoid integration of the angular rate over u ∈ [0, 1]
        let steps = 10_000;
        let integral: f64 = (0..steps)
            .map(|i| {
                let (a, b) = (i as f64 / steps as f64, (i + 1) as f64 / steps as f64);
                0.5 * (circle_heading_rate(2, a) + circle_heading_rate(2, b)) * (b - a)
            })
            .sum();
        assert!((integral - 4.0 * PI).abs() < 1e-9);
        let m = synth_motion(&spec).unwrap();
        assert!((unwrapped_sweep(&m) - integral).abs() < 1e-3);
    }

    #[test]
    fn lengths_are_multiples_of_four_within_bounds() {
        for class in Primitive::ALL {
            for reps in 1..=3 {
                for speed in [0.5, 0.77, 1.0, 1.3, 2.0] {
                    let m = synth_motion(&InstructionSpec::new(class, speed, reps)).unwrap();
                    assert_eq!(m.len() % 4, 0);
                    assert!((MIN_FRAMES..=MAX_FRAMES).contains(&m.len()));
                }
            }
        }
    }

    #[test]
    fn out_of_range_fields_are_named() {
        let err = synth_motion(&InstructionSpec::new(Primitive::Jump, 2.5, 1)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { field: "speed", .. }));
        let err = synth_motion(&InstructionSpec::new(Primitive::Jump, 1.0, 0)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { field: "repetitions", .. }));
    }
}
