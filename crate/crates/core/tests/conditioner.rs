use mvq_core::conditioner::{
    drop_mask, memory_retrieval_attention, CompressorKind, Conditioner, ConditionerConfig,
};
use mvq_core::data::{FeatureSequence, FEATURE_DIM, SPEAKER_DIM};
use mvq_core::Error;
use mvq_tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn features(r: &mut ChaCha8Rng, t: usize) -> FeatureSequence {
    FeatureSequence {
        frames: (0..t * FEATURE_DIM).map(|_| r.sample(StandardNormal)).collect(),
        speaker: [0.0; SPEAKER_DIM],
    }
}

fn small(kind: CompressorKind) -> ConditionerConfig {
    ConditionerConfig {
        kind,
        memory_tokens: 8,
        memory_dim: 16,
        cond_dim: 12,
        drop_rate: 0.2,
    }
}

fn build(cfg: ConditionerConfig, seed: u64) -> (Conditioner, ParamStore) {
    let mut ps = ParamStore::new();
    let c = Conditioner::new(&mut ps, "cond", cfg, &mut rng(seed));
    (c, ps)
}

#[test]
fn attention_rows_are_convex_weights() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (t, m, d) = (r.gen_range(1..20), r.gen_range(1..12), r.gen_range(1..9));
        let q = randn(&mut r, &[t, d]);
        let k = randn(&mut r, &[m, d]);
        let v = randn(&mut r, &[m, 3]);
        let (out, w) = memory_retrieval_attention(&q, &k, &v).unwrap();
        for i in 0..t {
            let row = &w.data()[i * m..(i + 1) * m];
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
            // the output row is exactly these weights applied to V
            for c in 0..3 {
                let mix: f64 = (0..m).map(|j| row[j] * v.data()[j * 3 + c]).sum();
                assert!((mix - out.data()[i * 3 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_token_and_identical_keys() {
    let mut r = rng(2);
    let q = randn(&mut r, &[5, 4]);
    let v1 = randn(&mut r, &[1, 3]);
    let (out, _) = memory_retrieval_attention(&q, &randn(&mut r, &[1, 4]), &v1).unwrap();
    for i in 0..5 {
        assert_eq!(&out.data()[i * 3..(i + 1) * 3], v1.data());
    }

    let key = randn(&mut r, &[1, 4]);
    let k = Tensor::from_fn(&[6, 4], |i| key.data()[i % 4]);
    let v = randn(&mut r, &[6, 2]);
    let (out, _) = memory_retrieval_attention(&q, &k, &v).unwrap();
    for c in 0..2 {
        let mean = (0..6).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 6.0;
        for i in 0..5 {
            assert!((out.data()[i * 2 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_permutation_covariant_in_queries() {
    let mut r = rng(3);
    let (t, m, d) = (7, 5, 4);
    let q = randn(&mut r, &[t, d]);
    let k = randn(&mut r, &[m, d]);
    let v = randn(&mut r, &[m, d]);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let qp = Tensor::from_fn(&[t, d], |i| q.data()[perm[i / d] * d + i % d]);
    let (out, _) = memory_retrieval_attention(&q, &k, &v).unwrap();
    let (outp, _) = memory_retrieval_attention(&qp, &k, &v).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(&outp.data()[i * d..(i + 1) * d], &out.data()[p * d..(p + 1) * d]);
    }
}

#[test]
fn key_width_mismatch_is_an_error() {
    let mut r = rng(4);
    let q = randn(&mut r, &[2, 3]);
    let k = randn(&mut r, &[4, 2]);
    let v = randn(&mut r, &[4, 2]);
    assert!(memory_retrieval_attention(&q, &k, &v).is_err());
}

#[test]
fn output_width_is_independent_of_input_length() {
    for kind in CompressorKind::ALL {
        let (c, ps) = build(small(kind), 5);
        let mut r = rng(6);
        for t in [40, 100, 250, 400] {
            let y = c.compress(&ps, &features(&mut r, t)).unwrap();
            assert_eq!(y.y.len(), 12, "{kind} at T={t}");
            assert!(!y.null_flag);
        }
    }
}

#[test]
fn empty_sequences_are_rejected() {
    for kind in CompressorKind::ALL {
        let (c, ps) = build(small(kind), 7);
        let empty = FeatureSequence {
            frames: vec![],
            speaker: [0.0; SPEAKER_DIM],
        };
        assert!(matches!(c.compress(&ps, &empty), Err(Error::EmptyInput(_))));
    }
}

#[test]
fn avgpool_is_exact_on_constant_sequences() {
    let (c, ps) = build(small(CompressorKind::AvgPool(8)), 8);
    let mut r = rng(9);
    let frame: Vec<f64> = (0..FEATURE_DIM).map(|_| r.sample(StandardNormal)).collect();
    let constant = |t: usize| FeatureSequence {
        frames: frame.repeat(t),
        speaker: [0.0; SPEAKER_DIM],
    };
    let a = c.compress(&ps, &constant(40)).unwrap().y;
    let b = c.compress(&ps, &constant(397)).unwrap().y;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn single_memory_token_ignores_the_input() {
    let cfg = ConditionerConfig {
        memory_tokens: 1,
        ..small(CompressorKind::MemRetr)
    };
    let (c, ps) = build(cfg, 10);
    let mut r = rng(11);
    let a = c.compress(&ps, &features(&mut r, 50)).unwrap().y;
    let b = c.compress(&ps, &features(&mut r, 50)).unwrap().y;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batched_forward_matches_one_at_a_time() {
    for kind in CompressorKind::ALL {
        let (c, ps) = build(small(kind), 12);
        let mut r = rng(13);
        let fs: Vec<FeatureSequence> = [40, 77, 130].iter().map(|&t| features(&mut r, t)).collect();
        let mut g = mvq_tensor::Graph::with_params(&ps);
        let refs: Vec<&FeatureSequence> = fs.iter().collect();
        let y = c.forward(&mut g, &refs).unwrap();
        let batched = g.value(y).data().to_vec();
        for (i, f) in fs.iter().enumerate() {
            let single = c.compress(&ps, f).unwrap().y;
            for (a, b) in single.iter().zip(&batched[i * 12..(i + 1) * 12]) {
                assert!((a - b).abs() < 1e-10, "{kind} sample {i}");
            }
        }
    }
}

#[test]
fn null_condition_is_flagged_and_learned() {
    let (c, ps) = build(small(CompressorKind::MemRetr), 14);
    let null = c.null_condition(&ps);
    assert!(null.null_flag);
    assert_eq!(null.y.len(), 12);
    assert!(null.y.iter().any(|&v| v != 0.0));
}

#[test]
fn dropped_rows_become_the_null_embedding() {
    let (c, ps) = build(small(CompressorKind::AvgPool(8)), 15);
    let mut r = rng(16);
    let fs = [features(&mut r, 40), features(&mut r, 60)];
    let mut g = mvq_tensor::Graph::with_params(&ps);
    let y = c.forward(&mut g, &[&fs[0], &fs[1]]).unwrap();
    let kept = g.value(y).data()[12..].to_vec();
    let mixed = c.apply_drop(&mut g, y, &[true, false]).unwrap();
    let out = g.value(mixed).data().to_vec();
    assert_eq!(&out[..12], c.null_condition(&ps).y.as_slice());
    assert_eq!(&out[12..], kept.as_slice());

    let all = drop_mask(10, 1.0, &mut r);
    let y = c.forward(&mut g, &[&fs[0]; 10]).unwrap();
    let dropped = c.apply_drop(&mut g, y, &all).unwrap();
    let null = c.null_condition(&ps).y;
    assert!(g.value(dropped).data().chunks(12).all(|row| row == null.as_slice()));
}

#[test]
fn empirical_drop_rate_matches_the_configured_probability() {
    let mask = drop_mask(10_000, 0.2, &mut rng(17));
    let rate = mask.iter().filter(|&&d| d).count() as f64 / 1e4;
    assert!((rate - 0.2).abs() <= 0.01, "drop rate {rate}");
}
