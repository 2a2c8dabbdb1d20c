use std::f64::consts::FRAC_2_PI;

use mvq_core::conditioner::{CompressorKind, ConditionerConfig};
use mvq_core::data::{FeatureSequence, FEATURE_DIM, SPEAKER_DIM};
use mvq_core::rvq::TokenGrid;
use mvq_core::transformer::{
    mask_fraction, sample_mask, MaskedTransformer, ResidualTransformer, TransformerConfig,
};
use mvq_core::Error;
use mvq_tensor::{Adam, AdamConfig, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn features(r: &mut ChaCha8Rng, t: usize) -> FeatureSequence {
    FeatureSequence {
        frames: (0..t * FEATURE_DIM).map(|_| r.sample(StandardNormal)).collect(),
        speaker: [0.0; SPEAKER_DIM],
    }
}

fn tcfg(layers: usize) -> TransformerConfig {
    TransformerConfig {
        layers,
        heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        max_positions: 16,
        drop_rate: 0.2,
        grad_clip: 1.0,
    }
}

fn ccfg() -> ConditionerConfig {
    ConditionerConfig {
        kind: CompressorKind::MemRetr,
        memory_tokens: 4,
        memory_dim: 8,
        cond_dim: 8,
        drop_rate: 0.2,
    }
}

fn grid(r: &mut ChaCha8Rng, depth: usize, n: usize, k: usize) -> TokenGrid {
    TokenGrid {
        rows: (0..depth).map(|_| (0..n).map(|_| r.gen_range(0..k)).collect()).collect(),
    }
}

#[test]
fn average_mask_fraction_is_two_over_pi() {
    let mut r = rng(1);
    let mean = (0..100_000).map(|_| mask_fraction(r.gen())).sum::<f64>() / 1e5;
    assert!((mean - FRAC_2_PI).abs() <= 0.01, "{mean}");

    // realised masks, including the rounding to whole positions
    let n = 64;
    let trials = 20_000;
    let masked: usize = (0..trials)
        .map(|_| sample_mask(n, &mut r).iter().filter(|&&m| m).count())
        .sum();
    let mean = masked as f64 / (trials * n) as f64;
    assert!((mean - FRAC_2_PI).abs() <= 0.01, "{mean}");
}

#[test]
fn initial_masked_loss_is_near_uniform() {
    let k = 128;
    let model = MaskedTransformer::new(tcfg(2), ccfg(), k, &mut rng(2)).unwrap();
    let mut r = rng(3);
    let feats: Vec<FeatureSequence> = (0..8).map(|_| features(&mut r, 40)).collect();
    let rows: Vec<Vec<usize>> = (0..8).map(|_| (0..12).map(|_| r.gen_range(0..k)).collect()).collect();
    let masks: Vec<Vec<bool>> = rows.iter().map(|row| sample_mask(row.len(), &mut r)).collect();
    let base: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
    let (inputs, targets) = model.masked_inputs(&base, &masks);
    let mut g = Graph::with_params(&model.params);
    let refs: Vec<&FeatureSequence> = feats.iter().collect();
    let loss = model.loss(&mut g, &refs, &inputs, &targets, &[false; 8]).unwrap();
    let value = g.value(loss).item();
    assert!((value - (k as f64).ln()).abs() <= 0.1, "{value}");
}

#[test]
fn unmasked_positions_receive_no_gradient() {
    let k = 8;
    let model = MaskedTransformer::new(tcfg(1), ccfg(), k, &mut rng(4)).unwrap();
    let mut r = rng(5);
    let f = features(&mut r, 30);
    let row: Vec<usize> = (0..6).map(|_| r.gen_range(0..k)).collect();
    let mask = vec![true, false, true, false, false, true];
    let (inputs, targets) = model.masked_inputs(&[&row], &[mask.clone()]);

    let mut g = Graph::with_params(&model.params);
    let y = model.conditioner.forward(&mut g, &[&f]).unwrap();
    let rows: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = model.logits(&mut g, &rows, y).unwrap();
    let values = g.value(logits).clone().reshape(&[6, k]).unwrap();
    // re-enter the logits as a leaf so their gradient is reported
    let flat = g.leaf(values, true);
    let loss = g.cross_entropy(flat, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let dl = grads.wrt(flat).expect("logit gradient");
    for (p, &m) in mask.iter().enumerate() {
        let norm: f64 = dl[p * k..(p + 1) * k].iter().map(|v| v.abs()).sum();
        if m {
            assert!(norm > 0.0, "masked position {p}");
        } else {
            assert_eq!(norm, 0.0, "unmasked position {p}");
        }
    }
}

fn masked_loss_value(model: &MaskedTransformer, f: &FeatureSequence, inputs: &[Vec<usize>], targets: &[Option<usize>]) -> f64 {
    let mut g = Graph::with_params(&model.params);
    let loss = model.loss(&mut g, &[f], inputs, targets, &[false]).unwrap();
    g.value(loss).item()
}

#[test]
fn masked_model_parameter_gradients_match_central_differences() {
    let k = 8;
    let mut model = MaskedTransformer::new(tcfg(1), ccfg(), k, &mut rng(6)).unwrap();
    // enlarge the head so the loss is not flat in its inputs
    let head = model.params.find("head.weight").unwrap();
    let mut r = rng(7);
    model.params.get_mut(head).data_mut().iter_mut().for_each(|w| *w = r.sample::<f64, _>(StandardNormal) * 0.3);

    let f = features(&mut r, 24);
    let row: Vec<usize> = (0..4).map(|_| r.gen_range(0..k)).collect();
    let (inputs, targets) = model.masked_inputs(&[&row], &[vec![true, false, true, true]]);

    let grads = {
        let mut g = Graph::with_params(&model.params);
        let loss = model.loss(&mut g, &[&f], &inputs, &targets, &[false]).unwrap();
        g.backward(loss).unwrap().param_grads(&model.params)
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let step = (n / 12).max(1);
        for c in (0..n).step_by(step) {
            let orig = model.params.get(id).data()[c];
            model.params.get_mut(id).data_mut()[c] = orig + h;
            let plus = masked_loss_value(&model, &f, &inputs, &targets);
            model.params.get_mut(id).data_mut()[c] = orig - h;
            let minus = masked_loss_value(&model, &f, &inputs, &targets);
            model.params.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[c] - numeric).abs() / (analytic[c].abs() + numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "{}[{c}]: analytic {} numeric {numeric}", model.params.name(id), analytic[c]);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn batch_order_only_permutes_outputs() {
    let k = 8;
    let model = MaskedTransformer::new(tcfg(2), ccfg(), k, &mut rng(8)).unwrap();
    let mut r = rng(9);
    let fa = features(&mut r, 30);
    let fb = features(&mut r, 50);
    let ra: Vec<usize> = vec![1, k, 3, 4, k, 0];
    let rb: Vec<usize> = vec![k, 2, 2, 7];
    let run = |feats: [&FeatureSequence; 2], rows: [&[usize]; 2]| {
        let mut g = Graph::with_params(&model.params);
        let y = model.conditioner.forward(&mut g, &feats).unwrap();
        let out = model.logits(&mut g, &rows, y).unwrap();
        g.value(out).data().to_vec()
    };
    let ab = run([&fa, &fb], [&ra, &rb]);
    let ba = run([&fb, &fa], [&rb, &ra]);
    let per = 6 * k;
    for (x, y) in ab[..per].iter().zip(&ba[per..]) {
        assert!((x - y).abs() < 1e-12);
    }
    // only the valid positions of the shorter row are compared
    for (x, y) in ab[per..per + 4 * k].iter().zip(&ba[..4 * k]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn construction_and_training_are_deterministic() {
    let k = 8;
    let mut r = rng(10);
    let f = features(&mut r, 30);
    let row: Vec<usize> = (0..6).map(|_| r.gen_range(0..k)).collect();
    let run = || {
        let mut model = MaskedTransformer::new(tcfg(1), ccfg(), k, &mut rng(11)).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut r = rng(12);
        let losses: Vec<f64> = (0..3)
            .map(|_| model.train_step(&[(&f, row.as_slice())], &mut opt, &mut r).unwrap())
            .collect();
        (losses, model.logits_pair(&row, &[0.5; 8]).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn out_of_vocabulary_tokens_are_rejected() {
    let k = 8;
    let model = MaskedTransformer::new(tcfg(1), ccfg(), k, &mut rng(13)).unwrap();
    match model.logits_pair(&[0, 1, k + 2], &[0.0; 8]) {
        Err(Error::CorruptToken { pos, index, .. }) => assert_eq!((pos, index), (2, k + 2)),
        other => panic!("expected corrupt token, got {other:?}"),
    }
    let residual = ResidualTransformer::new(tcfg(1), ccfg(), k, 2, &mut rng(14)).unwrap();
    let bad = TokenGrid {
        rows: vec![vec![0, 9, 1], vec![0, 0, 0], vec![0, 0, 0]],
    };
    assert!(matches!(residual.logits_pair(&bad, 1, &[0.0; 8]), Err(Error::CorruptToken { .. })));
}

#[test]
fn residual_logits_ignore_rows_at_or_above_the_target_layer() {
    let (k, depth, n) = (8, 3, 5);
    let model = ResidualTransformer::new(tcfg(2), ccfg(), k, depth, &mut rng(15)).unwrap();
    let mut r = rng(16);
    let y = vec![0.3; 8];
    for j in 1..=depth {
        let a = grid(&mut r, depth + 1, n, k);
        let mut b = a.clone();
        for row in &mut b.rows[j..] {
            row.iter_mut().for_each(|t| *t = (*t + 5) % k);
        }
        assert_eq!(model.logits_pair(&a, j, &y).unwrap(), model.logits_pair(&b, j, &y).unwrap());
        if j > 1 {
            // changing a lower row does move the logits
            let mut c = a.clone();
            c.rows[j - 1][0] = (c.rows[j - 1][0] + 1) % k;
            assert_ne!(model.logits_pair(&a, j, &y).unwrap(), model.logits_pair(&c, j, &y).unwrap());
        }
    }
    assert!(model.logits_pair(&grid(&mut r, 4, n, k), 0, &y).is_err());
    assert!(model.logits_pair(&grid(&mut r, 4, n, k), depth + 1, &y).is_err());
}

#[test]
fn single_residual_layer_always_trains_layer_one() {
    let k = 8;
    let mut model = ResidualTransformer::new(tcfg(1), ccfg(), k, 1, &mut rng(17)).unwrap();
    let mut r = rng(18);
    let f = features(&mut r, 30);
    let g = grid(&mut r, 2, 6, k);
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..10 {
        assert_eq!(model.train_step(&[(&f, &g)], &mut opt, &mut r).unwrap().0, 1);
    }
    let mut empty = ResidualTransformer::new(tcfg(1), ccfg(), k, 0, &mut rng(19)).unwrap();
    assert!(empty.train_step(&[(&f, &g)], &mut opt, &mut r).is_err());
}

#[test]
fn masked_training_fits_a_fixed_pairing() {
    let k = 8;
    let mut model = MaskedTransformer::new(tcfg(1), ccfg(), k, &mut rng(20)).unwrap();
    let mut r = rng(21);
    let f = features(&mut r, 30);
    let row: Vec<usize> = vec![3, 1, 4, 1, 5, 2];
    let mut opt = Adam::new(AdamConfig {
        schedule: mvq_tensor::LrSchedule::constant(3e-3),
        ..AdamConfig::default()
    });
    let first = model.train_step(&[(&f, row.as_slice())], &mut opt, &mut r).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = model.train_step(&[(&f, row.as_slice())], &mut opt, &mut r).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}
