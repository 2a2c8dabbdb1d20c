use mvq_core::data::{synth_motion, InstructionSpec, MotionSequence, Primitive, MOTION_DIM};
use mvq_core::rvq::{
    quantize_layer, rvq_decompose, Codebook, LatentSequence, RvqConfig, TokenGrid, Tokenizer,
};
use mvq_core::Error;
use mvq_tensor::{Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn brute_force(r: &[f64], entries: &[f64], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, e) in entries.chunks_exact(d).enumerate() {
        let dist: f64 = r.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.0 {
            best = (dist, i);
        }
    }
    best.1
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_books(r: &mut ChaCha8Rng, layers: usize, k: usize, d: usize, pinned: bool) -> Vec<Codebook> {
    (0..layers)
        .map(|j| {
            let scale = 0.5f64.powi(j as i32);
            let entries = gauss(r, k * d).into_iter().map(|v| v * scale).collect();
            Codebook::from_entries(entries, d, 0.99, pinned)
        })
        .collect()
}

#[test]
fn quantize_matches_brute_force_scan() {
    let mut r = rng(1);
    for case in 0..10_000 {
        let d = 1 + case % 6;
        let k = 2 + case % 9;
        let entries = gauss(&mut r, k * d);
        let book = Codebook::from_entries(entries.clone(), d, 0.99, false);
        let x = gauss(&mut r, d);
        let (code, idx) = quantize_layer(&x, &book).unwrap();
        assert_eq!(idx, brute_force(&x, &entries, d), "case {case}");
        assert_eq!(code, &entries[idx * d..(idx + 1) * d]);
    }
}

#[test]
fn quantize_membership_and_zero_book() {
    let mut r = rng(2);
    let entries = gauss(&mut r, 8 * 4);
    let book = Codebook::from_entries(entries.clone(), 4, 0.99, false);
    let (code, idx) = quantize_layer(&entries[12..16], &book).unwrap();
    assert_eq!(idx, 3);
    assert!(code.iter().zip(&entries[12..16]).all(|(a, b)| a - b == 0.0));

    let zero = Codebook::from_entries(vec![0.0; 4], 4, 0.99, false);
    let x = [0.3, -1.0, 2.0, 0.5];
    assert_eq!(quantize_layer(&x, &zero).unwrap(), (&[0.0; 4][..], 0));
}

#[test]
fn quantize_ties_go_to_lowest_index() {
    let book = Codebook::from_entries(vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0], 2, 0.99, false);
    assert_eq!(quantize_layer(&[0.0, 0.0], &book).unwrap().1, 0);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let book = Codebook::from_entries(vec![0.0; 8], 4, 0.99, false);
    assert!(quantize_layer(&[1.0, 2.0], &book).is_err());
    let latent = LatentSequence::new(vec![0.0; 6], 3);
    assert!(rvq_decompose(&latent, &[book]).is_err());
}

#[test]
fn telescoping_identity_over_ten_thousand_decompositions() {
    let mut r = rng(3);
    let d = 4;
    let books = random_books(&mut r, 5, 16, d, true);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let latent = LatentSequence::new(gauss(&mut r, d), d);
        let (grid, residual) = rvq_decompose(&latent, &books).unwrap();
        for c in 0..d {
            let sum: f64 = grid.rows.iter().zip(&books).map(|(row, b)| b.entry(row[0])[c]).sum();
            worst = worst.max((sum + residual[c] - latent.codes[c]).abs());
        }
    }
    assert!(worst <= 1e-12, "telescoping error {worst:e}");
}

#[test]
fn residual_norms_never_grow_with_a_pinned_zero_code() {
    let mut r = rng(4);
    let d = 3;
    for trial in 0..200 {
        let books = random_books(&mut r, 3, 8, d, true);
        let n = 1 + trial % 7;
        let latent = LatentSequence::new(gauss(&mut r, n * d), d);
        let (grid, _) = rvq_decompose(&latent, &books).unwrap();
        for p in 0..n {
            let mut res = latent.position(p).to_vec();
            for (row, book) in grid.rows.iter().zip(&books) {
                let before = norm(&res);
                let code = book.entry(row[p]);
                res.iter_mut().zip(code).for_each(|(x, c)| *x -= c);
                assert!(norm(&res) <= before + 1e-15);
            }
        }
    }
}

#[test]
fn single_layer_decomposition_is_plain_quantization() {
    let mut r = rng(5);
    let books = random_books(&mut r, 1, 8, 4, false);
    let latent = LatentSequence::new(gauss(&mut r, 5 * 4), 4);
    let (grid, _) = rvq_decompose(&latent, &books).unwrap();
    assert_eq!(grid.depth(), 1);
    for p in 0..5 {
        assert_eq!(grid.rows[0][p], quantize_layer(latent.position(p), &books[0]).unwrap().1);
    }
}

#[test]
fn ema_leaves_unassigned_entries_alone() {
    let mut r = rng(6);
    let d = 2;
    let mut book = Codebook::from_entries(gauss(&mut r, 6 * d), d, 0.9, true);
    let before = book.entries().to_vec();
    let vectors = [0.5, 0.5, 0.4, 0.6];
    book.ema_update(&vectors, &[2, 2], 256, &mut r);
    for i in 0..6 {
        let moved = book.entry(i) != &before[i * d..(i + 1) * d];
        assert_eq!(moved, i == 2, "entry {i}");
    }
    assert_eq!(book.usage_counts().iter().sum::<u64>(), 2);
    assert_eq!(book.entry(0), &[0.0, 0.0]);
}

#[test]
fn usage_counts_track_quantized_vectors_until_reset() {
    let mut r = rng(7);
    let d = 2;
    let mut book = Codebook::from_entries(gauss(&mut r, 4 * d), d, 0.99, true);
    for step in 1..=5u64 {
        let vectors = gauss(&mut r, 3 * d);
        let idx: Vec<usize> = vectors
            .chunks_exact(d)
            .map(|v| quantize_layer(v, &book).unwrap().1)
            .collect();
        book.ema_update(&vectors, &idx, 256, &mut r);
        assert_eq!(book.usage_counts().iter().sum::<u64>(), 3 * step);
    }
    book.reset_usage();
    assert_eq!(book.usage_counts().iter().sum::<u64>(), 0);
}

fn tiny_tokenizer(layers: usize) -> Tokenizer {
    let cfg = RvqConfig {
        layers,
        codebook_size: 8,
        latent_dim: 4,
        width: 8,
        ..RvqConfig::default()
    };
    Tokenizer::new(cfg, &mut rng(8)).unwrap()
}

#[test]
fn untrained_encoder_maps_constant_motion_to_constant_latent() {
    let tok = tiny_tokenizer(2);
    let mut frame = [0.0; MOTION_DIM];
    frame[2] = 0.6;
    frame[3] = 0.8;
    frame[4] = 0.1;
    frame[6] = 1.0;
    frame[7] = 1.0;
    let m = MotionSequence::new(frame.repeat(32)).unwrap();
    let latent = tok.encode(&m).unwrap();
    assert_eq!(latent.len(), 8);
    for p in 1..latent.len() {
        for (a, b) in latent.position(p).iter().zip(latent.position(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_ignores_the_pad_region() {
    let tok = tiny_tokenizer(2);
    let m = synth_motion(&InstructionSpec::new(Primitive::Kick, 1.0, 2)).unwrap();
    let mut m = MotionSequence::new(m.frames[..62 * MOTION_DIM].to_vec()).unwrap();
    let grid = tok.tokenize(&m).unwrap();
    assert_eq!(grid.len(), 16);
    let mut other = grid.clone();
    for row in &mut other.rows {
        row[15] = (row[15] + 3) % 8;
    }
    let a = tok.decode_frames(&grid, 60).unwrap();
    let b = tok.decode_frames(&other, 60).unwrap();
    assert_eq!(a.frames, b.frames);
    m.truncate(60);
    assert_eq!(a.len(), m.len());
}

#[test]
fn decode_rejects_out_of_range_tokens() {
    let tok = tiny_tokenizer(1);
    let grid = TokenGrid {
        rows: vec![vec![0, 1, 2], vec![3, 8, 1]],
    };
    match tok.decode(&grid) {
        Err(Error::CorruptToken { layer, pos, index, k }) => assert_eq!((layer, pos, index, k), (1, 1, 8, 8)),
        other => panic!("expected corrupt token, got {other:?}"),
    }
}

#[test]
fn zero_loss_at_perfect_reconstruction_and_exact_hits() {
    // an all-zero decoder output layer reconstructs the zero window exactly
    let mut tok = tiny_tokenizer(1);
    let ids: Vec<_> = tok.params.ids().collect();
    for id in ids {
        tok.params.get_mut(id).data_mut().fill(0.0);
    }
    tok.set_seeded(true);
    let windows = vec![0.0; 2 * 8 * MOTION_DIM];
    let mut opt = Adam::new(AdamConfig::default());
    let loss = tok.train_step(&windows, 2, &mut opt, &mut rng(9)).unwrap();
    assert_eq!(loss.total, 0.0);
    assert_eq!(loss.commit, 0.0);
}

#[test]
fn short_training_run_reduces_loss_without_diverging() {
    let specs: Vec<_> = Primitive::ALL
        .iter()
        .map(|&c| synth_motion(&InstructionSpec::new(c, 1.0, 1)).unwrap())
        .collect();
    let refs: Vec<&MotionSequence> = specs.iter().collect();
    let mut tok = tiny_tokenizer(2);
    tok.normalizer = mvq_core::rvq::Normalizer::fit(refs.iter().copied());
    let mut opt = Adam::new(AdamConfig {
        schedule: mvq_tensor::LrSchedule::new(2e-3, 10),
        ..AdamConfig::default()
    });
    let mut r = rng(10);
    let mut losses = Vec::new();
    for _ in 0..120 {
        let w = tok.sample_windows(&refs, 8, 16, &mut r).unwrap();
        losses.push(tok.train_step(&w, 8, &mut opt, &mut r).unwrap().total);
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[100..].iter().sum::<f64>() / 20.0;
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(tail < head, "loss went from {head} to {tail}");
}
