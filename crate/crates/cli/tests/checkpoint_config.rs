mod common;

use mvq_cli::checkpoint::{self as ckpt, Bundle, Component};
use mvq_cli::config::{Config, SEED_ENV};
use mvq_core::data::build_dataset;

fn tiny() -> Config {
    Config::from_toml(common::TINY).unwrap()
}

fn assert_stable(path: &std::path::Path, resave: impl Fn(&std::path::Path)) {
    let first = std::fs::read(path).unwrap();
    let again = path.with_extension("again");
    resave(&again);
    assert_eq!(first, std::fs::read(&again).unwrap(), "{}", path.display());
}

#[test]
fn save_load_save_is_byte_identical_for_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, _) = build_dataset(cfg.data.train, 1, 0).unwrap();
    let tok = mvq_cli::train::train_tokenizer(&cfg, &train, 2).unwrap().model;
    let grids = mvq_cli::train::tokenize_all(&tok, &train).unwrap();
    let masked = mvq_cli::train::train_masked(&cfg, &train, &grids, 2).unwrap().model;
    let residual = mvq_cli::train::train_residual(&cfg, &train, &grids, 2).unwrap().model;
    let evaluator = mvq_cli::train::train_evaluator(&cfg, &train, 2).unwrap().model;
    let cascade = mvq_cli::train::train_cascade(&cfg, &train, &masked, &residual, 2, 2).unwrap().model;

    let p = |c: Component| dir.path().join(c.file_name());
    ckpt::tokenizer_bundle(&tok, &cfg, 2).save(&p(Component::Rvq)).unwrap();
    ckpt::masked_bundle(&masked, &cfg, 2).save(&p(Component::Masked)).unwrap();
    ckpt::residual_bundle(&residual, &cfg, 2).save(&p(Component::Residual)).unwrap();
    ckpt::evaluator_bundle(&evaluator, &cfg, 2).save(&p(Component::Evaluator)).unwrap();
    ckpt::cascade_bundle(&cascade, &cfg, 4).save(&p(Component::Recognizer)).unwrap();

    assert_stable(&p(Component::Rvq), |out| {
        let (m, b) = ckpt::load_tokenizer(&p(Component::Rvq)).unwrap();
        ckpt::tokenizer_bundle(&m, &b.config().unwrap(), b.step).save(out).unwrap();
    });
    assert_stable(&p(Component::Masked), |out| {
        let (m, b) = ckpt::load_masked(&p(Component::Masked)).unwrap();
        ckpt::masked_bundle(&m, &b.config().unwrap(), b.step).save(out).unwrap();
    });
    assert_stable(&p(Component::Residual), |out| {
        let (m, b) = ckpt::load_residual(&p(Component::Residual)).unwrap();
        ckpt::residual_bundle(&m, &b.config().unwrap(), b.step).save(out).unwrap();
    });
    assert_stable(&p(Component::Evaluator), |out| {
        let (m, b) = ckpt::load_evaluator(&p(Component::Evaluator)).unwrap();
        ckpt::evaluator_bundle(&m, &b.config().unwrap(), b.step).save(out).unwrap();
    });
    assert_stable(&p(Component::Recognizer), |out| {
        let (m, b) = ckpt::load_cascade(&p(Component::Recognizer)).unwrap();
        ckpt::cascade_bundle(&m, &b.config().unwrap(), b.step).save(out).unwrap();
    });

    // a loaded tokenizer tokenizes exactly like the one that was saved
    let (loaded, _) = ckpt::load_tokenizer(&p(Component::Rvq)).unwrap();
    for s in train.samples.iter().take(5) {
        let a = tok.tokenize(&s.motion).unwrap();
        let b = loaded.tokenize(&s.motion).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn wrong_component_and_damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, _) = build_dataset(8, 1, 0).unwrap();
    let tok = mvq_cli::train::train_tokenizer(&cfg, &train, 0).unwrap().model;
    let path = dir.path().join("rvq.mvqc");
    ckpt::tokenizer_bundle(&tok, &cfg, 0).save(&path).unwrap();
    assert!(Bundle::load(&path, Component::Masked).is_err());

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Bundle::from_bytes(&bad).is_err());
    assert!(Bundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Bundle::from_bytes(&long).is_err());
}

#[test]
fn layered_config_and_seed_priority() {
    let dir = tempfile::tempdir().unwrap();
    let with_seed = dir.path().join("a.toml");
    std::fs::write(&with_seed, "[data]\nseed = 11\n").unwrap();
    let without = dir.path().join("b.toml");
    std::fs::write(&without, "[masked]\nsteps = 7\n").unwrap();

    // the only test in this binary that touches the variable
    std::env::set_var(SEED_ENV, "23");
    assert_eq!(Config::resolve(None, None).unwrap().data.seed, 23);
    assert_eq!(Config::resolve(Some(&without), None).unwrap().data.seed, 23);
    assert_eq!(Config::resolve(Some(&with_seed), None).unwrap().data.seed, 11);
    assert_eq!(Config::resolve(Some(&with_seed), Some(5)).unwrap().data.seed, 5);
    std::env::set_var(SEED_ENV, "x");
    assert!(Config::resolve(None, None).is_err());
    std::env::remove_var(SEED_ENV);
    assert_eq!(Config::resolve(None, None).unwrap().data.seed, 0);

    let cfg = Config::resolve(Some(&without), None).unwrap();
    assert_eq!(cfg.masked.steps, 7);
    assert_eq!(cfg.residual.steps, Config::defaults().residual.steps);
    assert_ne!(cfg.digest(), Config::defaults().digest());
    assert_eq!(Config::from_toml(&cfg.canonical()).unwrap(), cfg);
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "[masked]\nheads = 3\n",
        "[pipeline]\niterations = 0\n",
        "[pipeline]\ncfg_masked = -1.0\n",
        "[conditioner]\nkind = \"lstm\"\n",
        "[extra]\nx = 1\n",
        "data = 3\n",
    ] {
        assert!(Config::from_toml(text).is_err(), "{text}");
    }
}
