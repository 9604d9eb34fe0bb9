use flowmap::config::RunConfig;
use flowmap::training::{self, Trainer};
use flowmap::Error;

fn small(preset: &str, seed: u64, n_steps: u64) -> RunConfig {
    RunConfig {
        hidden: vec![16, 16],
        weight_hidden: vec![8],
        batch_size: 64,
        shard_size: 16,
        n_steps,
        seed,
        kl_every: 0,
        checkpoint_every: 0,
        output_dir: None,
        ..RunConfig::preset(preset).unwrap()
    }
}

fn run_on(threads: usize, config: &RunConfig) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| training::train(config).unwrap().checkpoint.encode())
}

#[test]
fn thread_count_does_not_change_results() {
    for preset in ["checker-lsd-desk", "checker-esd-desk", "checker-psd-m-desk"] {
        let config = small(preset, 7, 5);
        let one = run_on(1, &config);
        assert_eq!(one, run_on(3, &config), "{preset}");
    }
}

#[test]
fn seeds_change_results() {
    let a = training::train(&small("checker-lsd-desk", 1, 2)).unwrap();
    let b = training::train(&small("checker-lsd-desk", 2, 2)).unwrap();
    assert_ne!(a.checkpoint.theta, b.checkpoint.theta);
}

#[test]
fn run_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        output_dir: Some(dir.path().to_path_buf()),
        eval_every: 2,
        checkpoint_every: 3,
        ..small("checker-lsd-desk", 3, 6)
    };
    training::train(&config).unwrap();
    for name in [
        "config.json",
        "metrics.csv",
        "ckpt_00000003.fmap",
        "ckpt_00000006.fmap",
        "final.fmap",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let steps: Vec<&str> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["2", "4", "6"]);
    let saved = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved.hash(), config.hash());
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let config = RunConfig {
        lr: 1e150,
        lr_decay_start: 1_000_000,
        clip_norm: None,
        ..small("checker-lsd-desk", 4, 20)
    };
    let mut trainer = Trainer::new(config).unwrap();
    let err = (0..20)
        .find_map(|_| trainer.step().err())
        .expect("training should diverge");
    match &err {
        Error::Diverged { step, .. } => assert!(*step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(err.is_numeric());
}
