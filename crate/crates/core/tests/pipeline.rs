#![allow(clippy::field_reassign_with_default)]

use std::fs;

use trajdistill::lab::{
    cmd_distill, cmd_train, DatasetPreset, DenoiserKind, LabConfig, RunManifest,
};
use trajdistill::toy::{held_out_batch, oracle_loss, Checkpoint, GaussianOracle, MlpConfig};
use trajdistill::{Condition, Denoiser, Error, Method};

fn small_training(out: &std::path::Path) -> LabConfig {
    let mut cfg = LabConfig::default();
    cfg.output = out.to_path_buf();
    cfg.train.steps = 300;
    cfg.train.batch = 64;
    cfg.train.held_out = 256;
    cfg.train.network = MlpConfig {
        hidden: vec![32, 32],
        time_frequencies: 4,
        embed_dim: 4,
    };
    cfg
}

#[test]
fn trained_checkpoint_drives_distillation() {
    let tmp = tempfile::tempdir().unwrap();
    let train_cfg = small_training(&tmp.path().join("train"));
    let trained = cmd_train(&train_cfg).unwrap();
    assert!(trained.final_loss < trained.initial_loss);

    let mut cfg = small_training(&tmp.path().join("distill"));
    cfg.denoiser.kind = DenoiserKind::Checkpoint;
    cfg.denoiser.checkpoint = Some(trained.checkpoint.clone());
    cfg.distill.iterations = 20;
    cfg.distill.particles = 4;
    cfg.evaluation.target_samples = 100;
    let dir = cmd_distill(&cfg).unwrap();
    let m = RunManifest::read(&dir).unwrap();
    assert_eq!(m.denoiser_calls, 20 * 18);
    assert!(!m.failed);
}

#[test]
fn learned_loss_never_beats_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_training(tmp.path());
    let trained = cmd_train(&cfg).unwrap();
    let ds = cfg.dataset.build().unwrap();
    let sched = cfg.build_schedule().unwrap();
    let held = held_out_batch(&ds, &sched, cfg.train.held_out, cfg.train.seed);
    let best = oracle_loss(&GaussianOracle::from_dataset(&ds).unwrap(), &sched, &held).unwrap();
    assert!((trained.oracle_loss - best).abs() < 1e-15);
    assert!(trained.final_loss >= best - 1e-6);
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(&small_training(tmp.path())).unwrap();
    let first = Checkpoint::load(&out.checkpoint)
        .unwrap()
        .into_net()
        .unwrap();
    let copy = tmp.path().join("copy.json");
    Checkpoint::from_net(&first, "same").save(&copy).unwrap();
    let second = Checkpoint::load(&copy).unwrap().into_net().unwrap();
    for t in [1, 250, 999] {
        let a = first
            .predict_noise(&[0.3, -1.1], t, Condition::Class(1))
            .unwrap();
        let b = second
            .predict_noise(&[0.3, -1.1], t, Condition::Class(1))
            .unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn checkpoint_from_another_schedule_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(&small_training(&tmp.path().join("train"))).unwrap();
    let mut cfg = LabConfig::default();
    cfg.output = tmp.path().join("distill");
    cfg.schedule.beta_end = 0.03;
    cfg.denoiser.kind = DenoiserKind::Checkpoint;
    cfg.denoiser.checkpoint = Some(out.checkpoint);
    assert!(matches!(cmd_distill(&cfg), Err(Error::Config(_))));

    cfg.schedule.beta_end = 0.02;
    cfg.dataset.preset = DatasetPreset::SeparatedTwoClass;
    cfg.denoiser.checkpoint = Some(tmp.path().join("missing.json"));
    assert!(cmd_distill(&cfg).is_err());
}

#[test]
fn run_directory_suffices_to_rerun_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = LabConfig::default();
    cfg.output = tmp.path().join("first");
    cfg.distill.method = Method::Ism;
    cfg.distill.iterations = 50;
    cfg.distill.particles = 6;
    cfg.distill.snapshot_every = 10;
    cfg.evaluation.target_samples = 100;
    let first = cmd_distill(&cfg).unwrap();

    let mut again = LabConfig::load(&first.join("config.toml")).unwrap();
    assert_eq!(
        again.hash().unwrap(),
        RunManifest::read(&first).unwrap().config_hash
    );
    again.output = tmp.path().join("second");
    let second = cmd_distill(&again).unwrap();
    for f in ["history.jsonl", "metrics.csv", "final_particles.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}
