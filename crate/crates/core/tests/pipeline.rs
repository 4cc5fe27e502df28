use pixcon::checkpoint::Checkpoint;
use pixcon::config::Supervision;
use pixcon::data::{generate_dataset, load_dataset, write_dataset};
use pixcon::eval::evaluate;
use pixcon::training::{train, RunOptions};
use pixcon::TrainConfig;

fn small() -> TrainConfig {
    TrainConfig {
        train_scenes: 12,
        val_scenes: 4,
        roi_resolution: 12,
        channels: 4,
        backbone_blocks: 1,
        encoder_blocks: 1,
        projector_layers: 1,
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let cfg = small();
    let ds = generate_dataset(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, &cfg, dir.path()).unwrap();
    let (back, back_cfg) = load_dataset(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.val, ds.val);
    assert_eq!(back_cfg.base_categories, cfg.base_categories);
}

#[test]
fn scene_files_are_binary_pnm() {
    let cfg = small();
    let ds = generate_dataset(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, &cfg, dir.path()).unwrap();
    let img = std::fs::read(dir.path().join("train/scene_00000.ppm")).unwrap();
    let mask = std::fs::read(dir.path().join("train/masks/scene_00000_0.pgm")).unwrap();
    assert_eq!(&img[..2], b"P6");
    assert_eq!(&mask[..2], b"P5");
}

#[test]
fn final_checkpoint_reproduces_last_evaluation() {
    let cfg = small();
    let ds = generate_dataset(&cfg, cfg.data_seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &cfg,
        &ds,
        &RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let ck = Checkpoint::load(out.final_checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(ck.step, out.records.len() as u64);
    let report = evaluate(&ck, &ds).unwrap();
    assert_eq!(&report, out.evals.last().unwrap());
    for name in ["config.toml", "metrics.jsonl", "eval.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), out.records.len());
}

#[test]
fn audit_stays_clean_for_every_supervision_mode() {
    let ds = generate_dataset(&small(), 0).unwrap();
    for sup in [Supervision::Base, Supervision::Novel, Supervision::All] {
        for sharing in [true, false] {
            let cfg = TrainConfig {
                supervision: sup,
                query_sharing: sharing,
                eval_every_epoch: false,
                ..small()
            };
            let out = train(&cfg, &ds, &RunOptions::default()).unwrap();
            assert_eq!(out.audit_trips, 0, "{sup:?} sharing={sharing}");
        }
    }
}

#[test]
fn oracle_mode_reads_novel_masks_without_tripping() {
    let ds = generate_dataset(&small(), 0).unwrap();
    let cfg = TrainConfig {
        oracle_novel_masks: true,
        eval_every_epoch: false,
        ..small()
    };
    let out = train(&cfg, &ds, &RunOptions::default()).unwrap();
    assert_eq!(out.audit_trips, 0);
    assert!(out.records.iter().any(|r| r.n_novel > 0));
}
