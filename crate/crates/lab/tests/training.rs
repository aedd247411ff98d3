//! Library-level training behaviour on small in-memory datasets.

use groupdetr::groupdecoder::load_checkpoint;
use groupdetr_lab::config::{RunConfig, Strategy};
use groupdetr_lab::data::{generate_splits, Splits};
use groupdetr_lab::evaluate::evaluate;
use groupdetr_lab::sweep::{sweep, Axis};
use groupdetr_lab::train::{checkpoint_path, train};

fn tiny() -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{"model": {"queries": 6, "d_model": 16, "heads": 2, "layers": 1, "ffn_dim": 32},
            "epochs": 3, "batch_size": 4, "seeds": [0],
            "data": {"train_count": 32, "val_count": 8}}"#,
    )
    .unwrap();
    cfg.checkpoints = false;
    cfg
}

fn splits(cfg: &RunConfig) -> Splits {
    generate_splits(
        &cfg.scene_params(),
        cfg.data.seed,
        cfg.data.train_count,
        cfg.data.val_count,
    )
    .unwrap()
}

#[test]
fn single_group_matches_one_to_one_exactly() {
    let base = tiny();
    let data = splits(&base);
    let one = train(&base, 3, &data, None).unwrap();
    let grouped = RunConfig {
        strategy: Strategy::GroupWise { k: 1 },
        ..base.clone()
    };
    let k1 = train(&grouped, 3, &data, None).unwrap();
    assert_eq!(one.history, k1.history);
    assert_eq!(one.final_eval, k1.final_eval);
    for (a, b) in one.decoder.params().iter().zip(k1.decoder.params().iter()) {
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let cfg = RunConfig {
        strategy: Strategy::GroupWise { k: 2 },
        ..tiny()
    };
    let data = splits(&cfg);
    let a = train(&cfg, 1, &data, None).unwrap();
    let b = train(&cfg, 1, &data, None).unwrap();
    let c = train(&cfg, 2, &data, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_ne!(a.history, c.history);
}

#[test]
fn one_to_many_trains_and_reports() {
    let cfg = RunConfig {
        strategy: Strategy::OneToMany { multiplicity: 1 },
        ..tiny()
    };
    let data = splits(&cfg);
    let run = train(&cfg, 0, &data, None).unwrap();
    assert_eq!(run.history.len(), 3);
    assert!(run.history.iter().all(|m| m.loss.is_finite() && m.pd.is_none()));
}

#[test]
fn non_finite_memory_halts_the_run() {
    let cfg = tiny();
    let mut data = splits(&cfg);
    data.train[5].memory[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, 0, &data, Some(dir.path())).unwrap_err();
    assert!(format!("{err:#}").contains("diverged"), "{err:#}");
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn checkpoints_reproduce_the_final_evaluation() {
    let cfg = RunConfig {
        strategy: Strategy::GroupWise { k: 2 },
        checkpoints: true,
        ..tiny()
    };
    let data = splits(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, 0, &data, Some(dir.path())).unwrap();
    let restored = load_checkpoint(&checkpoint_path(dir.path(), 3)).unwrap();
    let again = evaluate(&restored, &data.val, 0, &cfg.eval).unwrap();
    assert_eq!(again, run.final_eval);
    let loaded = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(loaded.strategy, cfg.strategy);
    assert_eq!(loaded.seeds, vec![0]);
}

#[test]
fn single_value_sweep_equals_a_single_run() {
    let cfg = tiny();
    let data = splits(&cfg);
    let report = sweep(&cfg, Axis::Groups, &[1], &[4], &data, None).unwrap();
    let single = train(
        &RunConfig {
            strategy: Strategy::GroupWise { k: 1 },
            ..cfg
        },
        4,
        &data,
        None,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].map_no_nms, Some(single.final_eval.map_no_nms));
    assert_eq!(report.rows[0].duplicate_rate, Some(single.final_eval.duplicate_rate));
    assert_eq!(report.k3_beats_k1, None);
}

#[test]
fn sweep_records_failures_and_continues() {
    let cfg = tiny();
    let data = splits(&cfg);
    // Six positives per object need more queries than the model has.
    let report = sweep(&cfg, Axis::Multiplicity, &[6, 1], &[0], &data, None).unwrap();
    assert!(report.rows[0].error.is_some());
    assert!(report.rows[1].error.is_none());
    assert_eq!(report.summaries[0].failures, 1);
}
